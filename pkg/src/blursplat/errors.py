"""Exception types shared across the package.

Everything raised on purpose derives from BlurSplatError so the CLI can catch
one base class, print the message, and exit nonzero without a traceback.
"""

from __future__ import annotations


class BlurSplatError(Exception):
    """Base class for all errors raised by this package."""


class AngleNearPi(BlurSplatError):
    """Rotation angle too close to pi for a stable logarithm."""


class DomainError(BlurSplatError):
    """Input outside the mathematical domain of an operation."""


class ShapeMismatch(BlurSplatError):
    """Array arguments disagree in shape."""


class IdMismatch(BlurSplatError):
    """Two trajectories do not cover the same set of image ids."""


class DegenerateGeometry(BlurSplatError):
    """Point configuration too degenerate for a similarity alignment."""


class EmptyCloud(BlurSplatError):
    """Point cloud with zero points where at least one is required."""


class TooSmall(BlurSplatError):
    """Image smaller than the metric's window."""


class AuxMismatch(BlurSplatError):
    """Replay data does not match the scene it is applied to."""


class ParseError(BlurSplatError):
    """Malformed text input (dataset files, config files)."""


class UnsupportedCameraModel(BlurSplatError):
    """Camera model other than PINHOLE / SIMPLE_PINHOLE."""


class NonFiniteLoss(BlurSplatError):
    """Training loss became NaN or infinite."""
