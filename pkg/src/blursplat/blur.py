"""Physical motion-blur formation: average sharp renders along a trajectory.

A blurry capture is modeled as the mean of n virtual sharp images taken at
poses traj(u_i), u_i = i / (n - 1), endpoints included. The backward pass
feeds each sub-render d(loss)/d(blur) / n, sums the scene gradients, and
maps each sub-render's pose twist gradient onto the trajectory knots through
the interpolation Jacobian. That 1/n factor per sample is why densification
thresholds are rescaled when n changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .lie import TrajectorySpline, pose_jacobian_wrt_knots
from .projection import Intrinsics
from .rasterizer import GradientBundle, ImageBuffer, RenderAux, render_backward, render_forward
from .scene import GaussianScene


@dataclass(frozen=True)
class BlurConfig:
    n_virtual: int = 10

    def __post_init__(self) -> None:
        if self.n_virtual < 2:
            raise DomainError(f"blur synthesis needs at least 2 samples, got {self.n_virtual}")


def virtual_times(n: int) -> np.ndarray:
    """Exposure fractions u_i = i / (n - 1), i = 0 .. n-1."""
    return np.arange(n) / (n - 1)


@dataclass
class BlurAux:
    """Per-sample replay data from one blur synthesis."""

    times: np.ndarray
    renders: list[RenderAux]


@dataclass
class BlurGradients:
    """Scene gradients summed over samples plus per-knot twist gradients.

    ``screen_norm_sum`` / ``screen_count`` aggregate per-sample screen-space
    mean gradient norms for densification statistics: the count increments
    once per sample in which the Gaussian was projected.
    """

    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_raw_opacities: np.ndarray
    d_colors: np.ndarray
    d_knots: np.ndarray  # (num_knots, 6)
    screen_norm_sum: np.ndarray
    screen_count: np.ndarray


def synthesize_blur(
    scene: GaussianScene,
    traj: TrajectorySpline,
    intr: Intrinsics,
    cfg: BlurConfig,
    background: np.ndarray,
) -> tuple[ImageBuffer, BlurAux]:
    """Render the n-sample blurry image and keep every sub-render's aux.

    The average is computed relative to the first sample (ref + mean of
    differences), so a static trajectory reproduces the sharp render exactly
    instead of to within a rounding ulp.
    """
    times = virtual_times(cfg.n_virtual)
    renders: list[RenderAux] = []
    reference: np.ndarray | None = None
    residual = np.zeros((intr.height, intr.width, 3))
    for u in times:
        image, aux = render_forward(scene, traj.pose_at(u), intr, background)
        if reference is None:
            reference = image.pixels
        else:
            residual += image.pixels - reference
        renders.append(aux)
    assert reference is not None
    return ImageBuffer(reference + residual / cfg.n_virtual), BlurAux(times=times, renders=renders)


def blur_backward(
    scene: GaussianScene,
    traj: TrajectorySpline,
    intr: Intrinsics,
    aux: BlurAux,
    d_blur: np.ndarray,
) -> BlurGradients:
    """Distribute d(loss)/d(blur) over the samples and pull back to knots.

    Must be called with the trajectory in its folded state (zero knot
    deltas); the knot Jacobian is evaluated there.
    """
    n = len(aux.times)
    d_sample = np.asarray(d_blur, dtype=float) / n
    num = scene.num_gaussians
    out = BlurGradients(
        d_positions=np.zeros((num, 3)),
        d_log_scales=np.zeros((num, 3)),
        d_rotations=np.zeros((num, 4)),
        d_raw_opacities=np.zeros(num),
        d_colors=np.zeros((num, 3)),
        d_knots=np.zeros((traj.num_knots, 6)),
        screen_norm_sum=np.zeros(num),
        screen_count=np.zeros(num),
    )
    for u, render_aux in zip(aux.times, aux.renders):
        pose = traj.pose_at(u)
        bundle: GradientBundle = render_backward(scene, pose, intr, render_aux, d_sample)
        out.d_positions += bundle.d_positions
        out.d_log_scales += bundle.d_log_scales
        out.d_rotations += bundle.d_rotations
        out.d_raw_opacities += bundle.d_raw_opacities
        out.d_colors += bundle.d_colors
        jac = pose_jacobian_wrt_knots(traj, u)  # (6, 6 * num_knots)
        out.d_knots += (jac.T @ bundle.d_pose_twist).reshape(traj.num_knots, 6)
        visible = render_aux.batch.idx
        out.screen_norm_sum[visible] += np.linalg.norm(bundle.d_means2d[visible], axis=1)
        out.screen_count[visible] += 1.0
    return out
