"""Perspective projection of 3D Gaussians to screen-space 2D Gaussians.

The camera covariance is pushed through the projection with the standard
first-order (EWA) approximation: with world-to-camera rotation W and the
projection Jacobian J at the camera-space mean,

    cov2d = J W cov3d W^T J^T + DILATION * I.

The dilation inflates every screen Gaussian by a fixed isotropic floor so
that sub-pixel Gaussians still cover their pixel; it also bounds the 2D
covariance eigenvalues away from zero, which keeps the inverse stable.

Pixel centers sit at (j + 0.5, i + 0.5) for column j, row i; intrinsics are
expected to place the principal point accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .lie import Pose
from .scene import GaussianScene

# Points closer than this to the camera plane are culled rather than
# projected; the Jacobian blows up as 1/z^2.
NEAR_PLANE = 0.01

# Gaussians whose projected center falls outside the image rectangle scaled
# by this factor (about its center) are culled.
GUARD_BAND = 1.3

# Isotropic variance added to every projected covariance, in pixel^2.
DILATION = 0.3


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: x' = fx * x / z + cx, y' = fy * y / z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("image dimensions must be at least 1")


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2) after dilation
    depth: float  # camera-space z


@dataclass
class ProjectedBatch:
    """Visible subset of a scene, projected for one camera pose.

    ``idx`` holds source row indices into the scene; every other array is
    aligned with it. ``conic`` is the inverse of ``cov2d``.
    """

    idx: np.ndarray  # (M,) int
    mean_cam: np.ndarray  # (M, 3)
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2)
    conic: np.ndarray  # (M, 2, 2)
    depth: np.ndarray  # (M,)
    jac: np.ndarray  # (M, 2, 3) projection Jacobians
    cam_cov: np.ndarray  # (M, 3, 3) covariances rotated into the camera frame
    num_source: int

    def __len__(self) -> int:
        return len(self.idx)


def projection_jacobian(mean_cam: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """2x3 derivative of pixel coordinates with respect to the camera-space point."""
    x, y, z = np.asarray(mean_cam, dtype=float)
    if z <= 0.0:
        raise DomainError("projection Jacobian undefined at or behind the camera plane")
    return np.array(
        [[intr.fx / z, 0.0, -intr.fx * x / (z * z)], [0.0, intr.fy / z, -intr.fy * y / (z * z)]]
    )


def _project_arrays(
    means: np.ndarray,
    covs: np.ndarray,
    pose: Pose,
    intr: Intrinsics,
    cov2d_override: np.ndarray | None = None,
) -> ProjectedBatch:
    n = len(means)
    rot = pose.rotation.matrix()
    mean_cam_all = means @ rot.T + pose.translation

    near = mean_cam_all[:, 2] > NEAR_PLANE
    mean2d_all = np.full((n, 2), np.nan)
    z_safe = np.where(near, mean_cam_all[:, 2], 1.0)
    mean2d_all[:, 0] = intr.fx * mean_cam_all[:, 0] / z_safe + intr.cx
    mean2d_all[:, 1] = intr.fy * mean_cam_all[:, 1] / z_safe + intr.cy

    margin_x = 0.5 * (GUARD_BAND - 1.0) * intr.width
    margin_y = 0.5 * (GUARD_BAND - 1.0) * intr.height
    inside = (
        near
        & (mean2d_all[:, 0] >= -margin_x)
        & (mean2d_all[:, 0] <= intr.width + margin_x)
        & (mean2d_all[:, 1] >= -margin_y)
        & (mean2d_all[:, 1] <= intr.height + margin_y)
    )
    idx = np.flatnonzero(inside)

    mean_cam = mean_cam_all[idx]
    x, y, z = mean_cam.T
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = intr.fx / z
    jac[:, 0, 2] = -intr.fx * x / (z * z)
    jac[:, 1, 1] = intr.fy / z
    jac[:, 1, 2] = -intr.fy * y / (z * z)

    cam_cov = np.einsum("ij,njk,lk->nil", rot, covs[idx], rot)
    if cov2d_override is None:
        cov2d = np.einsum("nij,njk,nlk->nil", jac, cam_cov, jac)
        cov2d[:, 0, 0] += DILATION
        cov2d[:, 1, 1] += DILATION
    else:
        cov2d = np.asarray(cov2d_override, dtype=float)[idx]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det

    return ProjectedBatch(
        idx=idx,
        mean_cam=mean_cam,
        mean2d=mean2d_all[idx],
        cov2d=cov2d,
        conic=conic,
        depth=mean_cam[:, 2].copy(),
        jac=jac,
        cam_cov=cam_cov,
        num_source=n,
    )


def project_scene(
    scene: GaussianScene,
    pose: Pose,
    intr: Intrinsics,
    cov2d_override: np.ndarray | None = None,
) -> ProjectedBatch:
    """Project every non-culled Gaussian of a scene.

    ``cov2d_override`` substitutes precomputed 2D covariances (indexed by
    scene row); used to evaluate pose perturbations with the screen footprint
    held fixed, matching the pose gradient's mean-only path.
    """
    return _project_arrays(scene.positions, scene.covariances(), pose, intr, cov2d_override)


def project_gaussian(
    mean: np.ndarray, cov: np.ndarray, pose: Pose, intr: Intrinsics
) -> ProjectedGaussian | None:
    """Project a single Gaussian; returns None when culled."""
    batch = _project_arrays(
        np.asarray(mean, dtype=float).reshape(1, 3),
        np.asarray(cov, dtype=float).reshape(1, 3, 3),
        pose,
        intr,
    )
    if len(batch) == 0:
        return None
    return ProjectedGaussian(batch.mean2d[0], batch.cov2d[0], float(batch.depth[0]))
