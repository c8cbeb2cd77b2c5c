"""Image quality (PSNR, SSIM) and trajectory accuracy (ATE) metrics.

The SSIM kernel here is the single implementation shared with the training
loss: 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03, dynamic range
1.0, windows applied as zero-padded same-size correlation, statistics
averaged over every pixel and channel. Zero padding keeps the loss defined
on images smaller than the window; the public :func:`ssim` metric rejects
those instead.

ATE aligns estimated to ground-truth camera centers with a least-squares
similarity transform (rotation + scale + translation) before taking the
RMSE, so a global gauge difference between two reconstructions does not
count as error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateGeometry, DomainError, IdMismatch, ShapeMismatch, TooSmall
from .lie import Pose, TrajectorySpline

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0

PSNR_CAP = 100.0


def _window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _window()


def _filter(image: np.ndarray) -> np.ndarray:
    """Separable same-size window correlation with zero padding.

    The kernel is symmetric, so this operator is its own adjoint; the SSIM
    gradient reuses it directly.
    """
    out = correlate1d(image, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _as_channels(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 3:
        return arr
    raise ShapeMismatch(f"expected an (H, W) or (H, W, C) image, got shape {arr.shape}")


def ssim_and_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its exact gradient with respect to ``pred``.

    No minimum-size guard: with zero padding the statistics are defined for
    any image at least 1x1.
    """
    x = _as_channels(pred)
    y = _as_channels(target)
    if x.shape != y.shape:
        raise ShapeMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2

    mu_x = _filter(x)
    mu_y = _filter(y)
    mxx = _filter(x * x)
    myy = _filter(y * y)
    mxy = _filter(x * y)
    var_x = mxx - mu_x * mu_x
    var_y = myy - mu_y * mu_y
    cov = mxy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    s = (a1 * a2) / (b1 * b2)
    total = x.size
    value = float(s.sum() / total)

    # Partials holding the raw window outputs (mu_x, mxx, mxy) independent.
    d_a1 = a2 / (b1 * b2)
    d_a2 = a1 / (b1 * b2)
    d_b1 = -s / b1
    d_b2 = -s / b2
    d_cov = 2.0 * d_a2
    d_var_x = d_b2
    d_mu_x = 2.0 * mu_y * d_a1 + 2.0 * mu_x * d_b1 - mu_y * d_cov - 2.0 * mu_x * d_var_x
    grad = (_filter(d_mu_x) + 2.0 * x * _filter(d_var_x) + y * _filter(d_cov)) / total
    return value, grad.reshape(np.asarray(pred, dtype=float).shape)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM between two images of identical shape, at least 11x11."""
    x = _as_channels(a)
    y = _as_channels(b)
    if x.shape != y.shape:
        raise ShapeMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise TooSmall(
            f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {x.shape[0]}x{x.shape[1]}"
        )
    value, _ = ssim_and_grad(x, y)
    return value


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(range^2 / MSE) in dB, capped at PSNR_CAP for near-identical pairs."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape:
        raise ShapeMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(SSIM_RANGE * SSIM_RANGE / mse), PSNR_CAP)


@dataclass(frozen=True)
class Trajectory:
    """Ordered (image id -> pose) samples of a camera path."""

    ids: tuple[int, ...]
    poses: tuple[Pose, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.poses):
            raise ShapeMismatch(f"{len(self.ids)} ids but {len(self.poses)} poses")
        if any(b <= a for a, b in zip(self.ids, self.ids[1:])):
            raise DomainError("trajectory ids must be strictly increasing")

    def centers(self) -> np.ndarray:
        """Camera centers in world coordinates, one row per id.

        Poses are world-to-camera, so the center is the inverse translation.
        """
        return np.array([pose.inverse().translation for pose in self.poses])


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity: find (s, R, t) minimizing |dst - (s R src + t)|^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatch(f"point sets must both be (N, 3), got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateGeometry(f"similarity alignment needs at least 3 points, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = float((cs * cs).sum() / n)
    cross = cd.T @ cs / n
    u, d, vt = np.linalg.svd(cross)
    if var_s < 1e-18 or d[0] < 1e-12 or d[1] < 1e-9 * d[0]:
        raise DegenerateGeometry("point sets are coincident or collinear")
    sign = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(u) * np.linalg.det(vt))) or 1.0])
    rot = u @ sign @ vt
    scale = float(np.trace(np.diag(d) @ sign)) / var_s
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def ate(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of camera centers after similarity alignment of est onto gt."""
    if est.ids != gt.ids:
        raise IdMismatch(f"trajectories cover different images: {est.ids} vs {gt.ids}")
    src = est.centers()
    dst = gt.centers()
    scale, rot, trans = umeyama_alignment(src, dst)
    residual = dst - (scale * src @ rot.T + trans)
    return float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))


def trajectory_from_splines(
    splines: dict[int, TrajectorySpline], mode: str = "endpoints"
) -> Trajectory:
    """Sample each image's spline into ATE points.

    ``endpoints`` takes the poses at u = 0 and u = 1 (ids 2k and 2k + 1 for
    image k), so blur extent errors count; ``midpoint`` takes u = 0.5 only.
    """
    if mode not in ("endpoints", "midpoint"):
        raise DomainError(f"unknown ATE sampling mode {mode!r}")
    ids: list[int] = []
    poses: list[Pose] = []
    for image_id in sorted(splines):
        spline = splines[image_id]
        if mode == "endpoints":
            ids.extend((2 * image_id, 2 * image_id + 1))
            poses.extend((spline.pose_at(0.0), spline.pose_at(1.0)))
        else:
            ids.append(image_id)
            poses.append(spline.pose_at(0.5))
    return Trajectory(tuple(ids), tuple(poses))
