"""Differentiable forward rasterization and its exact reverse pass.

Forward: project the scene, sort by depth (ties broken by ascending source
row), gather per-pixel contributor records, and alpha-composite front to
back over a constant background. Compositing for one pixel:

    C = sum_i c_i a_i T_i + bg * T_final,   T_i = prod_{j<i} (1 - a_j)

with a_i = opacity_i * exp(-0.5 d^T conic d), clamped to ALPHA_CLAMP,
contributors below ALPHA_SKIP skipped, and the walk stopped once the
transmittance falls below TRANS_STOP.

Everything is computed on flat record arrays (one record per surviving
Gaussian-pixel pair) with segmented scans per pixel, which is deterministic:
fixed sort order, fixed summation order.

Backward: replays the records stored in RenderAux and produces exact
gradients for every scene parameter plus a 6-vector pose twist. The scene
position gradient includes the dependence of the projected covariance on the
camera-space mean (through the projection Jacobian); the pose twist gradient
deliberately flows through the projected means only, treating each
Gaussian's screen footprint as fixed. FD checks of the pose twist must
therefore hold cov2d at its forward value (see project_scene's
cov2d_override).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AuxMismatch, ShapeMismatch
from .lie import Pose
from .projection import Intrinsics, ProjectedBatch, project_scene
from .scene import GaussianScene, rotation_matrices

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANS_STOP = 1e-4

# Contributor search radius in standard deviations. exp(-0.5 * 3.34^2) is
# just under ALPHA_SKIP, so no pixel with alpha >= ALPHA_SKIP can fall
# outside the box even at opacity 1.
BBOX_SIGMA = 3.34


@dataclass
class ImageBuffer:
    """An H x W x 3 float image, linear intensities.

    Values may exceed [0, 1] transiently during optimization; clamping
    happens only when serializing to 8-bit.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeMismatch(f"image must be (H, W, 3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def clamped(self) -> np.ndarray:
        return np.clip(self.pixels, 0.0, 1.0)


@dataclass
class RenderAux:
    """Replay data for the backward pass.

    Records are sorted by (pixel, depth order); ``rec_slot`` indexes into the
    arrays of ``batch``. ``rec_trans`` is the transmittance in front of each
    record, monotonically non-increasing within a pixel's run.
    """

    batch: ProjectedBatch
    rec_pixel: np.ndarray  # (K,) flat pixel index
    rec_slot: np.ndarray  # (K,) index into batch arrays
    rec_alpha: np.ndarray  # (K,) post-clamp alpha
    rec_clamped: np.ndarray  # (K,) bool, True where the clamp was active
    rec_trans: np.ndarray  # (K,) transmittance before the record
    final_trans: np.ndarray  # (H*W,) transmittance after the last record
    shape: tuple[int, int]
    background: np.ndarray  # (3,)


@dataclass
class GradientBundle:
    """Loss gradients for every scene parameter class and the camera pose.

    ``d_rotations`` is with respect to the raw stored quaternions
    (pre-normalization). ``d_pose_twist`` is with respect to a left
    perturbation (rho, phi) of the world-to-camera pose. ``d_means2d`` holds
    the screen-space mean gradients that densification statistics consume.
    """

    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_raw_opacities: np.ndarray
    d_colors: np.ndarray
    d_pose_twist: np.ndarray
    d_means2d: np.ndarray


def _build_records(
    batch: ProjectedBatch, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Flat (record -> slot, record -> pixel) arrays in depth order.

    Stable argsort on depth keeps equal depths in ascending source order
    because batch rows are already in source order.
    """
    order = np.argsort(batch.depth, kind="stable")
    lam_max = 0.5 * (batch.cov2d[:, 0, 0] + batch.cov2d[:, 1, 1]) + np.sqrt(
        np.maximum(
            0.25 * (batch.cov2d[:, 0, 0] - batch.cov2d[:, 1, 1]) ** 2 + batch.cov2d[:, 0, 1] ** 2,
            0.0,
        )
    )
    radius = BBOX_SIGMA * np.sqrt(lam_max[order])
    mx = batch.mean2d[order, 0]
    my = batch.mean2d[order, 1]
    # Pixel j has center j + 0.5; cover |center - mean| <= radius, clipped.
    x0 = np.clip(np.ceil(mx - radius - 0.5).astype(int), 0, width)
    x1 = np.clip(np.floor(mx + radius - 0.5).astype(int) + 1, 0, width)
    y0 = np.clip(np.ceil(my - radius - 0.5).astype(int), 0, height)
    y1 = np.clip(np.floor(my + radius - 0.5).astype(int) + 1, 0, height)
    wx = np.maximum(x1 - x0, 0)
    wy = np.maximum(y1 - y0, 0)
    counts = wx * wy
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)

    rec_rank = np.repeat(np.arange(len(order)), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    within = np.arange(total) - starts[rec_rank]
    px = x0[rec_rank] + within % np.maximum(wx[rec_rank], 1)
    py = y0[rec_rank] + within // np.maximum(wx[rec_rank], 1)
    return order[rec_rank], py * width + px


def render_forward(
    scene: GaussianScene,
    pose: Pose,
    intr: Intrinsics,
    background: np.ndarray,
    cov2d_override: np.ndarray | None = None,
) -> tuple[ImageBuffer, RenderAux]:
    """Rasterize the scene for one camera; returns the image and replay data."""
    background = np.asarray(background, dtype=float).reshape(3)
    width, height = intr.width, intr.height
    batch = project_scene(scene, pose, intr, cov2d_override)
    slots, pixels = _build_records(batch, width, height)

    if len(slots):
        px = (pixels % width) + 0.5
        py = (pixels // width) + 0.5
        dx = px - batch.mean2d[slots, 0]
        dy = py - batch.mean2d[slots, 1]
        a = batch.conic[slots, 0, 0]
        b = batch.conic[slots, 0, 1]
        c = batch.conic[slots, 1, 1]
        # The conic is positive definite; clip tiny negative roundoff.
        power = np.maximum(0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy), 0.0)
        opac = scene.activated_opacities()[batch.idx[slots]]
        alpha_raw = opac * np.exp(-power)
        clamped = alpha_raw > ALPHA_CLAMP
        alpha = np.where(clamped, ALPHA_CLAMP, alpha_raw)
        keep = alpha >= ALPHA_SKIP
        slots, pixels, alpha, clamped = slots[keep], pixels[keep], alpha[keep], clamped[keep]

    if len(slots) == 0:
        image = np.broadcast_to(background, (height, width, 3)).copy()
        aux = RenderAux(
            batch=batch,
            rec_pixel=np.empty(0, dtype=int),
            rec_slot=np.empty(0, dtype=int),
            rec_alpha=np.empty(0),
            rec_clamped=np.empty(0, dtype=bool),
            rec_trans=np.empty(0),
            final_trans=np.ones(height * width),
            shape=(height, width),
            background=background,
        )
        return ImageBuffer(image), aux

    # Group records by pixel; the stable sort preserves depth order inside
    # each pixel's run.
    grouping = np.argsort(pixels, kind="stable")
    pixels = pixels[grouping]
    slots = slots[grouping]
    alpha = alpha[grouping]
    clamped = clamped[grouping]

    # Per-record transmittance via a segmented prefix sum of log(1 - alpha),
    # then drop everything past the termination threshold.
    log_one_minus = np.log1p(-alpha)
    seg_start = np.concatenate(([True], pixels[1:] != pixels[:-1]))
    cumsum = np.cumsum(log_one_minus)
    exclusive = cumsum - log_one_minus
    base = np.repeat(exclusive[seg_start], np.diff(np.append(np.flatnonzero(seg_start), len(pixels))))
    log_trans = exclusive - base
    keep = log_trans >= math.log(TRANS_STOP)
    pixels, slots, alpha, clamped = pixels[keep], slots[keep], alpha[keep], clamped[keep]
    trans = np.exp(log_trans[keep])

    npx = height * width
    weight = alpha * trans
    colors = scene.colors[batch.idx[slots]]
    flat = np.empty((npx, 3))
    for ch in range(3):
        flat[:, ch] = np.bincount(pixels, weights=weight * colors[:, ch], minlength=npx)
    final_trans = np.exp(np.bincount(pixels, weights=np.log1p(-alpha), minlength=npx))
    flat += background * final_trans[:, None]

    aux = RenderAux(
        batch=batch,
        rec_pixel=pixels,
        rec_slot=slots,
        rec_alpha=alpha,
        rec_clamped=clamped,
        rec_trans=trans,
        final_trans=final_trans,
        shape=(height, width),
        background=background,
    )
    return ImageBuffer(flat.reshape(height, width, 3)), aux


def _quat_grad(quats: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain (N, 3, 3) rotation-matrix gradients to raw (N, 4) quaternions."""
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / norms
    w, x, y, z = q.T
    m = d_rot
    dw = 2.0 * (
        -m[:, 0, 1] * z + m[:, 0, 2] * y + m[:, 1, 0] * z - m[:, 1, 2] * x - m[:, 2, 0] * y + m[:, 2, 1] * x
    )
    dx = 2.0 * (
        m[:, 0, 1] * y + m[:, 0, 2] * z + m[:, 1, 0] * y - 2.0 * m[:, 1, 1] * x - m[:, 1, 2] * w
        + m[:, 2, 0] * z + m[:, 2, 1] * w - 2.0 * m[:, 2, 2] * x
    )
    dy = 2.0 * (
        -2.0 * m[:, 0, 0] * y + m[:, 0, 1] * x + m[:, 0, 2] * w + m[:, 1, 0] * x + m[:, 1, 2] * z
        - m[:, 2, 0] * w + m[:, 2, 1] * z - 2.0 * m[:, 2, 2] * y
    )
    dz = 2.0 * (
        -2.0 * m[:, 0, 0] * z - m[:, 0, 1] * w + m[:, 0, 2] * x + m[:, 1, 0] * w - 2.0 * m[:, 1, 1] * z
        + m[:, 1, 2] * y + m[:, 2, 0] * x + m[:, 2, 1] * y
    )
    d_unit = np.stack([dw, dx, dy, dz], axis=1)
    radial = np.sum(d_unit * q, axis=1, keepdims=True)
    return (d_unit - q * radial) / norms


def render_backward(
    scene: GaussianScene,
    pose: Pose,
    intr: Intrinsics,
    aux: RenderAux,
    d_image: np.ndarray,
) -> GradientBundle:
    """Exact gradients of a scalar loss given d(loss)/d(image)."""
    if aux.batch.num_source != scene.num_gaussians:
        raise AuxMismatch(
            f"aux built for {aux.batch.num_source} Gaussians, scene has {scene.num_gaussians}"
        )
    height, width = aux.shape
    d_image = np.asarray(d_image, dtype=float)
    if d_image.shape != (height, width, 3):
        raise ShapeMismatch(f"d_image shape {d_image.shape} does not match render {(height, width, 3)}")

    n = scene.num_gaussians
    batch = aux.batch
    m = len(batch)
    bundle = GradientBundle(
        d_positions=np.zeros((n, 3)),
        d_log_scales=np.zeros((n, 3)),
        d_rotations=np.zeros((n, 4)),
        d_raw_opacities=np.zeros(n),
        d_colors=np.zeros((n, 3)),
        d_pose_twist=np.zeros(6),
        d_means2d=np.zeros((n, 2)),
    )
    if len(aux.rec_slot) == 0:
        return bundle

    pixels = aux.rec_pixel
    slots = aux.rec_slot
    alpha = aux.rec_alpha
    trans = aux.rec_trans
    dl_flat = d_image.reshape(-1, 3)
    dl_rec = dl_flat[pixels]

    src = batch.idx[slots]
    colors = scene.colors[src]
    opac_slot = scene.activated_opacities()[batch.idx]
    weight = alpha * trans

    # Suffix contribution behind each record: everything the pixel composited
    # after it, including the background term. S_r = C_pixel - prefix_r.
    composite = np.zeros((height * width, 3))
    for ch in range(3):
        composite[:, ch] = np.bincount(pixels, weights=weight * colors[:, ch], minlength=height * width)
    composite += aux.background * aux.final_trans[:, None]
    seg_start = np.concatenate(([True], pixels[1:] != pixels[:-1]))
    seg_id = np.cumsum(seg_start) - 1
    prefix = np.cumsum(weight[:, None] * colors, axis=0)
    first = np.flatnonzero(seg_start)
    seg_offset = prefix[first] - (weight[first, None] * colors[first])
    suffix = composite[pixels] - (prefix - seg_offset[seg_id])

    d_alpha = np.einsum(
        "rc,rc->r", dl_rec, colors * trans[:, None] - suffix / (1.0 - alpha)[:, None]
    )
    d_colors_rec = weight[:, None] * dl_rec

    # alpha = opacity * exp(-power); clamped records pass no gradient upstream.
    live = ~aux.rec_clamped
    gauss = np.where(live, alpha / opac_slot[slots], 0.0)
    d_opac_rec = gauss * d_alpha
    d_power = np.where(live, -alpha * d_alpha, 0.0)

    px = (pixels % width) + 0.5
    py = (pixels // width) + 0.5
    dx = px - batch.mean2d[slots, 0]
    dy = py - batch.mean2d[slots, 1]
    ca = batch.conic[slots, 0, 0]
    cb = batch.conic[slots, 0, 1]
    cc = batch.conic[slots, 1, 1]
    gx = ca * dx + cb * dy
    gy = cb * dx + cc * dy
    # power = 0.5 d^T A d with d = pixel - mean2d: d(power)/d(mean2d) = -A d,
    # d(power)/d(cov2d) = -0.5 (A d)(A d)^T through A = cov2d^-1.
    d_mean2d_rec_x = -d_power * gx
    d_mean2d_rec_y = -d_power * gy
    d_cov_xx = d_power * (-0.5 * gx * gx)
    d_cov_xy = d_power * (-gx * gy) * 0.5  # accumulated once per off-diagonal entry
    d_cov_yy = d_power * (-0.5 * gy * gy)

    def per_slot(values: np.ndarray) -> np.ndarray:
        return np.bincount(slots, weights=values, minlength=m)

    d_mean2d = np.stack([per_slot(d_mean2d_rec_x), per_slot(d_mean2d_rec_y)], axis=1)
    d_cov2d = np.empty((m, 2, 2))
    d_cov2d[:, 0, 0] = per_slot(d_cov_xx)
    d_cov2d[:, 0, 1] = per_slot(d_cov_xy)
    d_cov2d[:, 1, 0] = d_cov2d[:, 0, 1]
    d_cov2d[:, 1, 1] = per_slot(d_cov_yy)
    d_opac_slot = per_slot(d_opac_rec)
    d_colors_slot = np.stack([per_slot(d_colors_rec[:, ch]) for ch in range(3)], axis=1)

    # Chain through the projection. Mean path: d(mean2d)/d(mean_cam) = jac.
    d_mean_cam_mean = np.einsum("mji,mj->mi", batch.jac, d_mean2d)

    # Covariance path: cov2d = J V J^T + const, V the camera-frame 3D
    # covariance. dV = J^T G J; the J(mean_cam) dependence feeds the mean.
    d_cam_cov = np.einsum("mji,mjk,mkl->mil", batch.jac, d_cov2d, batch.jac)
    gjv = np.einsum("mij,mjk,mkl->mil", d_cov2d, batch.jac, batch.cam_cov)
    x, y, z = batch.mean_cam.T
    fx, fy = intr.fx, intr.fy
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    d_mean_cam_cov = np.zeros((m, 3))
    d_mean_cam_cov[:, 0] = 2.0 * gjv[:, 0, 2] * (-fx * inv_z2)
    d_mean_cam_cov[:, 1] = 2.0 * gjv[:, 1, 2] * (-fy * inv_z2)
    d_mean_cam_cov[:, 2] = 2.0 * (
        gjv[:, 0, 0] * (-fx * inv_z2)
        + gjv[:, 1, 1] * (-fy * inv_z2)
        + gjv[:, 0, 2] * (2.0 * fx * x * inv_z3)
        + gjv[:, 1, 2] * (2.0 * fy * y * inv_z3)
    )

    rot = pose.rotation.matrix()
    d_mean_cam = d_mean_cam_mean + d_mean_cam_cov
    d_positions = d_mean_cam @ rot
    d_world_cov = np.einsum("ji,mjk,kl->mil", rot, d_cam_cov, rot)

    # World covariance is R diag(s^2) R^T from the activated scene rotation
    # and scales.
    quats = scene.rotations[batch.idx]
    r3 = rotation_matrices(quats)
    s2 = scene.activated_scales()[batch.idx] ** 2
    rtgr = np.einsum("mji,mjk,mkl->mil", r3, d_world_cov, r3)
    d_log_scales = 2.0 * s2 * np.einsum("mii->mi", rtgr)
    d_rot_mat = 2.0 * np.einsum("mij,mjk,mk->mik", d_world_cov, r3, s2)
    d_quats = _quat_grad(quats, d_rot_mat)

    opac = scene.activated_opacities()[batch.idx]
    d_raw_opac = d_opac_slot * opac * (1.0 - opac)

    # Pose twist: mean path only. Left perturbation of the world-to-camera
    # pose moves mean_cam by (rho + phi x mean_cam).
    bundle.d_pose_twist[:3] = d_mean_cam_mean.sum(axis=0)
    bundle.d_pose_twist[3:] = np.cross(batch.mean_cam, d_mean_cam_mean).sum(axis=0)

    np.add.at(bundle.d_positions, batch.idx, d_positions)
    np.add.at(bundle.d_log_scales, batch.idx, d_log_scales)
    np.add.at(bundle.d_rotations, batch.idx, d_quats)
    np.add.at(bundle.d_raw_opacities, batch.idx, d_raw_opac)
    np.add.at(bundle.d_colors, batch.idx, d_colors_slot)
    np.add.at(bundle.d_means2d, batch.idx, d_mean2d)
    return bundle
