"""The optimizable scene: N anisotropic 3D Gaussians.

Storage is raw and unconstrained so plain gradient steps stay valid:

- ``log_scales``: per-axis log standard deviations, activated with exp.
- ``rotations``: quaternions stored unnormalized; normalization is the
  activation, so activated quaternions are always unit.
- ``raw_opacities``: logits, squashed through a logistic into (0, 1).
- ``colors``: RGB in [0, 1] at init, unclamped during optimization.

The world-space covariance of Gaussian i is R S S^T R^T with S diagonal from
the activated scales, which keeps it symmetric positive semidefinite for any
raw values.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, EmptyCloud, ParseError

CHECKPOINT_MAGIC = "BLURSPLAT-CKPT-1"

# Activated opacity used for fresh Gaussians; low enough that bad points fade
# away quickly under the loss.
INIT_OPACITY = 0.1


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    """Inverse of the logistic sigmoid; accepts scalars or arrays."""
    arr = np.log(np.asarray(p, dtype=float) / (1.0 - np.asarray(p, dtype=float)))
    return float(arr) if np.isscalar(p) else arr


def rotation_matrices(quats: np.ndarray) -> np.ndarray:
    """(N, 4) raw quaternions -> (N, 3, 3) rotation matrices.

    Normalizes but deliberately does not flip signs: R(-q) = R(q), and a sign
    flip would put a kink in the gradient of the raw parameters.
    """
    q = np.asarray(quats, dtype=float)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DomainError("zero-norm quaternion in scene rotations")
    w, x, y, z = (q / norms).T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=1,
    )


@dataclass
class GaussianScene:
    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) raw (w, x, y, z)
    raw_opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    extent: float
    grad_accum_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad_accum_count: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        self.raw_opacities = np.asarray(self.raw_opacities, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        if self.grad_accum_sum is None:
            self.grad_accum_sum = np.zeros(n)
        if self.grad_accum_count is None:
            self.grad_accum_count = np.zeros(n)

    @property
    def num_gaussians(self) -> int:
        return len(self.positions)

    def activated_scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def activated_opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacities)

    def rotation_matrices(self) -> np.ndarray:
        return rotation_matrices(self.rotations)

    def covariances(self) -> np.ndarray:
        """World-space (N, 3, 3) covariances R diag(s^2) R^T."""
        r = self.rotation_matrices()
        s2 = self.activated_scales() ** 2
        return np.einsum("nik,nk,njk->nij", r, s2, r)

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.raw_opacities.copy(),
            self.colors.copy(),
            self.extent,
            self.grad_accum_sum.copy(),
            self.grad_accum_count.copy(),
        )

    def reset_grad_accum(self) -> None:
        self.grad_accum_sum = np.zeros(self.num_gaussians)
        self.grad_accum_count = np.zeros(self.num_gaussians)


def init_from_pointcloud(
    points: np.ndarray, colors: np.ndarray, extent: float | None = None
) -> GaussianScene:
    """Seed a scene from a sparse cloud: one isotropic Gaussian per point.

    Per-point scale is the mean distance to its 3 nearest neighbors (fewer if
    the cloud is tiny); a lone point falls back to 1% of the scene extent.
    Activated opacity starts at INIT_OPACITY, rotations at identity.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    m = len(points)
    if m == 0:
        raise EmptyCloud("cannot initialize a scene from zero points")
    if len(colors) != m:
        raise DomainError(f"{m} points but {len(colors)} colors")

    if extent is None:
        diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0))) if m > 1 else 0.0
        if diag <= 0.0:
            raise DomainError("scene extent required for a degenerate point cloud")
        extent = diag

    if m == 1:
        scales = np.full(1, 0.01 * extent)
    else:
        k = min(3, m - 1)
        dists, _ = cKDTree(points).query(points, k=k + 1)
        # Column 0 is the point itself; duplicates get a floor so log is finite.
        scales = np.maximum(dists[:, 1:].mean(axis=1), 1e-6 * extent)

    n = m
    return GaussianScene(
        positions=points.copy(),
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        raw_opacities=np.full(n, logit(INIT_OPACITY)),
        colors=np.clip(colors, 0.0, 1.0),
        extent=float(extent),
    )


@dataclass
class DensifyConfig:
    """Thresholds for adaptive cloning / splitting / pruning.

    ``tau_base`` is the screen-space gradient threshold calibrated for
    ``tau_base_n_virtual`` blur samples; with n samples each sub-render's
    gradient carries a 1/n factor, so the effective threshold is rescaled by
    tau_base_n_virtual / n.
    """

    tau_base: float = 1e-5
    tau_base_n_virtual: int = 10
    clone_scale_frac: float = 0.01
    split_scale_divisor: float = 1.6
    prune_opacity: float = 0.005
    seed: int = 0


def densify_and_prune(
    scene: GaussianScene, iteration: int, cfg: DensifyConfig, n_virtual: int
) -> tuple[GaussianScene, np.ndarray]:
    """Clone small / split large high-gradient Gaussians, drop transparent ones.

    Returns the new scene and a source-row array: entry i is the old row the
    new row i was carried over from, or -1 for freshly created rows (the
    optimizer zero-initializes moments for those). Gradient accumulators are
    reset. Split offspring positions are sampled from the parent Gaussian with
    an rng seeded by (cfg.seed, iteration) so runs are reproducible.
    """
    n = scene.num_gaussians
    tau_eff = cfg.tau_base * (cfg.tau_base_n_virtual / n_virtual)
    mean_grad = np.divide(
        scene.grad_accum_sum,
        scene.grad_accum_count,
        out=np.zeros(n),
        where=scene.grad_accum_count > 0,
    )
    hot = mean_grad > tau_eff
    small = scene.activated_scales().max(axis=1) < cfg.clone_scale_frac * scene.extent
    clone_mask = hot & small
    split_mask = hot & ~small

    keep_mask = ~split_mask  # split parents are replaced by their offspring
    source = [np.flatnonzero(keep_mask)]
    parts = {
        "positions": [scene.positions[keep_mask]],
        "log_scales": [scene.log_scales[keep_mask]],
        "rotations": [scene.rotations[keep_mask]],
        "raw_opacities": [scene.raw_opacities[keep_mask]],
        "colors": [scene.colors[keep_mask]],
    }

    if clone_mask.any():
        source.append(np.full(int(clone_mask.sum()), -1))
        parts["positions"].append(scene.positions[clone_mask])
        parts["log_scales"].append(scene.log_scales[clone_mask])
        parts["rotations"].append(scene.rotations[clone_mask])
        parts["raw_opacities"].append(scene.raw_opacities[clone_mask])
        parts["colors"].append(scene.colors[clone_mask])

    if split_mask.any():
        rng = np.random.default_rng([cfg.seed, iteration])
        idx = np.flatnonzero(split_mask)
        rep = np.repeat(idx, 2)
        r = scene.rotation_matrices()[rep]
        s = scene.activated_scales()[rep]
        z = rng.standard_normal((len(rep), 3))
        offsets = np.einsum("nij,nj->ni", r, s * z)
        source.append(np.full(len(rep), -1))
        parts["positions"].append(scene.positions[rep] + offsets)
        parts["log_scales"].append(scene.log_scales[rep] - np.log(cfg.split_scale_divisor))
        parts["rotations"].append(scene.rotations[rep])
        parts["raw_opacities"].append(scene.raw_opacities[rep])
        parts["colors"].append(scene.colors[rep])

    merged = {k: np.concatenate(v, axis=0) for k, v in parts.items()}
    source_rows = np.concatenate(source)

    alive = sigmoid(merged["raw_opacities"]) >= cfg.prune_opacity
    out = GaussianScene(
        positions=merged["positions"][alive],
        log_scales=merged["log_scales"][alive],
        rotations=merged["rotations"][alive],
        raw_opacities=merged["raw_opacities"][alive],
        colors=merged["colors"][alive],
        extent=scene.extent,
    )
    return out, source_rows[alive]


# --- checkpoint format -------------------------------------------------------

_CKPT_ARRAYS = (
    "positions",
    "log_scales",
    "rotations",
    "raw_opacities",
    "colors",
    "grad_accum_sum",
    "grad_accum_count",
)


def _atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(scene: GaussianScene, iteration: int, path: str) -> None:
    """Write magic line, JSON manifest line, then raw little-endian arrays.

    Byte-for-byte deterministic for identical scenes: sorted JSON keys, fixed
    array order, C-contiguous <f8 payloads.
    """
    manifest = {
        "arrays": [
            {"name": name, "shape": list(np.shape(getattr(scene, name)))} for name in _CKPT_ARRAYS
        ],
        "extent": scene.extent,
        "iteration": int(iteration),
    }
    blob = bytearray()
    blob += (CHECKPOINT_MAGIC + "\n").encode("ascii")
    blob += (json.dumps(manifest, sort_keys=True) + "\n").encode("ascii")
    for name in _CKPT_ARRAYS:
        arr = np.ascontiguousarray(getattr(scene, name), dtype="<f8")
        blob += arr.tobytes()
    _atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path: str) -> tuple[GaussianScene, int]:
    with open(path, "rb") as handle:
        magic = handle.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint (magic {magic!r})")
        try:
            manifest = json.loads(handle.readline().decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: bad checkpoint manifest: {exc}") from exc
        arrays = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(count * 8)
            if len(raw) != count * 8:
                raise ParseError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    missing = [name for name in _CKPT_ARRAYS if name not in arrays]
    if missing:
        raise ParseError(f"{path}: checkpoint missing arrays {missing}")
    scene = GaussianScene(extent=float(manifest["extent"]), **{n: arrays[n] for n in _CKPT_ARRAYS})
    return scene, int(manifest["iteration"])
