"""Procedural ground-truth oracle: random scenes and motion-blurred datasets.

Everything is deterministic given the spec seed.  Blurry observations are
dense trajectory averages (n_oracle samples, odd so the exact mid-exposure
pose is one of them); sharp references are single renders at u = 0.5.  The
initial trajectories handed to the optimizer are the ground-truth knots
perturbed by exact-magnitude, random-direction twists, and the initial
point cloud is a noisy subsample of the Gaussian centers — stand-ins for a
real sparse-reconstruction initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blur import BlurConfig, synthesize_blur
from .dataio import Dataset
from .errors import DomainError, EmptyCloud
from .lie import KNOTS_PER_KIND, Pose, Rotation, TrajectorySpline, se3_exp
from .projection import Intrinsics
from .rasterizer import render_forward
from .scene import GaussianScene, logit

# Camera orbit: radius and focal length (as a fraction of image width) chosen
# so every look-at camera keeps well over 90% of uniformly drawn centers
# inside its image bounds.
ORBIT_RADIUS_FACTOR = 1.7
FOCAL_WIDTH_FACTOR = 0.85
ELEVATION_BASE = 0.3  # radians above the orbit plane


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic scene + blurred-dataset pair."""

    seed: int = 0
    gaussian_count: int = 300
    extent: float = 2.0
    num_images: int = 12
    image_size: int = 64
    blur_rot_deg: float = 2.0  # exposure-spanning rotation, degrees
    blur_trans_frac: float = 0.025  # knot-to-knot translation / extent
    n_oracle: int = 51
    kind: str = "linear"
    accel: float = 0.0  # cubic only: velocity grows by +-accel/2 across the exposure
    init_rot_deg: float = 0.5  # perturbation applied to each knot
    init_trans_frac: float = 0.01
    cloud_keep_frac: float = 0.3
    cloud_noise_frac: float = 0.005

    def __post_init__(self) -> None:
        if self.gaussian_count < 0:
            raise DomainError(f"gaussian_count must be >= 0, got {self.gaussian_count}")
        if self.extent <= 0:
            raise DomainError(f"extent must be positive, got {self.extent}")
        if self.num_images < 1:
            raise DomainError(f"num_images must be >= 1, got {self.num_images}")
        if self.image_size < 1:
            raise DomainError(f"image_size must be >= 1, got {self.image_size}")
        if self.n_oracle < 5 or self.n_oracle % 2 == 0:
            raise DomainError(
                f"n_oracle must be odd and >= 5, got {self.n_oracle}"
            )
        if self.kind not in KNOTS_PER_KIND:
            raise DomainError(f"unknown trajectory kind {self.kind!r}")
        if not 0.0 <= self.accel < 1.0:
            raise DomainError(f"accel must be in [0, 1), got {self.accel}")
        if not 0.0 < self.cloud_keep_frac <= 1.0:
            raise DomainError(
                f"cloud_keep_frac must be in (0, 1], got {self.cloud_keep_frac}"
            )


def generate_scene(spec: SynthSpec) -> GaussianScene:
    """Seeded random Gaussians filling the extent cube."""
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.gaussian_count
    half = 0.5 * spec.extent
    positions = rng.uniform(-half, half, (n, 3))
    radii = rng.uniform(0.005 * spec.extent, 0.03 * spec.extent, (n, 3))
    rotations = rng.normal(0.0, 1.0, (n, 4))
    opacities = rng.uniform(0.3, 0.95, n)
    colors = rng.uniform(0.05, 0.95, (n, 3))
    return GaussianScene(
        positions=positions,
        log_scales=np.log(radii),
        rotations=rotations,
        raw_opacities=logit(opacities),
        colors=colors,
        extent=spec.extent,
    )


def look_at(camera_pos: np.ndarray, target: np.ndarray, up: np.ndarray) -> Pose:
    """World-to-camera pose with +z toward the target, +x right, +y down."""
    forward = target - camera_pos
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DomainError("camera position coincides with the look-at target")
    z_c = forward / norm
    if abs(np.dot(z_c, up)) > 0.99 * np.linalg.norm(up):
        up = np.array([1.0, 0.0, 0.0])
    x_c = np.cross(z_c, up)
    x_c = x_c / np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    rot = Rotation.from_matrix(np.stack([x_c, y_c, z_c]))
    return Pose(rot, -rot.apply(camera_pos))


def _orbit_pose(spec: SynthSpec, index: int, rng: np.random.Generator) -> Pose:
    radius = ORBIT_RADIUS_FACTOR * spec.extent * rng.uniform(0.95, 1.05)
    azimuth = 2.0 * np.pi * index / spec.num_images + rng.uniform(-0.3, 0.3) / spec.num_images
    elevation = ELEVATION_BASE + rng.uniform(-0.1, 0.1)
    pos = radius * np.array(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.sin(elevation),
            np.cos(elevation) * np.sin(azimuth),
        ]
    )
    return look_at(pos, np.zeros(3), np.array([0.0, 1.0, 0.0]))


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(0.0, 1.0, 3)
    return v / np.linalg.norm(v)


def _severity_twist(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    rot = np.deg2rad(spec.blur_rot_deg) * _unit(rng)
    trans = spec.blur_trans_frac * spec.extent * _unit(rng)
    return np.concatenate([trans, rot])


def _gt_trajectory(spec: SynthSpec, mid: Pose, twist: np.ndarray) -> TrajectorySpline:
    """Trajectory whose exposure spans exactly ``twist`` with mid pose at u=0.5.

    Cubic knots share one screw direction with spacings (1-a, 1, 1+a), so the
    path accelerates along the screw while the u=0.5 pose and the total span
    stay identical to the linear case.
    """
    if spec.kind == "linear":
        start = mid @ se3_exp(-0.5 * twist)
        end = mid @ se3_exp(0.5 * twist)
        return TrajectorySpline("linear", [start, end])
    a = spec.accel
    # screw coordinate of u: g(u) = (1+u) + a(3u^2-3u-5)/6; g(0.5) below
    mid_coord = 1.5 - 5.75 * a / 6.0
    k1 = mid @ se3_exp(-mid_coord * twist)
    k2 = k1 @ se3_exp((1.0 - a) * twist)
    k3 = k2 @ se3_exp(twist)
    k4 = k3 @ se3_exp((1.0 + a) * twist)
    return TrajectorySpline("cubic", [k1, k2, k3, k4])


def _perturbed(
    spec: SynthSpec, traj: TrajectorySpline, image_id: int
) -> TrajectorySpline:
    """GT knots moved by exact-magnitude random-direction camera-frame twists."""
    knots = []
    for j, knot in enumerate(traj.knots):
        rng = np.random.default_rng([spec.seed, 3, image_id, j])
        eps = np.concatenate(
            [
                spec.init_trans_frac * spec.extent * _unit(rng),
                np.deg2rad(spec.init_rot_deg) * _unit(rng),
            ]
        )
        knots.append(se3_exp(eps) @ knot)
    return TrajectorySpline(traj.kind, knots)


def generate_dataset(scene: GaussianScene, spec: SynthSpec) -> Dataset:
    """Blurry observations, GT and perturbed trajectories, noisy init cloud."""
    if scene.num_gaussians == 0:
        raise EmptyCloud("cannot build a dataset from an empty scene")
    size = spec.image_size
    intr = Intrinsics(
        fx=FOCAL_WIDTH_FACTOR * size,
        fy=FOCAL_WIDTH_FACTOR * size,
        cx=0.5 * size,
        cy=0.5 * size,
        width=size,
        height=size,
    )
    background = np.zeros(3)
    orbit_rng = np.random.default_rng([spec.seed, 1])

    images: dict[int, np.ndarray] = {}
    sharp: dict[int, np.ndarray] = {}
    gt_trajs: dict[int, TrajectorySpline] = {}
    init_trajs: dict[int, TrajectorySpline] = {}
    intrinsics: dict[int, Intrinsics] = {}
    for k in range(spec.num_images):
        mid = _orbit_pose(spec, k, orbit_rng)
        twist = _severity_twist(spec, np.random.default_rng([spec.seed, 2, k]))
        gt = _gt_trajectory(spec, mid, twist)
        blur, _ = synthesize_blur(scene, gt, intr, BlurConfig(spec.n_oracle), background)
        sharp_img, _ = render_forward(scene, gt.pose_at(0.5), intr, background)
        images[k] = blur.pixels
        sharp[k] = sharp_img.pixels
        gt_trajs[k] = gt
        init_trajs[k] = _perturbed(spec, gt, k)
        intrinsics[k] = intr

    cloud_rng = np.random.default_rng([spec.seed, 4])
    m = max(1, int(round(spec.cloud_keep_frac * scene.num_gaussians)))
    keep = np.sort(cloud_rng.choice(scene.num_gaussians, size=m, replace=False))
    noise = cloud_rng.normal(0.0, spec.cloud_noise_frac * spec.extent, (m, 3))
    return Dataset(
        images=images,
        intrinsics=intrinsics,
        trajectories=init_trajs,
        cloud_positions=scene.positions[keep] + noise,
        cloud_colors=scene.colors[keep].copy(),
        gt_trajectories=gt_trajs,
        sharp=sharp,
    )


def frustum_fraction(scene: GaussianScene, pose: Pose, intr: Intrinsics) -> float:
    """Fraction of Gaussian centers strictly inside the image bounds."""
    cam = pose.apply(scene.positions)
    z = cam[:, 2]
    valid = z > 0.0
    px = np.full(len(cam), -1.0)
    py = np.full(len(cam), -1.0)
    px[valid] = intr.fx * cam[valid, 0] / z[valid] + intr.cx
    py[valid] = intr.fy * cam[valid, 1] / z[valid] + intr.cy
    inside = valid & (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height)
    return float(np.mean(inside))
