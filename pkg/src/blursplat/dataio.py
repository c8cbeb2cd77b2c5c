"""Dataset ingestion and serialization: COLMAP text, trajectories, PNG, config.

A dataset directory looks like::

    images/00000.png ...     observed (blurry) images, 8-bit PNG
    sharp/00000.png ...      optional ground-truth mid-exposure references
    cameras.txt              COLMAP camera intrinsics (PINHOLE / SIMPLE_PINHOLE)
    images.txt               COLMAP per-image poses (used when no traj_init.txt)
    points3D.txt             COLMAP sparse point cloud
    traj_init.txt            initial trajectory knots, one line per knot
    traj_gt.txt              optional ground-truth trajectory knots

Trajectory lines are ``image_id knot_index qw qx qy qz tx ty tz`` (world-to-
camera).  All text is written with repr-exact floats so a write/read round
trip preserves poses to machine precision.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import DomainError, ParseError, ShapeMismatch, UnsupportedCameraModel
from .lie import KNOTS_PER_KIND, Pose, Rotation, TrajectorySpline
from .optim import TrainConfig
from .projection import Intrinsics

_FLOAT_FMT = "%.17g"


@dataclass
class Dataset:
    """Everything training needs, plus optional ground truth for evaluation."""

    images: dict[int, np.ndarray]  # id -> (H, W, 3) in [0, 1]
    intrinsics: dict[int, Intrinsics]
    trajectories: dict[int, TrajectorySpline]  # initial estimates
    cloud_positions: np.ndarray  # (M, 3)
    cloud_colors: np.ndarray  # (M, 3) in [0, 1]
    gt_trajectories: dict[int, TrajectorySpline] | None = None
    sharp: dict[int, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if not self.images:
            raise DomainError("dataset needs at least one image")
        if set(self.images) != set(self.trajectories):
            raise DomainError("every image id needs exactly one trajectory")
        if set(self.images) != set(self.intrinsics):
            raise DomainError("every image id needs intrinsics")

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.images)


@dataclass
class RunConfig:
    """TrainConfig plus the paths and trajectory kind a CLI run needs."""

    dataset: str = ""
    output: str = ""
    traj_kind: str = "linear"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.traj_kind not in KNOTS_PER_KIND:
            raise DomainError(f"unknown trajectory kind {self.traj_kind!r}")


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".txt")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PNG


def save_png(path: str, pixels: np.ndarray) -> None:
    """Save a float image in [0, 1] as 8-bit RGB; clamps out-of-range values."""
    arr = np.asarray(pixels, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {arr.shape}")
    quantized = np.clip(np.round(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as handle:
            Image.fromarray(quantized, mode="RGB").save(handle, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_png(path: str) -> np.ndarray:
    """Load an 8-bit image to float RGB in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=float)
    return arr / 255.0


# ---------------------------------------------------------------------------
# COLMAP text


def _data_lines(path: str) -> Iterable[tuple[int, str]]:
    with open(path) as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _parse_cameras(path: str) -> dict[int, Intrinsics]:
    cameras: dict[int, Intrinsics] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width = int(parts[2])
            height = int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad camera line: {exc}") from exc
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(f"{path}:{lineno}: PINHOLE needs 4 params")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(f"{path}:{lineno}: SIMPLE_PINHOLE needs 3 params")
            f, cx, cy = params
            fx = fy = f
        else:
            raise UnsupportedCameraModel(f"{path}:{lineno}: camera model {model!r}")
        cameras[cam_id] = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    return cameras


def _parse_images(path: str) -> dict[int, tuple[Pose, int, str]]:
    """image id -> (world-to-camera pose, camera id, file name).

    COLMAP uses line pairs: the pose line, then the 2D-point observations
    line, which may be completely empty and is skipped.  Blank lines only
    count as observation lines, never as poses, so the pairing cannot drift.
    """
    images: dict[int, tuple[Pose, int, str]] = {}
    expecting_pose = True
    with open(path) as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if not expecting_pose:
                expecting_pose = True
                continue
            if not line:
                continue
            parts = line.split()
            try:
                image_id = int(parts[0])
                qw, qx, qy, qz, tx, ty, tz = (float(p) for p in parts[1:8])
                cam_id = int(parts[8])
                name = parts[9]
            except (IndexError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad image line: {exc}") from exc
            rot = Rotation(np.array([qw, qx, qy, qz]))
            images[image_id] = (Pose(rot, np.array([tx, ty, tz])), cam_id, name)
            expecting_pose = False
    return images


def _parse_points(path: str) -> tuple[np.ndarray, np.ndarray]:
    positions: list[list[float]] = []
    colors: list[list[float]] = []
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            positions.append([float(parts[1]), float(parts[2]), float(parts[3])])
            colors.append([int(parts[4]), int(parts[5]), int(parts[6])])
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad point line: {exc}") from exc
    if positions:
        return np.asarray(positions, dtype=float), np.asarray(colors, dtype=float) / 255.0
    return np.zeros((0, 3)), np.zeros((0, 3))


def load_colmap_text(
    directory: str,
) -> tuple[dict[int, tuple[Pose, int, str]], dict[int, Intrinsics], np.ndarray, np.ndarray]:
    """Parse cameras.txt / images.txt / points3D.txt from a directory."""
    cameras = _parse_cameras(os.path.join(directory, "cameras.txt"))
    images = _parse_images(os.path.join(directory, "images.txt"))
    positions, colors = _parse_points(os.path.join(directory, "points3D.txt"))
    for image_id, (_, cam_id, _) in images.items():
        if cam_id not in cameras:
            raise ParseError(f"image {image_id} references unknown camera {cam_id}")
    return images, cameras, positions, colors


def write_colmap_text(
    directory: str,
    images: dict[int, tuple[Pose, int, str]],
    cameras: dict[int, Intrinsics],
    positions: np.ndarray,
    colors: np.ndarray,
) -> None:
    cam_lines = ["# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]"]
    for cam_id in sorted(cameras):
        intr = cameras[cam_id]
        params = " ".join(_FLOAT_FMT % v for v in (intr.fx, intr.fy, intr.cx, intr.cy))
        cam_lines.append(f"{cam_id} PINHOLE {intr.width} {intr.height} {params}")
    atomic_write_text(os.path.join(directory, "cameras.txt"), "\n".join(cam_lines) + "\n")

    img_lines = [
        "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
        "#   followed by an (empty) observations line",
    ]
    for image_id in sorted(images):
        pose, cam_id, name = images[image_id]
        q = pose.rotation.wxyz
        t = pose.translation
        values = " ".join(_FLOAT_FMT % v for v in (*q, *t))
        img_lines.append(f"{image_id} {values} {cam_id} {name}")
        img_lines.append("")
    atomic_write_text(os.path.join(directory, "images.txt"), "\n".join(img_lines) + "\n")

    pt_lines = ["# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]"]
    rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(int)
    for k, (pos, col) in enumerate(zip(np.asarray(positions), rgb), start=1):
        coords = " ".join(_FLOAT_FMT % v for v in pos)
        pt_lines.append(f"{k} {coords} {col[0]} {col[1]} {col[2]} 0 ")
    atomic_write_text(os.path.join(directory, "points3D.txt"), "\n".join(pt_lines) + "\n")


# ---------------------------------------------------------------------------
# trajectory text


def write_trajectories(path: str, trajs: dict[int, TrajectorySpline]) -> None:
    lines = ["# image_id knot_index qw qx qy qz tx ty tz"]
    for image_id in sorted(trajs):
        for knot_index, knot in enumerate(trajs[image_id].effective_knots()):
            q = knot.rotation.wxyz
            t = knot.translation
            values = " ".join(_FLOAT_FMT % v for v in (*q, *t))
            lines.append(f"{image_id} {knot_index} {values}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trajectories(path: str) -> dict[int, TrajectorySpline]:
    knots: dict[int, dict[int, Pose]] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            image_id = int(parts[0])
            knot_index = int(parts[1])
            qw, qx, qy, qz, tx, ty, tz = (float(p) for p in parts[2:9])
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad trajectory line: {exc}") from exc
        rot = Rotation(np.array([qw, qx, qy, qz]))
        knots.setdefault(image_id, {})[knot_index] = Pose(rot, np.array([tx, ty, tz]))
    kinds = {n: k for k, n in KNOTS_PER_KIND.items()}
    trajs: dict[int, TrajectorySpline] = {}
    for image_id, by_index in knots.items():
        count = len(by_index)
        if sorted(by_index) != list(range(count)) or count not in kinds:
            raise ParseError(
                f"{path}: image {image_id} has knot indices {sorted(by_index)}; "
                f"expected 0..{{1 or 3}} contiguous"
            )
        trajs[image_id] = TrajectorySpline(kinds[count], [by_index[i] for i in range(count)])
    return trajs


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(directory: str, dataset: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    names: dict[int, str] = {}
    for image_id in dataset.image_ids:
        name = f"{image_id:05d}.png"
        names[image_id] = name
        save_png(os.path.join(directory, "images", name), dataset.images[image_id])
    if dataset.sharp is not None:
        for image_id, pixels in dataset.sharp.items():
            save_png(os.path.join(directory, "sharp", f"{image_id:05d}.png"), pixels)

    # COLMAP-style files: one camera per distinct intrinsics, the initial
    # mid-exposure pose as each image's single pose.
    cam_ids: dict[Intrinsics, int] = {}
    cameras: dict[int, Intrinsics] = {}
    images: dict[int, tuple[Pose, int, str]] = {}
    for image_id in dataset.image_ids:
        intr = dataset.intrinsics[image_id]
        if intr not in cam_ids:
            cam_ids[intr] = len(cam_ids) + 1
            cameras[cam_ids[intr]] = intr
        mid = dataset.trajectories[image_id].pose_at(0.5)
        images[image_id] = (mid, cam_ids[intr], names[image_id])
    write_colmap_text(directory, images, cameras, dataset.cloud_positions, dataset.cloud_colors)

    write_trajectories(os.path.join(directory, "traj_init.txt"), dataset.trajectories)
    if dataset.gt_trajectories is not None:
        write_trajectories(os.path.join(directory, "traj_gt.txt"), dataset.gt_trajectories)


def load_dataset(directory: str, traj_kind: str = "linear") -> Dataset:
    """Load a dataset directory.

    When traj_init.txt is present it defines the initial trajectories (and
    their kind); otherwise each image's single COLMAP pose is replicated
    across ``traj_kind`` knots (a static initial trajectory).
    """
    colmap_images, cameras, positions, colors = load_colmap_text(directory)
    images: dict[int, np.ndarray] = {}
    intrinsics: dict[int, Intrinsics] = {}
    for image_id, (_, cam_id, name) in colmap_images.items():
        images[image_id] = load_png(os.path.join(directory, "images", name))
        intrinsics[image_id] = cameras[cam_id]

    init_path = os.path.join(directory, "traj_init.txt")
    if os.path.exists(init_path):
        trajectories = read_trajectories(init_path)
        if set(trajectories) != set(images):
            raise ParseError(f"{init_path}: trajectory ids do not match image ids")
    else:
        if traj_kind not in KNOTS_PER_KIND:
            raise DomainError(f"unknown trajectory kind {traj_kind!r}")
        trajectories = {
            i: TrajectorySpline(traj_kind, [pose] * KNOTS_PER_KIND[traj_kind])
            for i, (pose, _, _) in colmap_images.items()
        }

    gt_path = os.path.join(directory, "traj_gt.txt")
    gt_trajectories = read_trajectories(gt_path) if os.path.exists(gt_path) else None

    sharp_dir = os.path.join(directory, "sharp")
    sharp: dict[int, np.ndarray] | None = None
    if os.path.isdir(sharp_dir):
        sharp = {}
        for image_id, (_, _, name) in colmap_images.items():
            path = os.path.join(sharp_dir, name)
            if os.path.exists(path):
                sharp[image_id] = load_png(path)
        if not sharp:
            sharp = None

    return Dataset(
        images=images,
        intrinsics=intrinsics,
        trajectories=trajectories,
        cloud_positions=positions,
        cloud_colors=colors,
        gt_trajectories=gt_trajectories,
        sharp=sharp,
    )


# ---------------------------------------------------------------------------
# run configuration


_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value: str):
    if key in ("dataset", "output", "traj_kind"):
        return value
    if key not in _TRAIN_FIELDS:
        raise ParseError(f"unknown config key {key!r}")
    kind = _TRAIN_FIELDS[key]
    if kind == "int" or key in ("total_iters", "n_virtual", "seed", "log_every",
                                "densify_interval", "densify_start"):
        return int(value)
    if kind == "bool" or key in ("freeze_scene", "freeze_poses"):
        lowered = value.lower()
        if lowered in _BOOL_TRUE:
            return True
        if lowered in _BOOL_FALSE:
            return False
        raise ParseError(f"config key {key!r} expects a boolean, got {value!r}")
    if key == "background":
        parts = [float(p) for p in value.replace(",", " ").split()]
        if len(parts) != 3:
            raise ParseError(f"config key 'background' expects 3 numbers, got {value!r}")
        return tuple(parts)
    return float(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse line-oriented ``key = value`` text into typed values."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            values[key] = _coerce(key, value)
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def build_run_config(
    file_values: dict[str, object], flag_values: dict[str, object]
) -> RunConfig:
    """Merge config sources with precedence flag > file > default."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    run_keys = {"dataset", "output", "traj_kind"}
    train_kwargs = {k: v for k, v in merged.items() if k in _TRAIN_FIELDS}
    run_kwargs = {k: v for k, v in merged.items() if k in run_keys}
    unknown = set(merged) - run_keys - set(_TRAIN_FIELDS)
    if unknown:
        raise ParseError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(train=TrainConfig(**train_kwargs), **run_kwargs)


# ---------------------------------------------------------------------------
# metrics report


def format_report(per_image: dict[int, dict[str, float]], aggregates: dict[str, float]) -> str:
    lines = []
    for image_id in sorted(per_image):
        for key in sorted(per_image[image_id]):
            lines.append(f"{key}/{image_id:05d} = {per_image[image_id][key]:.6f}")
    for key in sorted(aggregates):
        lines.append(f"{key} = {aggregates[key]:.6f}")
    return "\n".join(lines) + "\n"


def write_report(path: str, per_image: dict[int, dict[str, float]], aggregates: dict[str, float]) -> None:
    atomic_write_text(path, format_report(per_image, aggregates))
