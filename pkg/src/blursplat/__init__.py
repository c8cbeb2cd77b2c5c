"""Sharp 3D Gaussian scenes and camera motion from motion-blurred images.

The package is organized bottom-up: rigid-motion math (`lie`), the Gaussian
scene container (`scene`), camera projection (`projection`), the software
rasterizer with its hand-written backward pass (`rasterizer`), physical blur
synthesis by exposure-time averaging (`blur`), the joint Adam optimizer
(`optim`), image and trajectory metrics (`metrics`), a synthetic dataset
generator used as ground-truth oracle (`synth`), dataset/config/report I/O
(`dataio`), and the command line (`cli`).
"""

from .blur import BlurAux, BlurConfig, blur_backward, synthesize_blur, virtual_times
from .dataio import (
    Dataset,
    RunConfig,
    build_run_config,
    load_colmap_text,
    load_dataset,
    load_png,
    parse_config_text,
    read_trajectories,
    save_dataset,
    save_png,
    write_colmap_text,
    write_report,
    write_trajectories,
)
from .errors import (
    AngleNearPi,
    AuxMismatch,
    BlurSplatError,
    DegenerateGeometry,
    DomainError,
    EmptyCloud,
    IdMismatch,
    NonFiniteLoss,
    ParseError,
    ShapeMismatch,
    TooSmall,
    UnsupportedCameraModel,
)
from .lie import (
    KNOTS_PER_KIND,
    Pose,
    Rotation,
    TrajectorySpline,
    interpolate_cubic,
    interpolate_linear,
    left_jacobian,
    linear_to_cubic,
    pose_jacobian_wrt_knots,
    se3_exp,
    se3_log,
)
from .metrics import Trajectory, ate, psnr, ssim, ssim_and_grad, trajectory_from_splines, umeyama_alignment
from .optim import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    compute_loss,
    exp_decay,
    pose_mode_basis,
    train,
)
from .projection import Intrinsics, project_gaussian, project_scene, projection_jacobian
from .rasterizer import GradientBundle, ImageBuffer, RenderAux, render_backward, render_forward
from .scene import (
    DensifyConfig,
    GaussianScene,
    densify_and_prune,
    init_from_pointcloud,
    load_checkpoint,
    save_checkpoint,
)
from .synth import SynthSpec, frustum_fraction, generate_dataset, generate_scene, look_at

__all__ = [
    "KNOTS_PER_KIND",
    "AdamState",
    "AngleNearPi",
    "AuxMismatch",
    "BlurAux",
    "BlurConfig",
    "BlurSplatError",
    "Dataset",
    "DegenerateGeometry",
    "DensifyConfig",
    "DomainError",
    "EmptyCloud",
    "GaussianScene",
    "GradientBundle",
    "IdMismatch",
    "ImageBuffer",
    "Intrinsics",
    "NonFiniteLoss",
    "ParseError",
    "Pose",
    "RenderAux",
    "Rotation",
    "RunConfig",
    "ShapeMismatch",
    "SynthSpec",
    "TooSmall",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "TrajectorySpline",
    "UnsupportedCameraModel",
    "adam_step",
    "ate",
    "blur_backward",
    "build_run_config",
    "compute_loss",
    "densify_and_prune",
    "exp_decay",
    "frustum_fraction",
    "generate_dataset",
    "generate_scene",
    "init_from_pointcloud",
    "interpolate_cubic",
    "interpolate_linear",
    "left_jacobian",
    "linear_to_cubic",
    "load_checkpoint",
    "load_colmap_text",
    "load_dataset",
    "load_png",
    "look_at",
    "parse_config_text",
    "pose_jacobian_wrt_knots",
    "pose_mode_basis",
    "project_gaussian",
    "project_scene",
    "projection_jacobian",
    "psnr",
    "read_trajectories",
    "render_backward",
    "render_forward",
    "save_checkpoint",
    "save_dataset",
    "save_png",
    "se3_exp",
    "se3_log",
    "ssim",
    "ssim_and_grad",
    "synthesize_blur",
    "train",
    "trajectory_from_splines",
    "umeyama_alignment",
    "virtual_times",
    "write_colmap_text",
    "write_report",
    "write_trajectories",
]
