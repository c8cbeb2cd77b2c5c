"""Joint optimization of a Gaussian scene and per-image motion trajectories.

The training loop alternates over images: render the trajectory-averaged
(blurry) prediction, score it against the observed image with an L1 + DSSIM
loss, backpropagate through the averaging and the rasterizer, and take Adam
steps on the five scene tensors and on each image's knot twists.  Pose
updates are left-multiplicative: the optimizer steps the per-knot twist
deltas away from zero, then folds them back into the knots so the Jacobians
are always evaluated at the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blur import BlurConfig, blur_backward, synthesize_blur
from .errors import DomainError, NonFiniteLoss, ShapeMismatch
from .lie import TrajectorySpline
from .metrics import ssim_and_grad
from .projection import Intrinsics
from .scene import DensifyConfig, GaussianScene, densify_and_prune

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameter and state."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeMismatch(
            f"adam_step shapes differ: param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape}"
        )
    step = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_param, AdamState(m=m, v=v, step=step)


def exp_decay(lr_init: float, lr_final: float, t: int, total: int) -> float:
    """Exponential interpolation from lr_init (t=0) to lr_final (t=total)."""
    if total <= 0:
        return lr_final
    frac = min(max(t / total, 0.0), 1.0)
    return lr_init * (lr_final / lr_init) ** frac


def compute_loss(
    pred: np.ndarray,
    target: np.ndarray,
    lambda_dssim: float,
) -> tuple[float, np.ndarray]:
    """(1 - lam) * L1 + lam * (1 - SSIM) and its gradient w.r.t. pred.

    When the loss is exactly zero (prediction matches the target bitwise),
    the returned gradient is exactly zero as well: both terms sit at their
    global minimum, so any non-zero value would be pure rounding noise, and
    Adam's scale invariance would amplify it into real parameter motion.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} != target shape {target.shape}")
    if not 0.0 <= lambda_dssim <= 1.0:
        raise DomainError(f"lambda_dssim must be in [0, 1], got {lambda_dssim}")
    diff = pred - target
    l1 = float(np.mean(np.abs(diff)))
    ssim_value, ssim_grad = ssim_and_grad(pred, target)
    loss = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim_value)
    if loss == 0.0:
        return 0.0, np.zeros_like(pred)
    d_pred = (1.0 - lambda_dssim) * np.sign(diff) / diff.size - lambda_dssim * ssim_grad
    return loss, d_pred


@dataclass
class TrainConfig:
    """Hyper-parameters for joint scene + trajectory training."""

    total_iters: int = 7000
    n_virtual: int = 10
    lambda_dssim: float = 0.2
    lr_positions_init: float = 1.6e-4  # multiplied by scene extent
    lr_positions_final: float = 1.6e-6
    lr_colors: float = 2.5e-3
    lr_opacities: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_pose_init: float = 1e-3
    lr_pose_final: float = 1e-5
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop_frac: float = 0.6
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    freeze_scene: bool = False
    freeze_poses: bool = False
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.total_iters < 1:
            raise DomainError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.n_virtual < 2:
            raise DomainError(f"n_virtual must be >= 2, got {self.n_virtual}")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise DomainError(f"lambda_dssim must be in [0, 1], got {self.lambda_dssim}")


@dataclass
class TrainResult:
    scene: GaussianScene
    trajectories: dict[int, TrajectorySpline]
    history: list[tuple[int, float]]
    final_iteration: int


def pose_mode_basis(num_knots: int) -> np.ndarray:
    """Orthonormal recombination of knot twists used for pose Adam steps.

    The first mode is the common motion of all knots (the mid-exposure
    pose), the rest are differential modes (the blur span and its shape).
    Stepping Adam in this basis instead of per knot matters: the common
    mode receives a much larger gradient than the span modes, and Adam's
    per-coordinate normalization would otherwise let the dominant mode set
    the pace while the span crawls.  The trainer feeds Adam the unit
    direction of each mode row, so the learning-rate schedule, not the raw
    gradient magnitude, sets the step size.
    """
    if num_knots == 2:
        return np.array([[1.0, 1.0], [-1.0, 1.0]]) / np.sqrt(2.0)
    if num_knots == 4:
        return np.array(
            [
                [0.5, 0.5, 0.5, 0.5],
                [-0.5, -0.5, 0.5, 0.5],
                [-1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0), 0.0, 0.0],
                [0.0, 0.0, -1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)],
            ]
        )
    raise DomainError(f"no pose mode basis for {num_knots} knots")


@dataclass
class _SceneStates:
    positions: AdamState
    log_scales: AdamState
    rotations: AdamState
    raw_opacities: AdamState
    colors: AdamState

    @classmethod
    def for_scene(cls, scene: GaussianScene) -> "_SceneStates":
        n = scene.num_gaussians
        return cls(
            positions=AdamState.zeros((n, 3)),
            log_scales=AdamState.zeros((n, 3)),
            rotations=AdamState.zeros((n, 4)),
            raw_opacities=AdamState.zeros((n,)),
            colors=AdamState.zeros((n, 3)),
        )

    def remap(self, source_rows: np.ndarray) -> "_SceneStates":
        """Carry moments to a densified scene; fresh rows start at zero."""

        def take(state: AdamState) -> AdamState:
            shape = (len(source_rows),) + state.m.shape[1:]
            m = np.zeros(shape)
            v = np.zeros(shape)
            keep = source_rows >= 0
            m[keep] = state.m[source_rows[keep]]
            v[keep] = state.v[source_rows[keep]]
            return AdamState(m=m, v=v, step=state.step)

        return _SceneStates(
            positions=take(self.positions),
            log_scales=take(self.log_scales),
            rotations=take(self.rotations),
            raw_opacities=take(self.raw_opacities),
            colors=take(self.colors),
        )


def train(
    images: dict[int, np.ndarray],
    intrinsics: Intrinsics | dict[int, Intrinsics],
    init_scene: GaussianScene,
    init_trajectories: dict[int, TrajectorySpline],
    cfg: TrainConfig,
    log_fn=None,
) -> TrainResult:
    """Run the joint optimization and return the refined scene and poses.

    ``images`` maps image id to its observed (blurry) pixels; every id must
    have a matching initial trajectory.  ``intrinsics`` is either shared or
    a per-image mapping.  Image visiting order is a fresh seeded permutation
    per epoch, so runs with the same config are bit-for-bit reproducible.
    """
    ids = sorted(images)
    if not ids:
        raise DomainError("train needs at least one image")
    if set(ids) != set(init_trajectories):
        raise DomainError("image ids and trajectory ids differ")
    if isinstance(intrinsics, Intrinsics):
        intr_map = {i: intrinsics for i in ids}
    else:
        if set(ids) - set(intrinsics):
            raise DomainError("missing intrinsics for some image ids")
        intr_map = {i: intrinsics[i] for i in ids}
    for i in ids:
        img = np.asarray(images[i], dtype=float)
        intr = intr_map[i]
        if img.shape != (intr.height, intr.width, 3):
            raise ShapeMismatch(
                f"image {i} has shape {img.shape}, expected "
                f"{(intr.height, intr.width, 3)}"
            )

    scene = init_scene.copy()
    trajs = {i: init_trajectories[i].fold_deltas() for i in ids}
    scene_states = _SceneStates.for_scene(scene)
    pose_states = {i: AdamState.zeros((trajs[i].num_knots, 6)) for i in ids}
    background = np.asarray(cfg.background, dtype=float)
    blur_cfg = BlurConfig(n_virtual=cfg.n_virtual)
    densify_stop = int(cfg.densify_stop_frac * cfg.total_iters)

    history: list[tuple[int, float]] = []
    order: list[int] = []
    epoch = 0
    for it in range(1, cfg.total_iters + 1):
        if not order:
            rng = np.random.default_rng([cfg.seed, epoch])
            order = [ids[k] for k in rng.permutation(len(ids))]
            epoch += 1
        image_id = order.pop(0)
        traj = trajs[image_id]
        intr = intr_map[image_id]

        pred, aux = synthesize_blur(scene, traj, intr, blur_cfg, background)
        loss, d_pred = compute_loss(pred.pixels, images[image_id], cfg.lambda_dssim)
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became non-finite at iteration {it} on image {image_id}"
            )
        grads = blur_backward(scene, traj, intr, aux, d_pred)

        pose_lr = exp_decay(cfg.lr_pose_init, cfg.lr_pose_final, it, cfg.total_iters)
        if not cfg.freeze_poses:
            basis = pose_mode_basis(traj.num_knots)
            mode_grad = basis @ grads.d_knots
            # Normalize each mode row to unit length before Adam.  The raw
            # photometric gradient is spiky across iterations, which inflates
            # Adam's second moment and shrinks the effective step long before
            # the pose has converged; feeding directions instead lets the lr
            # schedule control the pace.  Zero rows stay exactly zero, so a
            # perfectly converged pose is a fixed point.
            norms = np.linalg.norm(mode_grad, axis=1, keepdims=True)
            mode_grad = np.divide(
                mode_grad, norms, out=np.zeros_like(mode_grad), where=norms > 0.0
            )
            mode_update, pose_states[image_id] = adam_step(
                np.zeros((traj.num_knots, 6)),
                mode_grad,
                pose_states[image_id],
                pose_lr,
            )
            deltas = basis.T @ mode_update
            trajs[image_id] = TrajectorySpline(
                traj.kind, list(traj.knots), deltas
            ).fold_deltas()

        if not cfg.freeze_scene:
            pos_lr = scene.extent * exp_decay(
                cfg.lr_positions_init, cfg.lr_positions_final, it, cfg.total_iters
            )
            scene.positions, scene_states.positions = adam_step(
                scene.positions, grads.d_positions, scene_states.positions, pos_lr
            )
            scene.log_scales, scene_states.log_scales = adam_step(
                scene.log_scales, grads.d_log_scales, scene_states.log_scales,
                cfg.lr_scales,
            )
            scene.rotations, scene_states.rotations = adam_step(
                scene.rotations, grads.d_rotations, scene_states.rotations,
                cfg.lr_rotations,
            )
            scene.raw_opacities, scene_states.raw_opacities = adam_step(
                scene.raw_opacities, grads.d_raw_opacities,
                scene_states.raw_opacities, cfg.lr_opacities,
            )
            scene.colors, scene_states.colors = adam_step(
                scene.colors, grads.d_colors, scene_states.colors, cfg.lr_colors
            )
            scene.grad_accum_sum += grads.screen_norm_sum
            scene.grad_accum_count += grads.screen_count
            if (
                cfg.densify_start <= it <= densify_stop
                and it % cfg.densify_interval == 0
            ):
                scene, source_rows = densify_and_prune(
                    scene, it, cfg.densify, cfg.n_virtual
                )
                scene_states = scene_states.remap(source_rows)

        history.append((it, loss))
        if log_fn is not None and (
            it == 1 or it == cfg.total_iters or it % cfg.log_every == 0
        ):
            log_fn(
                f"iter {it:5d}  loss {loss:.6f}  pose_lr {pose_lr:.3e}  "
                f"gaussians {scene.num_gaussians}"
            )

    return TrainResult(
        scene=scene,
        trajectories=trajs,
        history=history,
        final_iteration=cfg.total_iters,
    )
