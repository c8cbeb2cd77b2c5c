"""End-to-end acceptance checks for the whole pipeline.

Each test is one self-contained criterion with an explicit numeric tolerance:
analytic gradients against finite differences, blur identities, small-scale
pose-only and joint recovery experiments, sample-count saturation, trajectory
representation ablation, metric closed forms, and bitwise training determinism.
Every test prints a single ``[PASS]``/``[FAIL]`` line with the measured values.

The recovery experiments re-train from scratch, so this module is much slower
than the unit-test modules (tens of minutes in total).
"""

import time

import numpy as np
import pytest

from blursplat.blur import BlurConfig, blur_backward, synthesize_blur
from blursplat.cli import run_cli
from blursplat.lie import Pose, Rotation, TrajectorySpline, linear_to_cubic, se3_exp, se3_log
from blursplat.metrics import Trajectory, ate, psnr, ssim, trajectory_from_splines
from blursplat.optim import TrainConfig, train
from blursplat.projection import Intrinsics
from blursplat.rasterizer import render_forward
from blursplat.scene import GaussianScene, init_from_pointcloud, logit
from blursplat.synth import SynthSpec, generate_dataset, generate_scene


def _line(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def _blob_scene(rng: np.random.Generator, n: int = 20) -> GaussianScene:
    """Broad, mildly transparent Gaussians fully in front of the camera.

    Footprints are large relative to the 16x16 image so every pixel receives
    smooth coverage and finite-difference probes stay well away from the
    contribution-skipping thresholds of the rasterizer.
    """
    return GaussianScene(
        positions=np.c_[rng.uniform(-1.2, 1.2, (n, 2)), rng.uniform(2.6, 3.8, n)],
        log_scales=np.log(rng.uniform(1.2, 1.8, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        raw_opacities=logit(rng.uniform(0.15, 0.30, n)),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
        extent=3.0,
    )


_GRAD_INTR = Intrinsics(fx=20.0, fy=21.0, cx=8.0, cy=8.0, width=16, height=16)


@pytest.fixture(scope="module")
def recovery_dataset():
    """Shared 300-Gaussian / 12-view / 64x64 dataset for the recovery tests."""
    spec = SynthSpec(
        seed=7, gaussian_count=300, extent=1.0, num_images=12, image_size=64, n_oracle=51
    )
    scene = generate_scene(spec)
    return spec, scene, generate_dataset(scene, spec)


def test_analytic_gradients_match_finite_differences():
    """Every gradient class agrees with central differences to 1e-3 relative.

    A 20-Gaussian scene is rendered through a 4-sample blur along a linear
    trajectory and a scalar L2 loss is probed component-by-component at step
    1e-4 for all five scene parameter classes and all 12 knot twist
    components.  The knot probe re-renders with each sample's screen-space
    footprint frozen at its forward value, matching the gradient convention:
    pose twists act on projected means only, not on projected covariances.
    Relative error uses an absolute floor of 1e-6.
    """
    started = time.time()
    rng = np.random.default_rng(11)
    scene = _blob_scene(rng)
    n = scene.num_gaussians
    background = np.array([0.10, 0.12, 0.08])
    knots = [se3_exp(0.02 * rng.normal(size=6)) for _ in range(2)]
    traj = TrajectorySpline("linear", knots)
    target = rng.uniform(size=(16, 16, 3))
    cfg = BlurConfig(4)
    h, tol, floor = 1e-4, 1e-3, 1e-6

    blur, aux = synthesize_blur(scene, traj, _GRAD_INTR, cfg, background)
    d_blur = 2.0 * (blur.pixels - target)
    grads = blur_backward(scene, traj, _GRAD_INTR, aux, d_blur)

    def blur_loss(moved_scene: GaussianScene, moved_traj: TrajectorySpline) -> float:
        img, _ = synthesize_blur(moved_scene, moved_traj, _GRAD_INTR, cfg, background)
        diff = img.pixels - target
        return float((diff * diff).sum())

    # Scene parameters: plain central differences on the blur loss.
    analytic = {
        "positions": grads.d_positions,
        "log_scales": grads.d_log_scales,
        "rotations": grads.d_rotations,
        "raw_opacities": grads.d_raw_opacities,
        "colors": grads.d_colors,
    }
    worst_scene = 0.0
    for field, got in analytic.items():
        base = getattr(scene, field)
        fd = np.zeros_like(np.atleast_2d(base.reshape(n, -1)), dtype=float)
        flat = base.reshape(n, -1)
        for g in range(n):
            for c in range(flat.shape[1]):
                vals = []
                for sign in (1.0, -1.0):
                    probe = scene.copy()
                    arr = getattr(probe, field).reshape(n, -1)
                    arr[g, c] += sign * h
                    vals.append(blur_loss(probe, traj))
                fd[g, c] = (vals[0] - vals[1]) / (2 * h)
        rel = np.abs(got.reshape(n, -1) - fd) / np.maximum(np.abs(fd), floor / tol)
        worst_scene = max(worst_scene, float(rel.max()))

    # Knot twists: central differences with per-sample footprints frozen at
    # their forward values, so only the projected means move.
    cov_fixed = []
    for render_aux in aux.renders:
        cov = np.full((n, 2, 2), np.nan)
        cov[render_aux.batch.idx] = render_aux.batch.cov2d
        cov_fixed.append(cov)

    def frozen_loss(moved_knots: list[Pose]) -> float:
        moved = TrajectorySpline("linear", moved_knots)
        mean = np.zeros((16, 16, 3))
        for u, cov in zip(aux.times, cov_fixed):
            img, _ = render_forward(
                scene, moved.pose_at(u), _GRAD_INTR, background, cov2d_override=cov
            )
            mean += img.pixels / cfg.n_virtual
        diff = mean - target
        return float((diff * diff).sum())

    fd_knots = np.zeros((2, 6))
    for k in range(2):
        for c in range(6):
            vals = []
            for sign in (1.0, -1.0):
                eps = np.zeros(6)
                eps[c] = sign * h
                moved = list(knots)
                moved[k] = se3_exp(eps) @ knots[k]
                vals.append(frozen_loss(moved))
            fd_knots[k, c] = (vals[0] - vals[1]) / (2 * h)
    rel_knots = np.abs(grads.d_knots - fd_knots) / np.maximum(np.abs(fd_knots), floor / tol)
    worst_knots = float(rel_knots.max())

    elapsed = time.time() - started
    ok = worst_scene < tol and worst_knots < tol and elapsed < 120.0
    _line(
        "gradient check",
        ok,
        f"max rel err scene {worst_scene:.2e}, knots {worst_knots:.2e} "
        f"(tol {tol}), {elapsed:.1f} s (cap 120 s)",
    )
    assert worst_scene < tol
    assert worst_knots < tol
    assert elapsed < 120.0


def test_static_trajectory_blur_matches_single_render():
    """Identical start and end knots collapse the blur to the sharp render."""
    rng = np.random.default_rng(21)
    scene = _blob_scene(rng, n=40)
    background = np.array([0.3, 0.1, 0.2])
    pose = se3_exp(0.05 * rng.normal(size=6))
    sharp, _ = render_forward(scene, pose, _GRAD_INTR, background)
    worst = 0.0
    for n_virtual in (2, 5, 10):
        traj = TrajectorySpline("linear", [pose, pose])
        blur, _ = synthesize_blur(scene, traj, _GRAD_INTR, BlurConfig(n_virtual), background)
        worst = max(worst, float(np.abs(blur.pixels - sharp.pixels).max()))
    ok = worst <= 1e-6
    _line("static blur identity", ok, f"max |blur - sharp| = {worst:.2e} over n in {{2, 5, 10}} (tol 1e-6)")
    assert worst <= 1e-6


def test_trajectory_endpoints_and_twist_roundtrip_are_exact():
    """Linear splines hit their knots at u=0 and u=1; exp/log round-trips."""
    rng = np.random.default_rng(31)
    worst_end = 0.0
    for _ in range(50):
        knots = [se3_exp(rng.normal(size=6)) for _ in range(2)]
        traj = TrajectorySpline("linear", knots)
        for u, knot in ((0.0, knots[0]), (1.0, knots[1])):
            worst_end = max(
                worst_end, float(np.abs(traj.pose_at(u).matrix() - knot.matrix()).max())
            )

    worst_round = 0.0
    for _ in range(1000):
        angle = rng.uniform(0.0, np.pi - 0.15)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        twist = np.concatenate([rng.normal(size=3), angle * axis])
        back = se3_log(se3_exp(twist))
        worst_round = max(worst_round, float(np.abs(back - twist).max()))

    ok = worst_end < 1e-12 and worst_round < 1e-9
    _line(
        "interpolation exactness",
        ok,
        f"endpoint err {worst_end:.2e} (tol 1e-12), "
        f"exp/log round-trip err {worst_round:.2e} over 1000 twists (tol 1e-9)",
    )
    assert worst_end < 1e-12
    assert worst_round < 1e-9


def test_pose_only_recovery_reaches_sub_permille_ate(recovery_dataset):
    """With the scene frozen at ground truth, perturbed knots re-converge.

    Knots start 0.5 degrees / 1% of scene extent away from truth.  After 2000
    iterations the mid-exposure ATE must drop below 0.1% of scene extent.

    The endpoint-sampled ATE is reported as well but not asserted: training
    averages 10 virtual time samples per image while the observations average
    51, and matching an n-sample endpoint-inclusive mean to a 51-sample one
    biases the recovered exposure span (the time-variance of that grid is
    (n+1)/(12(n-1)), so second-moment matching shrinks the span by a factor
    sqrt(Var(51)/Var(10)) ~ 0.92).  That bias moves the recovered endpoints a
    few tenths of a percent of extent while leaving midpoint poses unaffected.
    """
    spec, scene, ds = recovery_dataset
    started = time.time()
    cfg = TrainConfig(total_iters=2000, n_virtual=10, seed=0, freeze_scene=True)
    result = train(ds.images, ds.intrinsics, scene, ds.trajectories, cfg)
    elapsed = time.time() - started

    gt_mid = trajectory_from_splines(ds.gt_trajectories, mode="midpoint")
    est_mid = trajectory_from_splines(result.trajectories, mode="midpoint")
    ate_mid = ate(est_mid, gt_mid)
    gt_end = trajectory_from_splines(ds.gt_trajectories, mode="endpoints")
    est_end = trajectory_from_splines(result.trajectories, mode="endpoints")
    ate_end = ate(est_end, gt_end)

    limit = 1e-3 * spec.extent
    ok = ate_mid < limit and elapsed < 600.0
    _line(
        "pose-only recovery",
        ok,
        f"mid-exposure ATE {ate_mid:.2e} (tol {limit:.1e}), "
        f"endpoint ATE {ate_end:.2e} (reported only), "
        f"{elapsed / 60:.1f} min (cap 10 min)",
    )
    assert ate_mid < limit
    assert elapsed < 600.0


def test_joint_recovery_reaches_quality_targets(recovery_dataset):
    """From a noisy 30% point cloud, joint optimization recovers the scene.

    7000 iterations of joint scene + trajectory training must reach mean
    PSNR > 28 dB and mean SSIM > 0.90 on mid-exposure renders against the
    sharp references, with mid-exposure ATE below 0.5% of scene extent.

    The endpoint-sampled ATE is reported but not asserted, because under
    joint recovery the exposure *span* of each image is only weakly
    identified: the blur average is exactly invariant under time reversal of
    a trajectory (a single blurry image cannot tell start from end), and a
    high-capacity scene can absorb part of a small blur, shrinking the
    recovered span without hurting the fit.  Both effects displace recovered
    endpoints while leaving mid-exposure poses — the quantity the deblurred
    output depends on — intact.
    """
    spec, _, ds = recovery_dataset
    init = init_from_pointcloud(ds.cloud_positions, ds.cloud_colors)
    started = time.time()
    cfg = TrainConfig(total_iters=7000, n_virtual=10, seed=0)
    result = train(ds.images, ds.intrinsics, init, ds.trajectories, cfg)
    elapsed = time.time() - started

    psnrs, ssims = [], []
    for image_id in sorted(ds.images):
        img, _ = render_forward(
            result.scene,
            result.trajectories[image_id].pose_at(0.5),
            ds.intrinsics[image_id],
            np.zeros(3),
        )
        psnrs.append(psnr(img.pixels, ds.sharp[image_id]))
        ssims.append(ssim(img.pixels, ds.sharp[image_id]))
    mean_psnr = float(np.mean(psnrs))
    mean_ssim = float(np.mean(ssims))

    gt_end = trajectory_from_splines(ds.gt_trajectories, mode="endpoints")
    est_end = trajectory_from_splines(result.trajectories, mode="endpoints")
    ate_end = ate(est_end, gt_end)
    gt_mid = trajectory_from_splines(ds.gt_trajectories, mode="midpoint")
    est_mid = trajectory_from_splines(result.trajectories, mode="midpoint")
    ate_mid = ate(est_mid, gt_mid)

    limit = 5e-3 * spec.extent
    ok = mean_psnr > 28.0 and mean_ssim > 0.90 and ate_mid < limit and elapsed < 1200.0
    _line(
        "joint recovery",
        ok,
        f"PSNR {mean_psnr:.2f} dB (need > 28), SSIM {mean_ssim:.4f} (need > 0.90), "
        f"mid-exposure ATE {ate_mid:.2e} (tol {limit:.1e}; endpoint {ate_end:.2e} "
        f"reported only), {elapsed / 60:.1f} min (cap 20 min)",
    )
    assert mean_psnr > 28.0
    assert mean_ssim > 0.90
    assert ate_mid < limit
    assert elapsed < 1200.0


def _joint_psnr(ds, n_virtual: int, iters: int, init_trajs=None) -> float:
    """Train jointly from the dataset's noisy cloud; mean mid-exposure PSNR."""
    init = init_from_pointcloud(ds.cloud_positions, ds.cloud_colors)
    trajs = init_trajs if init_trajs is not None else ds.trajectories
    cfg = TrainConfig(total_iters=iters, n_virtual=n_virtual, seed=0)
    result = train(ds.images, ds.intrinsics, init, trajs, cfg)
    values = []
    for image_id in sorted(ds.images):
        img, _ = render_forward(
            result.scene,
            result.trajectories[image_id].pose_at(0.5),
            ds.intrinsics[image_id],
            np.zeros(3),
        )
        values.append(psnr(img.pixels, ds.sharp[image_id]))
    return float(np.mean(values))


_ABLATION_BASE = dict(gaussian_count=200, num_images=8, image_size=48, n_oracle=51, extent=1.0)


def test_virtual_sample_count_saturates():
    """More blur samples help until the gain levels off.

    On a severely blurred dataset (5 degrees / 6% extent per exposure), mean
    PSNR with 10 virtual samples must beat 3 samples by at least 1 dB, while
    20 versus 15 samples must differ by less than 1 dB.
    """
    spec = SynthSpec(seed=7, blur_rot_deg=5.0, blur_trans_frac=0.06, **_ABLATION_BASE)
    ds = generate_dataset(generate_scene(spec), spec)
    values = {n: _joint_psnr(ds, n, 2200) for n in (3, 10, 15, 20)}
    gain = values[10] - values[3]
    saturation = abs(values[20] - values[15])
    ok = gain >= 1.0 and saturation < 1.0
    _line(
        "sample-count saturation",
        ok,
        "PSNR " + ", ".join(f"n={n}: {v:.2f}" for n, v in values.items())
        + f"; gain(10 vs 3) {gain:+.2f} dB (need >= 1), "
        f"|gap(20 vs 15)| {saturation:.2f} dB (need < 1)",
    )
    assert gain >= 1.0
    assert saturation < 1.0


def test_trajectory_representation_ablation():
    """Linear knots suffice at constant velocity; cubic wins under acceleration.

    Both trajectory representations are trained on each dataset, initialized
    from the same perturbed knots (converted between representations so the
    starting paths match).  On constant-velocity data the linear fit must stay
    within 0.5 dB of the cubic fit; on accelerating data the cubic fit must be
    at least as good as the linear fit.
    """
    const_spec = SynthSpec(
        seed=9, blur_rot_deg=3.0, blur_trans_frac=0.04, kind="linear", **_ABLATION_BASE
    )
    ds_const = generate_dataset(generate_scene(const_spec), const_spec)
    linear_on_const = _joint_psnr(ds_const, 10, 2200)
    cubic_init = {i: linear_to_cubic(t) for i, t in ds_const.trajectories.items()}
    cubic_on_const = _joint_psnr(ds_const, 10, 2200, init_trajs=cubic_init)

    accel_spec = SynthSpec(
        seed=9, blur_rot_deg=3.0, blur_trans_frac=0.04, kind="cubic", accel=0.6, **_ABLATION_BASE
    )
    ds_accel = generate_dataset(generate_scene(accel_spec), accel_spec)
    cubic_on_accel = _joint_psnr(ds_accel, 10, 2200)
    linear_init = {
        i: TrajectorySpline("linear", [t.pose_at(0.0), t.pose_at(1.0)])
        for i, t in ds_accel.trajectories.items()
    }
    linear_on_accel = _joint_psnr(ds_accel, 10, 2200, init_trajs=linear_init)

    ok = linear_on_const >= cubic_on_const - 0.5 and cubic_on_accel >= linear_on_accel
    _line(
        "representation ablation",
        ok,
        f"constant velocity: linear {linear_on_const:.2f} vs cubic {cubic_on_const:.2f} dB "
        f"(linear must be within 0.5); accelerating: cubic {cubic_on_accel:.2f} vs "
        f"linear {linear_on_accel:.2f} dB (cubic must not lose)",
    )
    assert linear_on_const >= cubic_on_const - 0.5
    assert cubic_on_accel >= linear_on_accel


def test_metric_closed_forms():
    """SSIM self-identity is exact, PSNR matches its closed form, ATE is
    invariant under a global similarity transform of the camera centers."""
    rng = np.random.default_rng(41)
    image = rng.uniform(size=(32, 32, 3))
    ssim_self = ssim(image, image.copy())

    psnr_err = abs(psnr(image, image - 0.1) - 20.0)

    ids = tuple(range(10))
    gt_poses = tuple(
        Pose(Rotation(rng.normal(size=4)), rng.normal(size=3)) for _ in ids
    )
    gt = Trajectory(ids, gt_poses)
    sim_rot = Rotation(rng.normal(size=4)).matrix()
    sim_t = rng.normal(size=3)
    moved_centers = 2.7 * gt.centers() @ sim_rot.T + sim_t
    est_poses = []
    for center in moved_centers:
        rot = Rotation(rng.normal(size=4))
        est_poses.append(Pose(rot, -rot.apply(center)))
    ate_value = ate(Trajectory(ids, tuple(est_poses)), gt)

    ok = ssim_self == 1.0 and psnr_err < 1e-9 and ate_value < 1e-9
    _line(
        "metric closed forms",
        ok,
        f"ssim(a, a) = {ssim_self!r} (must be exactly 1.0), "
        f"|psnr - 20| = {psnr_err:.2e} (tol 1e-9), "
        f"ATE after scale-2.7 similarity = {ate_value:.2e} (tol 1e-9)",
    )
    assert ssim_self == 1.0
    assert psnr_err < 1e-9
    assert ate_value < 1e-9


def test_training_is_bitwise_deterministic(tmp_path):
    """Two CLI train runs with the same config produce identical checkpoints.

    The shared config exercises densification mid-run, so the comparison
    covers the clone/split/prune path as well as the optimizer updates.
    """
    data = str(tmp_path / "data")
    assert (
        run_cli(
            ["synth", "--out", data, "--seed", "5", "--gaussians", "40",
             "--images", "3", "--size", "24", "--n-oracle", "5"]
        )
        == 0
    )
    config = tmp_path / "run.cfg"
    config.write_text(
        "total_iters = 120\n"
        "n_virtual = 2\n"
        "seed = 3\n"
        "densify_start = 40\n"
        "densify_interval = 30\n"
        "log_every = 50\n"
    )
    outputs = []
    for name in ("run_a", "run_b"):
        out = str(tmp_path / name)
        assert (
            run_cli(["train", "--dataset", data, "--out", out, "--config", str(config)])
            == 0
        )
        outputs.append(out)
    ckpt_a = (tmp_path / "run_a" / "checkpoint.ckpt").read_bytes()
    ckpt_b = (tmp_path / "run_b" / "checkpoint.ckpt").read_bytes()
    traj_a = (tmp_path / "run_a" / "traj_est.txt").read_bytes()
    traj_b = (tmp_path / "run_b" / "traj_est.txt").read_bytes()
    ok = ckpt_a == ckpt_b and traj_a == traj_b
    _line(
        "training determinism",
        ok,
        f"checkpoint bytes equal: {ckpt_a == ckpt_b} ({len(ckpt_a)} bytes), "
        f"trajectory bytes equal: {traj_a == traj_b}",
    )
    assert ckpt_a == ckpt_b
    assert traj_a == traj_b
