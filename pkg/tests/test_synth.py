"""Procedural scene/dataset oracle: determinism, geometry, and magnitudes."""

import numpy as np
import pytest

from blursplat.errors import DomainError, EmptyCloud
from blursplat.lie import se3_log
from blursplat.rasterizer import render_forward
from blursplat.synth import (
    SynthSpec,
    frustum_fraction,
    generate_dataset,
    generate_scene,
)

SMALL = dict(gaussian_count=60, num_images=3, image_size=32, n_oracle=11)


def test_spec_validation():
    with pytest.raises(DomainError):
        SynthSpec(n_oracle=10)  # even
    with pytest.raises(DomainError):
        SynthSpec(n_oracle=3)
    with pytest.raises(DomainError):
        SynthSpec(kind="quadratic")
    with pytest.raises(DomainError):
        SynthSpec(accel=1.0)
    with pytest.raises(DomainError):
        SynthSpec(extent=0.0)
    with pytest.raises(DomainError):
        SynthSpec(num_images=0)
    with pytest.raises(DomainError):
        SynthSpec(cloud_keep_frac=0.0)
    with pytest.raises(DomainError):
        SynthSpec(gaussian_count=-1)


def test_generate_scene_ranges_and_determinism():
    spec = SynthSpec(seed=5, gaussian_count=200, extent=4.0)
    scene = generate_scene(spec)
    assert scene.num_gaussians == 200
    half = 0.5 * spec.extent
    assert (np.abs(scene.positions) <= half).all()
    radii = np.exp(scene.log_scales)
    assert (radii >= 0.005 * spec.extent - 1e-12).all()
    assert (radii <= 0.03 * spec.extent + 1e-12).all()
    ops = scene.activated_opacities()
    assert (ops >= 0.3 - 1e-9).all() and (ops <= 0.95 + 1e-9).all()
    assert (scene.colors >= 0.05).all() and (scene.colors <= 0.95).all()

    again = generate_scene(spec)
    assert np.array_equal(scene.positions, again.positions)
    assert np.array_equal(scene.colors, again.colors)
    other = generate_scene(SynthSpec(seed=6, gaussian_count=200, extent=4.0))
    assert not np.array_equal(scene.positions, other.positions)


def test_dataset_is_deterministic_per_seed():
    spec = SynthSpec(seed=2, **SMALL)
    scene = generate_scene(spec)
    a = generate_dataset(scene, spec)
    b = generate_dataset(scene, spec)
    for i in a.images:
        assert np.array_equal(a.images[i], b.images[i])
        for ka, kb in zip(a.gt_trajectories[i].knots, b.gt_trajectories[i].knots):
            assert np.array_equal(ka.matrix(), kb.matrix())
    assert np.array_equal(a.cloud_positions, b.cloud_positions)


def test_cameras_keep_scene_in_frustum():
    spec = SynthSpec(seed=3, gaussian_count=300, num_images=8, image_size=32,
                     n_oracle=5)
    scene = generate_scene(spec)
    ds = generate_dataset(scene, spec)
    for i in ds.images:
        mid = ds.gt_trajectories[i].pose_at(0.5)
        assert frustum_fraction(scene, mid, ds.intrinsics[i]) >= 0.9


def test_exposure_span_magnitudes_match_severity():
    spec = SynthSpec(seed=4, blur_rot_deg=1.7, blur_trans_frac=0.03, extent=2.0,
                     **SMALL)
    scene = generate_scene(spec)
    ds = generate_dataset(scene, spec)
    for i, gt in ds.gt_trajectories.items():
        span = se3_log(gt.pose_at(0.0).inverse() @ gt.pose_at(1.0))
        assert abs(np.linalg.norm(span[3:]) - np.deg2rad(1.7)) < 1e-9
        assert abs(np.linalg.norm(span[:3]) - 0.03 * 2.0) < 1e-9


def test_init_trajectories_are_exact_magnitude_perturbations():
    spec = SynthSpec(seed=8, extent=2.0, **SMALL)
    scene = generate_scene(spec)
    ds = generate_dataset(scene, spec)
    for i in ds.images:
        for init, gt in zip(ds.trajectories[i].knots, ds.gt_trajectories[i].knots):
            eps = se3_log(init @ gt.inverse())
            assert abs(np.linalg.norm(eps[:3]) - 0.01 * 2.0) < 1e-9
            assert abs(np.linalg.norm(eps[3:]) - np.deg2rad(0.5)) < 1e-9


def test_sharp_references_are_mid_exposure_renders():
    spec = SynthSpec(seed=9, **SMALL)
    scene = generate_scene(spec)
    ds = generate_dataset(scene, spec)
    for i in ds.images:
        mid, _ = render_forward(
            scene, ds.gt_trajectories[i].pose_at(0.5), ds.intrinsics[i], np.zeros(3)
        )
        assert np.array_equal(ds.sharp[i], mid.pixels)
        assert np.abs(ds.images[i] - ds.sharp[i]).mean() > 1e-4  # blur is visible


def test_cubic_with_zero_accel_follows_the_linear_path():
    lin_spec = SynthSpec(seed=11, kind="linear", **SMALL)
    cub_spec = SynthSpec(seed=11, kind="cubic", accel=0.0, **SMALL)
    scene = generate_scene(lin_spec)
    lin = generate_dataset(scene, lin_spec)
    cub = generate_dataset(scene, cub_spec)
    for i in lin.images:
        assert cub.gt_trajectories[i].num_knots == 4
        for u in (0.0, 0.25, 0.5, 0.75, 1.0):
            a = lin.gt_trajectories[i].pose_at(u).matrix()
            b = cub.gt_trajectories[i].pose_at(u).matrix()
            assert np.allclose(a, b, atol=1e-9)
        assert np.allclose(lin.images[i], cub.images[i], atol=1e-9)


def test_accelerating_cubic_keeps_midpoint_and_span():
    base = SynthSpec(seed=12, kind="cubic", accel=0.0, **SMALL)
    accel = SynthSpec(seed=12, kind="cubic", accel=0.5, **SMALL)
    scene = generate_scene(base)
    a = generate_dataset(scene, base)
    b = generate_dataset(scene, accel)
    for i in a.images:
        # Same mid-exposure pose and same start-to-end span by construction;
        # the pacing along the screw (hence the absolute endpoints) differs.
        pa = a.gt_trajectories[i].pose_at(0.5).matrix()
        pb = b.gt_trajectories[i].pose_at(0.5).matrix()
        assert np.allclose(pa, pb, atol=1e-9)
        span_a = se3_log(a.gt_trajectories[i].pose_at(0.0).inverse()
                         @ a.gt_trajectories[i].pose_at(1.0))
        span_b = se3_log(b.gt_trajectories[i].pose_at(0.0).inverse()
                         @ b.gt_trajectories[i].pose_at(1.0))
        assert np.allclose(span_a, span_b, atol=1e-9)
        qa = a.gt_trajectories[i].pose_at(0.25).matrix()
        qb = b.gt_trajectories[i].pose_at(0.25).matrix()
        assert not np.allclose(qa, qb, atol=1e-6)


def test_point_cloud_is_noisy_subsample():
    spec = SynthSpec(seed=13, cloud_keep_frac=0.5, cloud_noise_frac=0.002,
                     extent=2.0, **SMALL)
    scene = generate_scene(spec)
    ds = generate_dataset(scene, spec)
    assert len(ds.cloud_positions) == 30
    # Every cloud color row is copied verbatim from some Gaussian.
    scene_colors = {tuple(c) for c in scene.colors}
    assert all(tuple(c) in scene_colors for c in ds.cloud_colors)
    # Positions sit within a few noise sigmas of their source Gaussian.
    for p in ds.cloud_positions:
        d = np.linalg.norm(scene.positions - p, axis=1).min()
        assert d < 6 * 0.002 * 2.0


def test_empty_scene_rejected():
    spec = SynthSpec(seed=1, gaussian_count=0)
    scene = generate_scene(spec)
    with pytest.raises(EmptyCloud):
        generate_dataset(scene, spec)
