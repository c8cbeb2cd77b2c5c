"""Pinhole projection: means, Jacobians, 2D covariances, culling."""

import numpy as np
import pytest

from blursplat.errors import DomainError
from blursplat.lie import Pose, Rotation
from blursplat.projection import (
    Intrinsics,
    project_gaussian,
    project_scene,
    projection_jacobian,
)
from oracles import random_pose
from blursplat.scene import GaussianScene

INTR = Intrinsics(fx=50.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)


def test_on_axis_point_hits_principal_point():
    got = project_gaussian([0.0, 0.0, 1.0], 0.01 * np.eye(3), Pose.identity(), INTR)
    assert got is not None
    assert np.allclose(got.mean2d, [32.0, 24.0], atol=1e-12)
    assert got.depth == 1.0


def test_isotropic_covariance_closed_form():
    intr = Intrinsics(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)
    s, z = 0.05, 2.5
    got = project_gaussian([0.0, 0.0, z], s**2 * np.eye(3), Pose.identity(), intr)
    expected = (40.0**2 * s**2 / z**2 + 0.3) * np.eye(2)
    assert np.allclose(got.cov2d, expected, rtol=1e-12)


def test_behind_camera_is_culled():
    assert project_gaussian([0.0, 0.0, -1.0], np.eye(3), Pose.identity(), INTR) is None


def test_near_plane_boundary():
    assert project_gaussian([0, 0, 0.009], 1e-6 * np.eye(3), Pose.identity(), INTR) is None
    assert project_gaussian([0, 0, 0.011], 1e-6 * np.eye(3), Pose.identity(), INTR) is not None


def test_guard_band_culling():
    # Width 64 with a 1.3x guard band keeps means within [-9.6, 73.6] pixels.
    z = 1.0
    for px, kept in ((-9.0, True), (-10.5, False), (73.0, True), (74.5, False)):
        x = (px - INTR.cx) / INTR.fx * z
        got = project_gaussian([x, 0.0, z], 1e-6 * np.eye(3), Pose.identity(), INTR)
        assert (got is not None) == kept, px


def test_jacobian_on_axis_form():
    jac = projection_jacobian([0.0, 0.0, 2.0], INTR)
    assert np.allclose(jac, [[25.0, 0.0, 0.0], [0.0, 30.0, 0.0]], atol=1e-14)


def test_jacobian_on_axis_depth_homogeneity():
    j1 = projection_jacobian([0.0, 0.0, 1.5], INTR)
    j2 = projection_jacobian([0.0, 0.0, 3.0], INTR)
    assert np.allclose(j2, 0.5 * j1, rtol=1e-14)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(40)
    h = 1e-6
    for _ in range(50):
        mu = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5.0)])
        jac = projection_jacobian(mu, INTR)
        fd = np.zeros((2, 3))
        for c in range(3):
            for sign in (1.0, -1.0):
                p = mu.copy()
                p[c] += sign * h
                x, y, z = p
                pix = np.array([INTR.fx * x / z + INTR.cx, INTR.fy * y / z + INTR.cy])
                fd[:, c] += sign * pix / (2 * h)
        assert np.abs(jac - fd).max() / max(1.0, np.abs(fd).max()) < 1e-6


def test_jacobian_rejects_nonpositive_depth():
    for z in (0.0, -0.5):
        with pytest.raises(DomainError):
            projection_jacobian([0.1, 0.2, z], INTR)


def test_projected_cov_psd_before_dilation():
    rng = np.random.default_rng(41)
    worst = 0.0
    for _ in range(1000):
        a = rng.normal(size=(3, 3))
        cov = a @ a.T  # PSD by construction
        mu = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 4.0)])
        got = project_gaussian(mu, cov, Pose.identity(), INTR)
        if got is None:
            continue
        eig = np.linalg.eigvalsh(got.cov2d - 0.3 * np.eye(2))
        scale = max(1.0, np.abs(got.cov2d).max())
        worst = min(worst, eig.min() / scale)
        assert np.abs(got.cov2d - got.cov2d.T).max() / scale < 1e-12
    assert worst >= -1e-10


def test_batch_mean2d_matches_pinhole_formula():
    rng = np.random.default_rng(42)
    n = 60
    scene = GaussianScene(
        positions=rng.uniform(-1, 1, (n, 3)),
        log_scales=np.full((n, 3), -3.0),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        raw_opacities=np.zeros(n),
        colors=rng.uniform(size=(n, 3)),
        extent=2.0,
    )
    pose = Pose(Rotation.from_axis_angle([0.2, -0.1, 0.3]), np.array([0.1, -0.2, 3.0]))
    batch = project_scene(scene, pose, INTR)
    assert len(batch) > 0
    rot = pose.rotation.matrix()
    for row, src in enumerate(batch.idx):
        mu_c = rot @ scene.positions[src] + pose.translation
        expected = [
            INTR.fx * mu_c[0] / mu_c[2] + INTR.cx,
            INTR.fy * mu_c[1] / mu_c[2] + INTR.cy,
        ]
        assert np.allclose(batch.mean2d[row], expected, rtol=1e-12)
        assert batch.depth[row] > 0.01


def test_conic_inverts_cov2d():
    rng = np.random.default_rng(43)
    n = 30
    scene = GaussianScene(
        positions=rng.uniform(-0.5, 0.5, (n, 3)),
        log_scales=rng.uniform(-4.0, -2.0, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        raw_opacities=np.zeros(n),
        colors=rng.uniform(size=(n, 3)),
        extent=1.0,
    )
    batch = project_scene(scene, random_pose(np.random.default_rng(44), 0.2, 0.3), INTR)
    for row in range(len(batch)):
        assert np.allclose(batch.conic[row] @ batch.cov2d[row], np.eye(2), atol=1e-10)


def test_intrinsics_validation():
    with pytest.raises(DomainError):
        Intrinsics(fx=0.0, fy=1.0, cx=0, cy=0, width=4, height=4)
    with pytest.raises(DomainError):
        Intrinsics(fx=1.0, fy=1.0, cx=0, cy=0, width=0, height=4)
