"""P3P, RANSAC PnP, and robust refinement."""

import numpy as np
import pytest

from conftest import random_pose
from panoloc.association import Correspondence2D3D
from panoloc.io import CameraIntrinsics, Pose
from panoloc.pose import (STATUS_FAILED, STATUS_OK, RansacConfig,
                          huber_objective, p3p_solve, pnp_ransac, refine_pose,
                          reproject_errors, residual_jacobian, skew, so3_exp)

K = CameraIntrinsics(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)


def _project(pose: Pose, pts: np.ndarray) -> np.ndarray:
    p = pts @ pose.rotation.T + pose.translation
    return np.stack([K.fx * p[:, 0] / p[:, 2] + K.cx,
                     K.fy * p[:, 1] / p[:, 2] + K.cy], axis=1)


def _camera_pose(rng, pts):
    """Random map->camera pose keeping all pts in front of the camera."""
    while True:
        pose = random_pose(rng, trans_scale=1.0)
        # push the scene forward so z > 0
        t = pose.translation.copy()
        p = pts @ pose.rotation.T + t
        t[2] += 5.0 - p[:, 2].min()
        pose = Pose(pose.rotation, t)
        p = pts @ pose.rotation.T + pose.translation
        if p[:, 2].min() > 0.5:
            return pose


# ---------------------------------------------------------------------------
# SO(3) helpers

def test_skew_cross_product():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 3), rng.normal(0, 1, 3)
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)


def test_so3_exp_properties():
    w = np.array([0.0, 0.0, np.pi / 2])
    R = so3_exp(w)
    np.testing.assert_allclose(R @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(so3_exp(np.zeros(3)), np.eye(3), atol=1e-15)


# ---------------------------------------------------------------------------
# P3P

def test_p3p_recovers_exact_pose():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2, 2, (3, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    sols = p3p_solve(pts, px, K)
    assert sols
    best = min(sols, key=lambda s: np.abs(s.rotation - pose.rotation).max())
    np.testing.assert_allclose(best.rotation, pose.rotation, atol=1e-6)
    np.testing.assert_allclose(best.translation, pose.translation, atol=1e-6)


def test_p3p_solutions_reproject_exactly():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pts = rng.uniform(-3, 3, (3, 3))
        pose = _camera_pose(rng, pts)
        px = _project(pose, pts)
        for s in p3p_solve(pts, px, K):
            err = reproject_errors(s.rotation, s.translation, pts, px, K)
            assert err.max() < 1e-6


def test_p3p_collinear_points_empty():
    pts = np.array([[0.0, 0, 5], [1.0, 1, 6], [2.0, 2, 7]])
    px = np.array([[320.0, 240], [350, 250], [380, 260]])
    assert p3p_solve(pts, px, K) == []


def test_p3p_coincident_points_empty():
    pts = np.array([[1.0, 1, 5], [1.0, 1, 5], [2.0, 0, 6]])
    px = np.array([[320.0, 240], [320, 240], [400, 240]])
    assert p3p_solve(pts, px, K) == []


def test_p3p_no_duplicate_solutions():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, (3, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    sols = p3p_solve(pts, px, K)
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            diff = max(np.abs(sols[i].rotation - sols[j].rotation).max(),
                       np.abs(sols[i].translation - sols[j].translation).max())
            assert diff > 1e-9


# ---------------------------------------------------------------------------
# Jacobian

def test_residual_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        point = rng.uniform(-2, 2, 3)
        pose = _camera_pose(rng, point[None, :])
        pixel = _project(pose, point[None, :])[0] + rng.normal(0, 2, 2)
        r0, J = residual_jacobian(pose.rotation, pose.translation, point, pixel, K)
        eps = 1e-7
        J_fd = np.zeros((2, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            R2 = so3_exp(d[:3]) @ pose.rotation
            t2 = so3_exp(d[:3]) @ pose.translation + d[3:]
            r2, _ = residual_jacobian(R2, t2, point, pixel, K)
            J_fd[:, k] = (r2 - r0) / eps
        worst = max(worst, np.abs(J - J_fd).max() / max(1.0, np.abs(J).max()))
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# Huber

def test_huber_objective_piecewise():
    # below delta: quadratic; above: linear
    assert huber_objective(np.array([1.0]), 2.0) == pytest.approx(0.5)
    assert huber_objective(np.array([2.0]), 2.0) == pytest.approx(2.0)
    assert huber_objective(np.array([10.0]), 2.0) == pytest.approx(2.0 * (10 - 1.0))
    assert huber_objective(np.array([1.0, 10.0]), 2.0) == pytest.approx(0.5 + 18.0)


def test_huber_objective_monotone_and_continuous():
    delta = 2.0
    es = np.linspace(0, 10, 1001)
    vals = np.array([huber_objective(np.array([e]), delta) for e in es])
    assert np.all(np.diff(vals) >= 0)
    assert np.abs(np.diff(vals)).max() < 0.05  # no jumps


# ---------------------------------------------------------------------------
# refinement

def _corrs(pts, px, covis=3):
    return [Correspondence2D3D((float(u), float(v)), i, p, covis, 0)
            for i, (p, (u, v)) in enumerate(zip(pts, px))]


def test_refine_stationary_at_optimum():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-3, 3, (30, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    out = refine_pose(pose, pts, px, K, RansacConfig())
    np.testing.assert_allclose(out.rotation, pose.rotation, atol=1e-9)
    np.testing.assert_allclose(out.translation, pose.translation, atol=1e-9)


def test_refine_converges_from_perturbation():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-3, 3, (40, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    R0 = so3_exp(np.array([0.02, -0.01, 0.015])) @ pose.rotation
    t0 = pose.translation + np.array([0.05, -0.03, 0.08])
    out = refine_pose(Pose(R0, t0), pts, px, K, RansacConfig(refine_iters=50))
    np.testing.assert_allclose(out.rotation, pose.rotation, atol=1e-6)
    np.testing.assert_allclose(out.translation, pose.translation, atol=1e-6)


def test_refine_objective_never_increases():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-3, 3, (25, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts) + rng.normal(0, 1.0, (25, 2))
    cfg = RansacConfig()
    init = Pose(so3_exp(np.array([0.03, 0.0, -0.02])) @ pose.rotation,
                pose.translation + 0.1)
    out = refine_pose(init, pts, px, K, cfg)

    def obj(p):
        e = reproject_errors(p.rotation, p.translation, pts, px, K)
        return huber_objective(np.where(np.isfinite(e), e, 1e9), cfg.huber_delta_px)

    assert obj(out) <= obj(init) + 1e-9


def test_refine_returns_orthonormal_rotation():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-3, 3, (20, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts) + rng.normal(0, 3.0, (20, 2))
    out = refine_pose(pose, pts, px, K, RansacConfig(refine_iters=30))
    np.testing.assert_allclose(out.rotation.T @ out.rotation, np.eye(3), atol=1e-12)


# ---------------------------------------------------------------------------
# RANSAC PnP

def test_pnp_exact_inliers():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-4, 4, (50, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    res = pnp_ransac(_corrs(pts, px), K, RansacConfig())
    assert res.status == STATUS_OK
    assert res.inlier_count == 50
    assert res.inlier_ratio == pytest.approx(1.0)
    np.testing.assert_allclose(res.pose.rotation, pose.rotation, atol=1e-6)
    np.testing.assert_allclose(res.pose.translation, pose.translation, atol=1e-6)
    assert res.mean_reproj_err_px < 1e-6


def test_pnp_with_outliers():
    rng = np.random.default_rng(10)
    pts = rng.uniform(-4, 4, (60, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    n_out = 24  # 40% outliers
    px[:n_out] += rng.uniform(60, 200, (n_out, 2)) * rng.choice([-1, 1], (n_out, 2))
    res = pnp_ransac(_corrs(pts, px), K, RansacConfig())
    assert res.status == STATUS_OK
    assert res.inlier_count >= 60 - n_out
    err = np.linalg.norm(res.pose.translation - pose.translation)
    assert err < 0.05


def test_pnp_too_few_correspondences():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-4, 4, (3, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts)
    res = pnp_ransac(_corrs(pts, px), K, RansacConfig())
    assert res.status == STATUS_FAILED
    assert "few" in res.reason


def test_pnp_all_outliers_fails():
    rng = np.random.default_rng(12)
    pts = rng.uniform(-4, 4, (20, 3))
    px = rng.uniform(0, 640, (20, 2))
    px[:, 1] *= 480.0 / 640.0
    res = pnp_ransac(_corrs(pts, px), K, RansacConfig(min_inliers=15))
    assert res.status == STATUS_FAILED


def test_pnp_deterministic_for_fixed_seed():
    rng = np.random.default_rng(13)
    pts = rng.uniform(-4, 4, (40, 3))
    pose = _camera_pose(rng, pts)
    px = _project(pose, pts) + rng.normal(0, 1.0, (40, 2))
    a = pnp_ransac(_corrs(pts, px), K, RansacConfig(seed=5))
    b = pnp_ransac(_corrs(pts, px), K, RansacConfig(seed=5))
    assert a.status == b.status == STATUS_OK
    np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
    np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
    assert a.inlier_count == b.inlier_count


def test_ransac_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(inlier_thresh_px=0.0)
    with pytest.raises(ValueError):
        RansacConfig(confidence=1.0)
