"""6DoF pose estimation from 2D-3D correspondences.

P3P minimal solver (Grunert's quartic) inside a seeded RANSAC loop, with
Huber-robust damped Gauss-Newton refinement on the winning inlier set.
Estimated poses map world (map-frame) points into the camera frame:
p_cam = R @ p_world + t, camera x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from panoloc.association import Correspondence2D3D
from panoloc.io import CameraIntrinsics, Pose

STATUS_OK = "OK"
STATUS_FAILED = "FAILED"


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 2000
    inlier_thresh_px: float = 5.0
    confidence: float = 0.999
    min_inliers: int = 6
    huber_delta_px: float = 2.0
    refine_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.inlier_thresh_px <= 0 or self.huber_delta_px <= 0:
            raise ValueError("thresholds must be positive")
        if not (0 < self.confidence < 1):
            raise ValueError("confidence must be in (0, 1)")


@dataclass
class StageStats:
    candidates_tried: int = 0
    first_stage_matches: int = 0
    second_stage_matches: int = 0
    lifted: int = 0
    filtered: int = 0


@dataclass
class RelocalizationResult:
    status: str
    pose: Pose | None = None         # map -> camera
    inlier_count: int = 0
    inlier_ratio: float = 0.0
    mean_reproj_err_px: float = float("nan")
    reason: str = ""
    stats: StageStats = field(default_factory=StageStats)
    correspondences: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# small SO(3) helpers

def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = w / theta
    K = skew(k)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


# ---------------------------------------------------------------------------
# projection helpers (arrays of points)

def reproject_errors(R: np.ndarray, t: np.ndarray, pts: np.ndarray,
                     px: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pixel reprojection error per correspondence; +inf behind the camera."""
    p_cam = pts @ R.T + t
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p_cam[:, 0] / z + K.cx
        v = K.fy * p_cam[:, 1] / z + K.cy
    err = np.hypot(u - px[:, 0], v - px[:, 1])
    return np.where(z > 1e-9, err, np.inf)


def residual_jacobian(R: np.ndarray, t: np.ndarray, point: np.ndarray,
                      pixel: np.ndarray, K: CameraIntrinsics):
    """Reprojection residual (2,) and its Jacobian (2, 6) w.r.t. a left
    multiplicative SE(3) increment [rotation, translation]."""
    p = R @ point + t
    z = max(p[2], 1e-9)
    r = np.array([K.fx * p[0] / z + K.cx - pixel[0],
                  K.fy * p[1] / z + K.cy - pixel[1]])
    j_proj = np.array([[K.fx / z, 0.0, -K.fx * p[0] / (z * z)],
                       [0.0, K.fy / z, -K.fy * p[1] / (z * z)]])
    j_pose = np.concatenate([-skew(p), np.eye(3)], axis=1)
    return r, j_proj @ j_pose


# ---------------------------------------------------------------------------
# P3P (Grunert)

def p3p_solve(points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics,
              reproj_tol: float = 1e-6) -> list[Pose]:
    """All physically valid P3P solutions for three correspondences.

    points: (3, 3) world coordinates; pixels: (3, 2).  Each returned pose
    reprojects the three points within reproj_tol pixels.  Degenerate
    (collinear) triples yield an empty list."""
    points = np.asarray(points, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    if np.linalg.norm(np.cross(points[1] - points[0], points[2] - points[0])) < 1e-12:
        return []

    rays = np.stack([
        (pixels[:, 0] - K.cx) / K.fx,
        (pixels[:, 1] - K.cy) / K.fy,
        np.ones(3),
    ], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    a = np.linalg.norm(points[1] - points[2])
    b = np.linalg.norm(points[0] - points[2])
    c = np.linalg.norm(points[0] - points[1])
    if min(a, b, c) < 1e-12:
        return []
    ca = float(rays[1] @ rays[2])  # angle at rays to P2, P3
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])

    a2, b2, c2 = a * a, b * b, c * c
    q = (a2 - c2) / b2
    r = (a2 + c2) / b2

    A4 = (q - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (q * (1.0 - q) * cb - (1.0 - r) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (q * q - 1.0 + 2.0 * q * q * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
                - 4.0 * r * ca * cb * cg + 2.0 * (b2 - a2) / b2 * cg * cg)
    A1 = 4.0 * (-q * (1.0 + q) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - r) * ca * cg)
    A0 = (1.0 + q) ** 2 - 4.0 * a2 / b2 * cg * cg

    coeffs = np.array([A4, A3, A2, A1, A0])
    if np.abs(coeffs).max() < 1e-15:
        return []
    roots = np.roots(coeffs)

    poses: list[Pose] = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = _polish_root(coeffs, float(root.real))
        if v <= 0:
            continue
        denom = 2.0 * (cg - v * ca)
        if abs(denom) < 1e-12:
            continue
        u = ((q - 1.0) * v * v - 2.0 * q * cb * v + 1.0 + q) / denom
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(s1_sq)
        cam_pts = rays * np.array([s1, u * s1, v * s1])[:, None]
        pose = _absolute_orientation(points, cam_pts)
        if pose is None:
            continue
        pose = _exact_polish(pose, points, pixels, K)
        err = reproject_errors(pose.rotation, pose.translation, points, pixels, K)
        if np.all(err < reproj_tol) and not _duplicate(poses, pose):
            poses.append(pose)
    return poses


def _exact_polish(pose: Pose, points: np.ndarray, pixels: np.ndarray,
                  K: CameraIntrinsics, iters: int = 10) -> Pose:
    """Gauss-Newton polish on the three sample points; a P3P solution
    interpolates them exactly, so this converges quadratically."""
    R, t = pose.rotation, pose.translation
    for _ in range(iters):
        rs, Js = [], []
        for p, x in zip(points, pixels):
            r, J = residual_jacobian(R, t, p, x, K)
            rs.append(r)
            Js.append(J)
        r = np.concatenate(rs)
        if np.abs(r).max() < 1e-12:
            break
        J = np.concatenate(Js)
        try:
            delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        except np.linalg.LinAlgError:
            break
        R = so3_exp(delta[:3]) @ R
        t = so3_exp(delta[:3]) @ t + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    return Pose(R, t)


def _polish_root(coeffs: np.ndarray, x: float) -> float:
    deriv = np.polyder(coeffs)
    for _ in range(3):
        f = np.polyval(coeffs, x)
        fp = np.polyval(deriv, x)
        if abs(fp) < 1e-300:
            break
        x -= f / fp
    return x


def _absolute_orientation(world: np.ndarray, cam: np.ndarray) -> Pose | None:
    """Rigid transform with cam_i = R @ world_i + t (Kabsch)."""
    wc = world.mean(axis=0)
    cc = cam.mean(axis=0)
    H = (world - wc).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    if not np.isfinite(R).all():
        return None
    return Pose(R, cc - R @ wc)


def _duplicate(poses: list[Pose], pose: Pose, tol: float = 1e-9) -> bool:
    return any(
        np.abs(p.rotation - pose.rotation).max() < tol
        and np.abs(p.translation - pose.translation).max() < tol
        for p in poses
    )


# ---------------------------------------------------------------------------
# RANSAC

def pnp_ransac(corrs: list[Correspondence2D3D], K: CameraIntrinsics,
               cfg: RansacConfig) -> RelocalizationResult:
    """Robust PnP: P3P hypotheses (disambiguated by a 4th sample) scored by
    inlier count, best refined by Huber Gauss-Newton.  Deterministic for a
    fixed seed."""
    n = len(corrs)
    if n < 4:
        return RelocalizationResult(STATUS_FAILED, reason="too few correspondences")
    pts = np.stack([c.point_xyz for c in corrs])
    px = np.array([c.query_px for c in corrs])

    rng = np.random.default_rng(cfg.seed)
    best_pose: Pose | None = None
    best_count = 0
    max_iters = cfg.max_iters
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        sols = p3p_solve(pts[sample[:3]], px[sample[:3]], K, reproj_tol=1e-4)
        if not sols:
            continue
        # disambiguate roots by the 4th sampled correspondence
        probe_err = [
            reproject_errors(s.rotation, s.translation,
                             pts[sample[3:]], px[sample[3:]], K)[0]
            for s in sols
        ]
        hypo = sols[int(np.argmin(probe_err))]
        errs = reproject_errors(hypo.rotation, hypo.translation, pts, px, K)
        count = int(np.sum(errs < cfg.inlier_thresh_px))
        if count > best_count:
            best_count = count
            best_pose = hypo
            w = count / n
            if 0 < w < 1:
                denom = math.log(max(1.0 - w ** 3, 1e-12))
                max_iters = min(cfg.max_iters,
                                int(math.ceil(math.log(1.0 - cfg.confidence) / denom)))
            elif w >= 1:
                break

    if best_pose is None or best_count < cfg.min_inliers:
        return RelocalizationResult(
            STATUS_FAILED, reason=f"ransac below min_inliers ({best_count})")

    errs = reproject_errors(best_pose.rotation, best_pose.translation, pts, px, K)
    inliers = errs < cfg.inlier_thresh_px
    refined = refine_pose(best_pose, pts[inliers], px[inliers], K, cfg)
    ref_errs = reproject_errors(refined.rotation, refined.translation, pts, px, K)
    ref_inliers = ref_errs < cfg.inlier_thresh_px
    if int(ref_inliers.sum()) >= cfg.min_inliers:
        best_pose, errs, inliers = refined, ref_errs, ref_inliers

    count = int(inliers.sum())
    return RelocalizationResult(
        status=STATUS_OK,
        pose=best_pose,
        inlier_count=count,
        inlier_ratio=count / n,
        mean_reproj_err_px=float(errs[inliers].mean()),
    )


# ---------------------------------------------------------------------------
# refinement

def huber_objective(errs: np.ndarray, delta: float) -> float:
    e = np.asarray(errs)
    quad = e <= delta
    return float(np.sum(np.where(quad, 0.5 * e * e, delta * (e - 0.5 * delta))))


def refine_pose(init: Pose, pts: np.ndarray, px: np.ndarray,
                K: CameraIntrinsics, cfg: RansacConfig) -> Pose:
    """Damped Gauss-Newton on the 6D tangent space minimizing the Huber
    reprojection objective.  The objective never increases across accepted
    steps; returns the best iterate on non-convergence."""
    R = init.rotation.copy()
    t = init.translation.copy()
    lam = 1e-6
    obj = _robust_objective(R, t, pts, px, K, cfg.huber_delta_px)
    for _ in range(cfg.refine_iters):
        JtWJ = np.zeros((6, 6))
        JtWr = np.zeros(6)
        for p, x in zip(pts, px):
            r, J = residual_jacobian(R, t, p, x, K)
            e = np.linalg.norm(r)
            w = 1.0 if e <= cfg.huber_delta_px else cfg.huber_delta_px / e
            JtWJ += w * J.T @ J
            JtWr += w * J.T @ r
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(JtWJ + lam * np.eye(6), -JtWr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = so3_exp(delta[:3]) @ R
            t_new = so3_exp(delta[:3]) @ t + delta[3:]
            new_obj = _robust_objective(R_new, t_new, pts, px, K, cfg.huber_delta_px)
            if new_obj <= obj:
                R, t, obj = R_new, t_new, new_obj
                lam = max(lam * 0.5, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped or np.linalg.norm(delta) < 1e-10:
            break
    # re-orthonormalize against accumulated drift
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    return Pose(R, t)


def _robust_objective(R, t, pts, px, K, delta):
    errs = reproject_errors(R, t, pts, px, K)
    errs = np.where(np.isfinite(errs), errs, 1e9)
    return huber_objective(errs, delta)
