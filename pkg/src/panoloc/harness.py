"""Synthetic scenes with exact ground truth.

Generates textured planar walls sampled into point clouds, corridor
trajectories, and pinhole query renders, so the whole pipeline can be
exercised end-to-end at desk scale with known poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from panoloc.io import CameraIntrinsics, PointCloud, Pose, Trajectory
from panoloc.projection import SENSOR_TO_CAMERA
from panoloc.pose import so3_exp

TEXTURES = ("checker", "blobs", "stripes", "tiles")

# fx matches the map panorama's horizontal angular resolution (the cube
# faces are equiangular at S * 2 / pi pixels per radian for S = 480), so
# query and map descriptor patches cover the same scene footprint
DEFAULT_QUERY_INTRINSICS = CameraIntrinsics(fx=960.0 / math.pi, fy=960.0 / math.pi,
                                            cx=480.0, cy=240.0,
                                            width=960, height=480)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    extent: float = 60.0          # corridor length, meters
    corridor_width: float = 8.0
    wall_height: float = 6.0
    wall_count: int = 8           # two side walls + perpendicular stubs
    points_per_m2: float = 400.0
    texture: str = "tiles"
    texture_scale: float = 0.5
    intensity_noise_sigma: float = 0.02

    def __post_init__(self):
        if self.points_per_m2 <= 0 or self.extent <= 0:
            raise ValueError("density and extent must be positive")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; available: {TEXTURES}")


@dataclass(frozen=True)
class _Wall:
    origin: np.ndarray  # corner, meters
    u_dir: np.ndarray   # unit, along width
    v_dir: np.ndarray   # unit, along height
    u_len: float
    v_len: float


def _scene_walls(cfg: SceneConfig) -> list[_Wall]:
    if cfg.wall_count < 1:
        raise ValueError("wall_count must be >= 1")
    hw = cfg.corridor_width / 2.0
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    walls = [
        _Wall(np.array([0.0, hw, 0.0]), ex, ez, cfg.extent, cfg.wall_height),
        _Wall(np.array([0.0, -hw, 0.0]), ex, ez, cfg.extent, cfg.wall_height),
        # end caps so forward-looking cameras always face structure
        _Wall(np.array([cfg.extent, -hw, 0.0]), ey, ez, cfg.corridor_width, cfg.wall_height),
        _Wall(np.array([0.0, -hw, 0.0]), ey, ez, cfg.corridor_width, cfg.wall_height),
    ][: cfg.wall_count]
    # perpendicular stubs protruding from alternating sides
    n_stub = cfg.wall_count - len(walls)
    for i in range(n_stub):
        x = cfg.extent * (i + 1) / (n_stub + 1)
        side = 1.0 if i % 2 == 0 else -1.0
        origin = np.array([x, side * hw, 0.0])
        walls.append(_Wall(origin, -side * ey, ez, hw * 0.4, cfg.wall_height))
    return walls


def _texture_value(cfg: SceneConfig, wall_idx: int, u: np.ndarray, v: np.ndarray,
                   rng_blobs: np.ndarray) -> np.ndarray:
    s = cfg.texture_scale
    if cfg.texture == "checker":
        parity = (np.floor(u / s) + np.floor(v / s)) % 2
        return np.where(parity > 0.5, 0.8, 0.2)
    if cfg.texture == "stripes":
        return np.where(np.floor(u / s) % 2 > 0.5, 0.8, 0.2)
    if cfg.texture == "tiles":
        # deterministic random gray per grid cell; the cell corners are
        # dense and each corner neighborhood is distinct, unlike a plain
        # checkerboard which is too self-similar for the ratio test
        iu = np.floor(u / s)
        iv = np.floor(v / s)
        h = np.sin(iu * 127.1 + iv * 311.7 + wall_idx * 74.7) * 43758.5453
        return 0.1 + 0.8 * (h - np.floor(h))
    # blobs: smooth sum of Gaussians, per-wall layout
    val = np.full(u.shape, 0.5)
    for bu, bv, amp, width in rng_blobs:
        val = val + amp * np.exp(-(((u - bu) ** 2 + (v - bv) ** 2) / (2 * (width * s) ** 2)))
    lo, hi = val.min(), val.max()
    if hi > lo:
        val = 0.05 + 0.9 * (val - lo) / (hi - lo)
    return val


def generate_scene(cfg: SceneConfig) -> PointCloud:
    """Deterministic stratified sampling of textured walls.

    Each wall is sampled on a round(len * sqrt(density)) grid with seeded
    jitter, so the point count is a pure function of the config."""
    walls = _scene_walls(cfg)
    rng = np.random.default_rng(cfg.seed)
    xyz_parts = []
    raw_parts = []
    for wi, wall in enumerate(walls):
        step = math.sqrt(cfg.points_per_m2)
        nu = max(1, int(np.floor(wall.u_len * step + 0.5)))
        nv = max(1, int(np.floor(wall.v_len * step + 0.5)))
        uu, vv = np.meshgrid(
            (np.arange(nu) + 0.5) * wall.u_len / nu,
            (np.arange(nv) + 0.5) * wall.v_len / nv,
            indexing="ij",
        )
        uu = uu + rng.uniform(-0.5, 0.5, uu.shape) * wall.u_len / nu
        vv = vv + rng.uniform(-0.5, 0.5, vv.shape) * wall.v_len / nv
        pts = (wall.origin[None, :]
               + uu.reshape(-1, 1) * wall.u_dir[None, :]
               + vv.reshape(-1, 1) * wall.v_dir[None, :])
        n_blobs = 24
        blobs = np.stack([
            rng.uniform(0, wall.u_len, n_blobs),
            rng.uniform(0, wall.v_len, n_blobs),
            rng.uniform(-0.45, 0.45, n_blobs),
            rng.uniform(0.5, 2.0, n_blobs),
        ], axis=1)
        raw = _texture_value(cfg, wi, uu.ravel(), vv.ravel(), blobs)
        if cfg.intensity_noise_sigma > 0:
            raw = raw + rng.normal(0, cfg.intensity_noise_sigma, raw.shape)
        xyz_parts.append(pts)
        raw_parts.append(np.maximum(raw, 0.0))
    xyz = np.concatenate(xyz_parts)
    raw = np.concatenate(raw_parts)
    cloud = PointCloud(np.arange(xyz.shape[0], dtype=np.int64), xyz, raw)
    cloud.validate()
    return cloud


def generate_trajectory(cfg: SceneConfig, n_poses: int, path_shape: str = "straight",
                        spacing: float = 1.0, height: float = 1.6) -> Trajectory:
    """Forward-facing poses at fixed spacing: a straight corridor pass or a
    closed circular loop."""
    traj = Trajectory()
    if path_shape == "straight":
        x0 = max(1.0, (cfg.extent - (n_poses - 1) * spacing) / 2.0)
        for i in range(n_poses):
            t = np.array([x0 + i * spacing, 0.0, height])
            traj.append(i, Pose(np.eye(3), t))
    elif path_shape == "loop":
        radius = n_poses * spacing / (2.0 * math.pi)
        cx, cy = cfg.extent / 2.0, 0.0
        for i in range(n_poses):
            ang = 2.0 * math.pi * i / n_poses
            t = np.array([cx + radius * math.cos(ang), cy + radius * math.sin(ang), height])
            fwd = ang + math.pi / 2.0  # tangent direction
            cosf, sinf = math.cos(fwd), math.sin(fwd)
            R = np.array([[cosf, -sinf, 0.0], [sinf, cosf, 0.0], [0.0, 0.0, 1.0]])
            traj.append(i, Pose(R, t))
    else:
        raise ValueError(f"unknown path shape {path_shape!r}")
    return traj


def render_query(scene: PointCloud, pose: Pose, K: CameraIntrinsics,
                 jitter: tuple[float, float] = (0.0, 0.0), seed: int = 0,
                 gain: float = 1.0, bias: float = 0.0,
                 splat_gain: float = 14.0, splat_max: int = 3,
                 z_near: float = 0.5) -> tuple[np.ndarray, Pose]:
    """Pinhole z-buffered splat render of the equalized intensity.

    The camera pose is `pose` perturbed by seeded Gaussian jitter
    (trans sigma meters, rot sigma degrees); returns (image, exact pose
    used).  Gain/bias emulate the grayscale-vs-intensity modality gap."""
    if scene.intensity_eq is None:
        raise ValueError("scene intensity must be equalized before rendering")
    rng = np.random.default_rng(seed)
    t_sigma, r_sigma = jitter
    dt = rng.normal(0, t_sigma, 3) if t_sigma > 0 else np.zeros(3)
    dw = rng.normal(0, math.radians(r_sigma), 3) if r_sigma > 0 else np.zeros(3)
    gt_pose = Pose(so3_exp(dw) @ pose.rotation, pose.translation + dt)

    p_sensor = (scene.xyz - gt_pose.translation) @ gt_pose.rotation
    p_cam = p_sensor @ SENSOR_TO_CAMERA.T
    z = p_cam[:, 2]
    valid = z > z_near
    if not np.any(valid):
        raise ValueError("empty render: no visible points")
    u = K.fx * p_cam[valid, 0] / z[valid] + K.cx
    v = K.fy * p_cam[valid, 1] / z[valid] + K.cy
    inside = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    if not np.any(inside):
        raise ValueError("empty render: no visible points")
    ix = np.floor(u[inside]).astype(np.int64)
    iy = np.floor(v[inside]).astype(np.int64)
    depth = z[valid][inside]
    ids = scene.ids[valid][inside]
    vals = scene.intensity_eq[valid][inside]

    half = np.minimum(splat_max, np.floor(splat_gain / np.maximum(depth, 1e-9) + 0.5)).astype(np.int64)
    img = np.zeros((K.height, K.width), dtype=np.uint8)
    zbuf = np.full((K.height, K.width), np.inf)
    rows = []
    wmax = int(half.max(initial=0))
    for dx in range(-wmax, wmax + 1):
        for dy in range(-wmax, wmax + 1):
            r = max(abs(dx), abs(dy))
            sel = half >= r
            tx = ix[sel] + dx
            ty = iy[sel] + dy
            ok = (tx >= 0) & (tx < K.width) & (ty >= 0) & (ty < K.height)
            flat = ty[ok] * K.width + tx[ok]
            rows.append((flat, depth[sel][ok], ids[sel][ok], vals[sel][ok]))
    flat = np.concatenate([r[0] for r in rows])
    dep = np.concatenate([r[1] for r in rows])
    pid = np.concatenate([r[2] for r in rows])
    val = np.concatenate([r[3] for r in rows])
    order = np.lexsort((pid, dep, flat))
    flat, dep, val = flat[order], dep[order], val[order]
    first = np.ones(flat.size, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    flat, dep, val = flat[first], dep[first], val[first]
    yy, xx = np.divmod(flat, K.width)
    zbuf[yy, xx] = dep
    img[yy, xx] = val

    if gain != 1.0 or bias != 0.0:
        out = np.clip(np.floor(img.astype(np.float64) * gain + bias + 0.5), 0, 255)
        img = out.astype(np.uint8)
    return img, gt_pose
