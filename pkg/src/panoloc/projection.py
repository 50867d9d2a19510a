"""Panoramic projection of local point clouds.

The sensor frame is x-forward, y-left, z-up.  Four vertical cube faces
(front/left/back/right, 90 degree yaw steps) are tiled left-to-right into
one W = 4*S by H = S panorama; top and ground faces are discarded.  Face
coordinates are optionally warped by the equiangular cube mapping to even
out angular pixel density.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from panoloc.io import CameraIntrinsics, PointCloud, Pose

NO_POINT = np.int64(-1)


class CubeFace(enum.IntEnum):
    FRONT = 0
    LEFT = 1
    BACK = 2
    RIGHT = 3


# rows are (right, down, forward) of each face camera, in sensor axes
FACE_ROTATIONS = {
    CubeFace.FRONT: np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
    CubeFace.LEFT: np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    CubeFace.BACK: np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]]),
    CubeFace.RIGHT: np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]]),
}

# sensor -> pinhole camera frame (x right, y down, z forward); equals the
# front face rotation so a forward-looking camera sees the front face
SENSOR_TO_CAMERA = FACE_ROTATIONS[CubeFace.FRONT]


@dataclass(frozen=True)
class ProjectionConfig:
    face_size: int = 480
    splat_gain: float = 8.0   # pixel*meters; splat half-width = gain / depth
    splat_max: int = 2
    use_hec: bool = True
    z_near: float = 0.5

    def __post_init__(self):
        if self.face_size <= 0:
            raise ValueError("face_size must be positive")
        if not (0 <= self.splat_max <= 3):
            raise ValueError("splat_max must be in [0, 3]")
        if self.z_near <= 0:
            raise ValueError("z_near must be positive")


@dataclass
class MapImage:
    """Rendered intensity panorama with per-pixel depth and point ids."""

    intensity: np.ndarray  # (S, 4S) uint8
    depth: np.ndarray      # (S, 4S) float32, +inf where empty
    point_id: np.ndarray   # (S, 4S) int64, NO_POINT where empty
    pose: Pose
    image_id: int = 0

    @property
    def face_size(self) -> int:
        return self.intensity.shape[0]

    def face_patch(self, face: CubeFace) -> np.ndarray:
        s = self.face_size
        return self.intensity[:, face * s : (face + 1) * s]


# ---------------------------------------------------------------------------
# equiangular cube warp

def hec_forward(u, v):
    """Cube coords (u, v) in [-1, 1]^2 -> warped coords (u', v')."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(u) > 1) or np.any(np.abs(v) > 1):
        raise ValueError("cube coordinates must lie in [-1, 1]")
    up = (4.0 / np.pi) * np.arctan(u)
    t = 0.4 * v * (u * u - 1.0)
    # stable quadratic root: equals (1 - sqrt(1 - 4t(v-t))) / (2t) but
    # avoids catastrophic cancellation as t -> 0 (u near +-1 or v near 0)
    vp = 2.0 * (v - t) / (1.0 + np.sqrt(np.maximum(1.0 - 4.0 * t * (v - t), 0.0)))
    return up, vp


def hec_inverse(up, vp):
    """Exact inverse of :func:`hec_forward`."""
    up = np.asarray(up, dtype=np.float64)
    vp = np.asarray(vp, dtype=np.float64)
    if np.any(np.abs(up) > 1) or np.any(np.abs(vp) > 1):
        raise ValueError("warped coordinates must lie in [-1, 1]")
    u = np.tan(np.pi * up / 4.0)
    a = 0.4 * (u * u - 1.0)
    v = vp / (1.0 - a * (1.0 - vp * vp))
    return u, v


# ---------------------------------------------------------------------------
# projections

BEHIND = None


def project_pinhole(p_cam: np.ndarray, K: CameraIntrinsics):
    """Pinhole projection of a camera-frame point; returns (u, v) or None
    when the point is at or behind the camera plane."""
    x, y, z = float(p_cam[0]), float(p_cam[1]), float(p_cam[2])
    if z <= 0:
        return BEHIND
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def project_points_pano(p_local: np.ndarray, cfg: ProjectionConfig):
    """Vectorized panorama projection of sensor-frame points.

    Returns (valid, face, px, py, depth); px/py are continuous face-local
    pixel coordinates in [0, S)."""
    p = np.atleast_2d(np.asarray(p_local, dtype=np.float64))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    depth = np.linalg.norm(p, axis=1)

    # forward component per face; dominant face wins, ties to lower index
    fwd = np.stack([x, y, -x, -y], axis=1)
    face = np.argmax(fwd, axis=1)
    zf = np.take_along_axis(fwd, face[:, None], axis=1)[:, 0]
    valid = (np.abs(z) <= zf) & (depth >= cfg.z_near) & (zf > 0)

    zf_safe = np.where(zf > 0, zf, 1.0)
    # right component per face (see FACE_ROTATIONS)
    xf = np.choose(face, [-y, x, y, -x])
    u = np.clip(xf / zf_safe, -1.0, 1.0)
    v = np.clip(-z / zf_safe, -1.0, 1.0)
    if cfg.use_hec:
        u, v = hec_forward(u, v)
    s = cfg.face_size
    px = np.clip((u + 1.0) * 0.5 * s, 0.0, np.nextafter(float(s), 0.0))
    py = np.clip((v + 1.0) * 0.5 * s, 0.0, np.nextafter(float(s), 0.0))
    return valid, face, px, py, depth


def project_point_to_pano(p_local: np.ndarray, cfg: ProjectionConfig):
    """Single-point version: (face, px, py, depth) or None when discarded."""
    valid, face, px, py, depth = project_points_pano(p_local, cfg)
    if not valid[0]:
        return None
    return CubeFace(int(face[0])), float(px[0]), float(py[0]), float(depth[0])


# ---------------------------------------------------------------------------
# rasterization

def render_panorama(local: PointCloud, pose: Pose, cfg: ProjectionConfig,
                    image_id: int = 0) -> MapImage:
    """Z-buffered splat rendering of a local cloud seen from `pose`.

    Each point is splatted as a square of half-width
    min(splat_max, round(splat_gain / depth)) pixels, clamped to its face.
    Equal depths break toward the lower point id."""
    if local.intensity_eq is None:
        raise ValueError("point cloud intensity must be equalized before rendering")
    s = cfg.face_size
    intensity = np.zeros((s, 4 * s), dtype=np.uint8)
    depth_buf = np.full((s, 4 * s), np.inf, dtype=np.float32)
    pid_buf = np.full((s, 4 * s), NO_POINT, dtype=np.int64)
    img = MapImage(intensity, depth_buf, pid_buf, pose, image_id)
    if len(local) == 0:
        return img

    p_local = (local.xyz - pose.translation) @ pose.rotation
    valid, face, px, py, depth = project_points_pano(p_local, cfg)
    if not np.any(valid):
        return img
    face = face[valid]
    ix = np.floor(px[valid]).astype(np.int64)
    iy = np.floor(py[valid]).astype(np.int64)
    depth = depth[valid]
    ids = local.ids[valid]
    inten = local.intensity_eq[valid]

    half = np.minimum(cfg.splat_max,
                      np.floor(cfg.splat_gain / np.maximum(depth, 1e-9) + 0.5)).astype(np.int64)

    rows = []
    wmax = int(half.max(initial=0))
    for dx in range(-wmax, wmax + 1):
        for dy in range(-wmax, wmax + 1):
            r = max(abs(dx), abs(dy))
            sel = half >= r
            tx = ix[sel] + dx
            ty = iy[sel] + dy
            inside = (tx >= 0) & (tx < s) & (ty >= 0) & (ty < s)
            flat = ty[inside] * (4 * s) + face[sel][inside] * s + tx[inside]
            rows.append((flat, depth[sel][inside], ids[sel][inside], inten[sel][inside]))
    flat = np.concatenate([r[0] for r in rows])
    dep = np.concatenate([r[1] for r in rows])
    pid = np.concatenate([r[2] for r in rows])
    val = np.concatenate([r[3] for r in rows])

    order = np.lexsort((pid, dep, flat))
    flat, dep, pid, val = flat[order], dep[order], pid[order], val[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    flat, dep, pid, val = flat[first], dep[first], pid[first], val[first]

    iy_w, rest = np.divmod(flat, 4 * s)
    depth_buf[iy_w, rest] = dep
    pid_buf[iy_w, rest] = pid
    intensity[iy_w, rest] = val
    return img


# ---------------------------------------------------------------------------
# intensity normalization

def equalize_map_intensity(cloud: PointCloud) -> PointCloud:
    """Global histogram equalization of raw intensities onto [0, 255].

    Uses the empirical CDF with average ranks for ties:
    eq = round(255 * rank / (N - 1))."""
    n = len(cloud)
    if n == 0:
        eq = np.zeros(0, dtype=np.uint8)
    elif n == 1:
        eq = np.zeros(1, dtype=np.uint8)
    else:
        ranks = rankdata(cloud.intensity_raw, method="average") - 1.0
        eq = np.floor(255.0 * ranks / (n - 1) + 0.5).astype(np.uint8)
    return PointCloud(cloud.ids, cloud.xyz, cloud.intensity_raw, eq)


def scale_map_intensity(cloud: PointCloud) -> PointCloud:
    """Linear min-max mapping of raw intensity onto [0, 255]; used by the
    no-equalization ablation."""
    n = len(cloud)
    if n == 0:
        eq = np.zeros(0, dtype=np.uint8)
    else:
        lo = float(cloud.intensity_raw.min())
        hi = float(cloud.intensity_raw.max())
        span = hi - lo if hi > lo else 1.0
        eq = np.floor(255.0 * (cloud.intensity_raw - lo) / span + 0.5).astype(np.uint8)
    return PointCloud(cloud.ids, cloud.xyz, cloud.intensity_raw, eq)


# ---------------------------------------------------------------------------
# CLAHE

def clahe(img: np.ndarray, clip_limit: float = 2.0, tiles: int = 8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per-tile clipped histograms with uniform excess redistribution and
    bilinear interpolation between the tile mappings.  Tiles at the right
    and bottom edges absorb the remainder pixels."""
    if clip_limit < 1:
        raise ValueError("clip_limit must be >= 1")
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    if h == 0 or w == 0:
        return img.copy()
    ty = min(tiles, h)
    tx = min(tiles, w)
    # tile edges (edge tiles extended to cover remainders)
    ys = np.linspace(0, h, ty + 1).astype(int)
    xs = np.linspace(0, w, tx + 1).astype(int)

    maps = np.empty((ty, tx, 256), dtype=np.float64)
    centers_y = np.empty(ty)
    centers_x = np.empty(tx)
    for i in range(ty):
        for j in range(tx):
            tile = img[ys[i] : ys[i + 1], xs[j] : xs[j + 1]]
            maps[i, j] = _tile_mapping(tile, clip_limit)
    centers_y = (ys[:-1] + ys[1:]) / 2.0 - 0.5
    centers_x = (xs[:-1] + xs[1:]) / 2.0 - 0.5

    # bilinear interpolation weights between neighboring tile mappings
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    i0 = np.clip(np.searchsorted(centers_y, yy) - 1, 0, ty - 1)
    i1 = np.minimum(i0 + 1, ty - 1)
    j0 = np.clip(np.searchsorted(centers_x, xx) - 1, 0, tx - 1)
    j1 = np.minimum(j0 + 1, tx - 1)
    dy = np.where(i1 > i0, (yy - centers_y[i0]) / (centers_y[i1] - centers_y[i0] + 1e-12), 0.0)
    dx = np.where(j1 > j0, (xx - centers_x[j0]) / (centers_x[j1] - centers_x[j0] + 1e-12), 0.0)
    dy = np.clip(dy, 0.0, 1.0)[:, None]
    dx = np.clip(dx, 0.0, 1.0)[None, :]

    v = img.astype(np.int64)
    m00 = maps[i0[:, None], j0[None, :], v]
    m01 = maps[i0[:, None], j1[None, :], v]
    m10 = maps[i1[:, None], j0[None, :], v]
    m11 = maps[i1[:, None], j1[None, :], v]
    out = (m00 * (1 - dy) * (1 - dx) + m01 * (1 - dy) * dx
           + m10 * dy * (1 - dx) + m11 * dy * dx)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    n = tile.size
    if n == 0:
        return np.arange(256, dtype=np.float64)
    lo, hi = int(tile.min()), int(tile.max())
    if lo == hi:
        return np.arange(256, dtype=np.float64)
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    clip = clip_limit * n / 256.0
    excess = np.maximum(hist - clip, 0.0).sum()
    hist = np.minimum(hist, clip) + excess / 256.0
    cdf = np.cumsum(hist)
    return np.clip(np.floor(cdf * 255.0 / n + 0.5), 0, 255)
