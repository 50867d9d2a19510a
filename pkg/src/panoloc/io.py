"""Point cloud, trajectory, intrinsics and image input/output.

File formats:
  - point clouds: PLY (ascii or binary_little_endian), vertex properties
    x, y, z, intensity as float32
  - trajectories: text, one pose per line `index tx ty tz qx qy qz qw`
  - intrinsics: `key = value` text with fx, fy, cx, cy, width, height
  - images: PGM (P5) read/write, grayscale PNG read
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROTATION_TOL = 1e-9
QUAT_NORM_TOL = 1e-3


class LoadError(ValueError):
    """Raised when an input file is missing or malformed."""


@dataclass
class PointCloud:
    """Global 3D points with raw intensity and stable integer ids."""

    ids: np.ndarray        # (N,) int64
    xyz: np.ndarray        # (N, 3) float64, meters
    intensity_raw: np.ndarray  # (N,) float64, >= 0
    intensity_eq: np.ndarray | None = None  # (N,) uint8 once equalized

    def __len__(self) -> int:
        return self.ids.shape[0]

    def validate(self, dense_ids: bool = True) -> None:
        n = len(self)
        if self.xyz.shape != (n, 3) or self.intensity_raw.shape != (n,):
            raise ValueError("inconsistent point cloud array shapes")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite coordinates")
        if np.any(self.intensity_raw < 0):
            raise ValueError("negative raw intensity")
        if len(np.unique(self.ids)) != n:
            raise ValueError("duplicate point ids")
        if dense_ids and n and (self.ids.min() != 0 or self.ids.max() != n - 1):
            raise ValueError("point ids not dense in [0, N)")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_world = rotation @ p_local + translation."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose must be a 3x3 rotation and a 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self * other).apply(p) = self.apply(other.apply(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class Trajectory:
    """Ordered (index, pose) pairs with strictly increasing indices."""

    indices: list[int] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    def append(self, index: int, pose: Pose) -> None:
        if self.indices and index <= self.indices[-1]:
            raise ValueError("trajectory indices must be strictly increasing")
        self.indices.append(index)
        self.poses.append(pose)


# ---------------------------------------------------------------------------
# quaternion helpers (TUM order: qx qy qz qw)

def quat_to_rotation(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if abs(n - 1.0) > QUAT_NORM_TOL:
        raise LoadError(f"quaternion norm {n:.6f} deviates from 1 beyond {QUAT_NORM_TOL}")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def rotation_to_quat(R: np.ndarray) -> tuple[float, float, float, float]:
    """Return (qx, qy, qz, qw) with qw >= 0."""
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return tuple(q)


# ---------------------------------------------------------------------------
# PLY point clouds

_PLY_TYPES = {
    "float": ("<f4", float), "float32": ("<f4", float),
    "double": ("<f8", float), "float64": ("<f8", float),
    "uchar": ("<u1", int), "uint8": ("<u1", int),
    "char": ("<i1", int), "int8": ("<i1", int),
    "ushort": ("<u2", int), "uint16": ("<u2", int),
    "short": ("<i2", int), "int16": ("<i2", int),
    "uint": ("<u4", int), "uint32": ("<u4", int),
    "int": ("<i4", int), "int32": ("<i4", int),
}


def load_point_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"point cloud file not found: {path}")
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise LoadError(f"{path}: not a PLY file")
        fmt = None
        vertex_count = None
        properties: list[tuple[str, str]] = []  # (type, name)
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise LoadError(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    vertex_count = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise LoadError(f"{path}: list properties unsupported")
                properties.append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise LoadError(f"{path}: unsupported PLY format {fmt!r}")
        if vertex_count is None:
            raise LoadError(f"{path}: no vertex element")
        names = [name for _, name in properties]
        for req in ("x", "y", "z"):
            if req not in names:
                raise LoadError(f"{path}: missing vertex property {req!r}")
        if "intensity" not in names:
            raise LoadError(f"{path}: missing intensity property")

        if fmt == "ascii":
            rows = []
            for _ in range(vertex_count):
                tokens = f.readline().split()
                if len(tokens) < len(properties):
                    raise LoadError(f"{path}: short vertex line")
                rows.append([float(v) for v in tokens[: len(properties)]])
            data = np.array(rows, dtype=np.float64).reshape(vertex_count, len(properties))
            cols = {name: data[:, i] for i, (_, name) in enumerate(properties)}
        else:
            dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in properties])
            raw = f.read(dtype.itemsize * vertex_count)
            if len(raw) < dtype.itemsize * vertex_count:
                raise LoadError(f"{path}: truncated binary vertex data")
            rec = np.frombuffer(raw, dtype=dtype, count=vertex_count)
            cols = {name: rec[name].astype(np.float64) for _, name in properties}

    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    cloud = PointCloud(
        ids=np.arange(vertex_count, dtype=np.int64),
        xyz=xyz,
        intensity_raw=cols["intensity"],
    )
    cloud.validate()
    return cloud


def save_point_cloud(cloud: PointCloud, path: str | Path, binary: bool = True) -> None:
    path = Path(path)
    n = len(cloud)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {n}\n"
        "property float32 x\nproperty float32 y\nproperty float32 z\n"
        "property float32 intensity\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        data = np.empty((n, 4), dtype="<f4")
        data[:, :3] = cloud.xyz
        data[:, 3] = cloud.intensity_raw
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# trajectories

def load_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"trajectory file not found: {path}")
    traj = Trajectory()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 8:
                raise LoadError(f"{path}:{lineno}: expected 8 fields, got {len(tokens)}")
            idx = int(float(tokens[0]))
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in tokens[1:])
            try:
                R = quat_to_rotation(qx, qy, qz, qw)
            except LoadError as e:
                raise LoadError(f"{path}:{lineno}: {e}") from None
            traj.append(idx, Pose(R, np.array([tx, ty, tz])))
    return traj


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w") as f:
        for idx, pose in zip(traj.indices, traj.poses):
            f.write(format_pose_line(idx, pose) + "\n")


def format_pose_line(idx: int, pose: Pose) -> str:
    qx, qy, qz, qw = rotation_to_quat(pose.rotation)
    t = pose.translation
    return (f"{idx} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}")


def sample_trajectory(traj: Trajectory, interval_m: float) -> list[Pose]:
    """Greedy arc-length sampling: keep a pose once it is >= interval_m
    from the last kept pose."""
    if interval_m <= 0:
        raise ValueError("interval_m must be positive")
    kept: list[Pose] = []
    for pose in traj.poses:
        if not kept or np.linalg.norm(pose.translation - kept[-1].translation) >= interval_m:
            kept.append(pose)
    return kept


def crop_local_map(cloud: PointCloud, pose: Pose, max_dist_m: float) -> PointCloud:
    """Points within max_dist_m of the pose position; global ids preserved."""
    if max_dist_m <= 0:
        raise ValueError("max_dist_m must be positive")
    d = np.linalg.norm(cloud.xyz - pose.translation, axis=1)
    keep = d <= max_dist_m
    return PointCloud(
        ids=cloud.ids[keep],
        xyz=cloud.xyz[keep],
        intensity_raw=cloud.intensity_raw[keep],
        intensity_eq=None if cloud.intensity_eq is None else cloud.intensity_eq[keep],
    )


# ---------------------------------------------------------------------------
# intrinsics

def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"intrinsics file not found: {path}")
    values: dict[str, float] = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val.strip())
    try:
        return CameraIntrinsics(
            fx=values["fx"], fy=values["fy"], cx=values["cx"], cy=values["cy"],
            width=int(values["width"]), height=int(values["height"]),
        )
    except KeyError as e:
        raise LoadError(f"{path}: missing intrinsics key {e}") from None


def save_intrinsics(K: CameraIntrinsics, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write(f"fx = {K.fx!r}\nfy = {K.fy!r}\ncx = {K.cx!r}\ncy = {K.cy!r}\n")
        f.write(f"width = {K.width}\nheight = {K.height}\n")


# ---------------------------------------------------------------------------
# grayscale images

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def load_gray_image(path: str | Path) -> np.ndarray:
    """Load a grayscale image (PGM P5 or PNG) as (H, W) uint8.

    Color PNGs are converted with fixed luma weights."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"image file not found: {path}")
    if path.suffix.lower() == ".pgm":
        return _load_pgm(path)
    from PIL import Image

    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 2:
        return arr.astype(np.uint8)
    rgb = arr[..., :3].astype(np.float64)
    gray = rgb @ np.asarray(LUMA_WEIGHTS)
    return np.clip(np.floor(gray + 0.5), 0, 255).astype(np.uint8)


def _load_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise LoadError(f"{path}: not a P5 PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise LoadError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size < width * height:
        raise LoadError(f"{path}: truncated PGM pixel data")
    return pixels.reshape(height, width).copy()


def save_pgm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("expected a 2D grayscale image")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())
