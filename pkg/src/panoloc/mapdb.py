"""Offline database construction and persistence.

The database holds the equalized point cloud, the rendered map images
with their projecting poses, four global descriptors per image (one per
cube patch), per-image local features, and per-point covisibility counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from panoloc.config import PipelineConfig
from panoloc.features import (LocalFeatureSet, get_global_extractor,
                              get_local_extractor)
from panoloc.io import (LoadError, PointCloud, Pose, Trajectory, crop_local_map,
                        format_pose_line, sample_trajectory,
                        save_pgm, _load_pgm)
from panoloc.projection import (MapImage, NO_POINT, clahe, equalize_map_intensity,
                                render_panorama, scale_map_intensity)

MANIFEST_VERSION = 1


@dataclass
class Database:
    cloud: PointCloud                    # equalized global cloud
    images: list[MapImage]
    global_feats: list[list[np.ndarray]]  # per image: 4 patch descriptors
    local_feats: list[LocalFeatureSet]
    covis: dict[int, int]
    config: PipelineConfig
    id_index: dict[int, int] = field(default_factory=dict)  # point id -> row

    def __post_init__(self):
        if not self.id_index:
            self.id_index = {int(pid): i for i, pid in enumerate(self.cloud.ids)}


def build_database(cloud: PointCloud, traj: Trajectory, cfg: PipelineConfig) -> Database:
    """Offline pipeline: equalize -> sample trajectory -> per pose crop,
    render, CLAHE, extract features -> aggregate covisibility."""
    if len(cloud) == 0 or len(traj) == 0:
        raise ValueError("empty point cloud or trajectory")
    if cfg.use_equalization:
        cloud = equalize_map_intensity(cloud)
    else:
        cloud = scale_map_intensity(cloud)
    poses = sample_trajectory(traj, cfg.sample_interval_m)
    if not poses:
        raise ValueError("trajectory too short")

    extract_global = get_global_extractor(cfg.global_extractor)
    extract_local = get_local_extractor(cfg.local_extractor)

    images: list[MapImage] = []
    global_feats: list[list[np.ndarray]] = []
    local_feats: list[LocalFeatureSet] = []
    covis: dict[int, int] = {}
    for image_id, pose in enumerate(poses):
        local = crop_local_map(cloud, pose, cfg.max_dist_m)
        img = render_panorama(local, pose, cfg.projection, image_id)
        if cfg.use_equalization:
            img.intensity = clahe(img.intensity, cfg.clahe_clip_limit, cfg.clahe_tiles)
        images.append(img)
        global_feats.append([
            extract_global(img.face_patch(face)) for face in range(4)
        ])
        local_feats.append(extract_local(img.intensity, cfg.max_keypoints))
        for pid in np.unique(img.point_id[img.point_id != NO_POINT]):
            covis[int(pid)] = covis.get(int(pid), 0) + 1

    return Database(cloud, images, global_feats, local_feats, covis, cfg)


# ---------------------------------------------------------------------------
# persistence

def save_database(db: Database, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "manifest.txt", "w") as f:
        f.write(f"version {MANIFEST_VERSION}\n")
        f.write(f"images {len(db.images)}\n")
        f.write("config_begin\n")
        for key, value in db.config.to_flat_dict().items():
            f.write(f"  {key} = {value}\n")
        f.write("config_end\n")
        for img in db.images:
            f.write("pose " + format_pose_line(img.image_id, img.pose) + "\n")

    _write_cloud(db.cloud, out / "cloud.bin")
    for img in db.images:
        save_pgm(img.intensity, out / f"img_{img.image_id}.pgm")
        img.depth.astype("<f4").tofile(out / f"img_{img.image_id}.depth")
        img.point_id.astype("<i8").tofile(out / f"img_{img.image_id}.pid")

    with open(out / "global.bin", "wb") as f:
        f.write(struct.pack("<qq", len(db.global_feats), 4))
        for patches in db.global_feats:
            for desc in patches:
                arr = np.asarray(desc, dtype="<f8")
                f.write(struct.pack("<q", arr.size))
                f.write(arr.tobytes())

    with open(out / "local.bin", "wb") as f:
        f.write(struct.pack("<q", len(db.local_feats)))
        for feats in db.local_feats:
            f.write(struct.pack("<qq", len(feats), feats.descriptors.shape[1] if len(feats) else 0))
            f.write(feats.keypoints.astype("<f8").tobytes())
            f.write(feats.scores.astype("<f8").tobytes())
            f.write(feats.descriptors.astype("<f8").tobytes())

    with open(out / "covis.bin", "wb") as f:
        f.write(struct.pack("<q", len(db.covis)))
        for pid in sorted(db.covis):
            f.write(struct.pack("<qq", pid, db.covis[pid]))


def load_database(db_dir: str | Path) -> Database:
    root = Path(db_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise LoadError(f"manifest not found: {manifest}")

    n_images = 0
    poses: list[tuple[int, Pose]] = []
    flat_cfg: dict[str, str] = {}
    in_config = False
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line == "config_begin":
                in_config = True
            elif line == "config_end":
                in_config = False
            elif in_config:
                key, _, value = line.partition("=")
                flat_cfg[key.strip()] = value.strip()
            else:
                tokens = line.split()
                if tokens[0] == "version":
                    found = int(tokens[1])
                    if found != MANIFEST_VERSION:
                        raise LoadError(
                            f"manifest version mismatch: expected {MANIFEST_VERSION}, found {found}")
                elif tokens[0] == "images":
                    n_images = int(tokens[1])
                elif tokens[0] == "pose":
                    from panoloc.io import quat_to_rotation

                    idx = int(tokens[1])
                    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in tokens[2:9])
                    poses.append((idx, Pose(quat_to_rotation(qx, qy, qz, qw),
                                            np.array([tx, ty, tz]))))
    cfg = PipelineConfig.from_flat_dict(flat_cfg)
    cloud = _read_cloud(root / "cloud.bin")

    images: list[MapImage] = []
    for image_id, pose in poses:
        for suffix in (".pgm", ".depth", ".pid"):
            if not (root / f"img_{image_id}{suffix}").exists():
                raise LoadError(f"missing buffer file: img_{image_id}{suffix}")
        intensity = _load_pgm(root / f"img_{image_id}.pgm")
        shape = intensity.shape
        depth = np.fromfile(root / f"img_{image_id}.depth", dtype="<f4").reshape(shape)
        pid = np.fromfile(root / f"img_{image_id}.pid", dtype="<i8").reshape(shape)
        images.append(MapImage(intensity, depth, pid, pose, image_id))
    if len(images) != n_images:
        raise LoadError(f"manifest lists {n_images} images, found {len(images)} poses")

    with open(root / "global.bin", "rb") as f:
        count, per_image = struct.unpack("<qq", f.read(16))
        global_feats = []
        for _ in range(count):
            patches = []
            for _ in range(per_image):
                (dim,) = struct.unpack("<q", f.read(8))
                patches.append(np.frombuffer(f.read(8 * dim), dtype="<f8").copy())
            global_feats.append(patches)

    with open(root / "local.bin", "rb") as f:
        (count,) = struct.unpack("<q", f.read(8))
        local_feats = []
        for _ in range(count):
            n, dim = struct.unpack("<qq", f.read(16))
            kps = np.frombuffer(f.read(16 * n), dtype="<f8").reshape(n, 2).copy()
            scores = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
            descs = np.frombuffer(f.read(8 * n * dim), dtype="<f8").reshape(n, dim).copy()
            local_feats.append(LocalFeatureSet(kps, scores, descs))

    with open(root / "covis.bin", "rb") as f:
        (count,) = struct.unpack("<q", f.read(8))
        covis = {}
        for _ in range(count):
            pid, c = struct.unpack("<qq", f.read(16))
            covis[pid] = c

    return Database(cloud, images, global_feats, local_feats, covis, cfg)


def _write_cloud(cloud: PointCloud, path: Path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<q", len(cloud)))
        f.write(cloud.ids.astype("<i8").tobytes())
        f.write(cloud.xyz.astype("<f8").tobytes())
        f.write(cloud.intensity_raw.astype("<f8").tobytes())
        has_eq = cloud.intensity_eq is not None
        f.write(struct.pack("<b", int(has_eq)))
        if has_eq:
            f.write(cloud.intensity_eq.astype("u1").tobytes())


def _read_cloud(path: Path) -> PointCloud:
    if not path.exists():
        raise LoadError(f"missing buffer file: {path.name}")
    with open(path, "rb") as f:
        (n,) = struct.unpack("<q", f.read(8))
        ids = np.frombuffer(f.read(8 * n), dtype="<i8").copy()
        xyz = np.frombuffer(f.read(24 * n), dtype="<f8").reshape(n, 3).copy()
        raw = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
        (has_eq,) = struct.unpack("<b", f.read(1))
        eq = np.frombuffer(f.read(n), dtype="u1").copy() if has_eq else None
    return PointCloud(ids, xyz, raw, eq)
