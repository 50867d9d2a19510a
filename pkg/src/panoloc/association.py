"""Fine-stage 2D-3D association.

First-stage matches are clustered in the joint 4D pixel space to find the
consistent region in both images; the region is cropped and re-matched to
densify correspondences, which are then lifted to 3D through the map
image's per-pixel point-id buffer and filtered by covisibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panoloc.features import LocalFeatureSet, MatchSet, extract_local, match_features
from panoloc.projection import NO_POINT, MapImage
from panoloc.retrieval import dbscan

MIN_BOX_SIZE = 32
FIRST_STAGE = 0
SECOND_STAGE = 1


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("degenerate bounding box")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min


@dataclass
class Correspondence2D3D:
    query_px: tuple[float, float]
    point_id: int
    point_xyz: np.ndarray
    covis: int
    stage: int  # FIRST_STAGE or SECOND_STAGE


@dataclass(frozen=True)
class AssociationConfig:
    match_cluster_eps: float = 64.0
    match_cluster_min_pts: int = 4
    min_cluster_matches: int = 8
    crop_margin: float = 0.1
    lift_radius: int = 2
    min_covis: int = 2

    def __post_init__(self):
        if min(self.match_cluster_eps, self.match_cluster_min_pts,
               self.min_cluster_matches, self.crop_margin, self.lift_radius,
               self.min_covis) <= 0:
            raise ValueError("association parameters must be positive")
        if self.crop_margin >= 0.5:
            raise ValueError("crop_margin must be < 0.5")


def cluster_matches(matches: MatchSet, qfeats: LocalFeatureSet, mfeats: LocalFeatureSet,
                    cfg: AssociationConfig, query_shape: tuple[int, int],
                    map_shape: tuple[int, int]):
    """Largest DBSCAN cluster of matches in joint (qx, qy, mx, my) space.

    Returns (cluster MatchSet, query box, map box), or None when the
    largest cluster is smaller than min_cluster_matches."""
    if len(matches) == 0:
        return None
    q_xy = qfeats.keypoints[matches.pairs[:, 0]]
    m_xy = mfeats.keypoints[matches.pairs[:, 1]]
    joint = np.concatenate([q_xy, m_xy], axis=1)
    labels = dbscan(joint, cfg.match_cluster_eps, cfg.match_cluster_min_pts)

    valid = labels[labels >= 0]
    if valid.size == 0:
        return None
    counts = np.bincount(valid)
    best = int(np.argmax(counts))
    sel = labels == best
    if int(counts[best]) < cfg.min_cluster_matches:
        return None
    cluster = MatchSet(matches.pairs[sel], matches.scores[sel])
    qbox = _hull_box(q_xy[sel], cfg.crop_margin, query_shape)
    mbox = _hull_box(m_xy[sel], cfg.crop_margin, map_shape)
    return cluster, qbox, mbox


def _hull_box(xy: np.ndarray, margin: float, shape: tuple[int, int]) -> BoundingBox:
    h, w = shape
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    mx = margin * max(x1 - x0, 1.0)
    my = margin * max(y1 - y0, 1.0)
    x0, x1 = x0 - mx, x1 + mx
    y0, y1 = y0 - my, y1 + my
    # inflate degenerate hulls so second-stage patches fit
    if x1 - x0 < MIN_BOX_SIZE:
        c = (x0 + x1) / 2
        x0, x1 = c - MIN_BOX_SIZE / 2, c + MIN_BOX_SIZE / 2
    if y1 - y0 < MIN_BOX_SIZE:
        c = (y0 + y1) / 2
        y0, y1 = c - MIN_BOX_SIZE / 2, c + MIN_BOX_SIZE / 2
    x0 = int(np.clip(np.floor(x0), 0, w - 2))
    y0 = int(np.clip(np.floor(y0), 0, h - 2))
    x1 = int(np.clip(np.ceil(x1), x0 + 1, w))
    y1 = int(np.clip(np.ceil(y1), y0 + 1, h))
    return BoundingBox(x0, y0, x1, y1)


def second_stage_match(query: np.ndarray, map_img: MapImage, qbox: BoundingBox,
                       mbox: BoundingBox, max_kp: int = 512, ratio: float = 0.85):
    """Re-extract and match features inside the two boxes.

    Returns (MatchSet, query features, map features) with keypoint
    coordinates translated back into the original image frames."""
    qcrop = query[qbox.y_min : qbox.y_max, qbox.x_min : qbox.x_max]
    mcrop = map_img.intensity[mbox.y_min : mbox.y_max, mbox.x_min : mbox.x_max]
    qf = extract_local(qcrop, max_kp).translated(qbox.x_min, qbox.y_min)
    mf = extract_local(mcrop, max_kp).translated(mbox.x_min, mbox.y_min)
    return match_features(qf, mf, ratio), qf, mf


def lift_2d3d(matches: MatchSet, qfeats: LocalFeatureSet, mfeats: LocalFeatureSet,
              map_img: MapImage, db, stage: int = FIRST_STAGE) -> list[Correspondence2D3D]:
    """Lift 2D-2D matches to 2D-3D via the map image's point-id buffer.

    The id is read at the rounded map keypoint; empty pixels fall back to
    the nearest valid pixel within lift_radius (L-inf window, nearest
    Euclidean wins, lower id breaks ties).  Unliftable matches drop."""
    radius = db.config.association.lift_radius
    h, w = map_img.point_id.shape
    out: list[Correspondence2D3D] = []
    for qi, mi in matches.pairs:
        mx, my = mfeats.keypoints[mi]
        ix = int(np.clip(np.floor(mx + 0.5), 0, w - 1))
        iy = int(np.clip(np.floor(my + 0.5), 0, h - 1))
        pid = _pick_point(map_img.point_id, ix, iy, radius)
        if pid is None:
            continue
        qx, qy = qfeats.keypoints[qi]
        out.append(Correspondence2D3D(
            query_px=(float(qx), float(qy)),
            point_id=pid,
            point_xyz=db.cloud.xyz[db.id_index[pid]],
            covis=int(db.covis.get(pid, 0)),
            stage=stage,
        ))
    return out


def _pick_point(pid_buf: np.ndarray, ix: int, iy: int, radius: int):
    h, w = pid_buf.shape
    if pid_buf[iy, ix] != NO_POINT:
        return int(pid_buf[iy, ix])
    y0, y1 = max(iy - radius, 0), min(iy + radius + 1, h)
    x0, x1 = max(ix - radius, 0), min(ix + radius + 1, w)
    window = pid_buf[y0:y1, x0:x1]
    ys, xs = np.nonzero(window != NO_POINT)
    if ys.size == 0:
        return None
    d2 = (ys + y0 - iy) ** 2 + (xs + x0 - ix) ** 2
    ids = window[ys, xs]
    best = np.lexsort((ids, d2))[0]
    return int(ids[best])


def concat_stages(first: list[Correspondence2D3D],
                  second: list[Correspondence2D3D]) -> list[Correspondence2D3D]:
    """Union of both stages; a second-stage entry duplicates a first-stage
    one when it shares the point id and lies within 1 px of its query pixel."""
    out = list(first)
    for c in second:
        dup = any(
            c.point_id == f.point_id
            and abs(c.query_px[0] - f.query_px[0]) <= 1.0
            and abs(c.query_px[1] - f.query_px[1]) <= 1.0
            for f in first
        )
        if not dup:
            out.append(c)
    return out


def covisibility_filter(corrs: list[Correspondence2D3D], min_covis: int) -> list[Correspondence2D3D]:
    """Keep correspondences with covis >= min_covis, relaxing the threshold
    one step at a time so at least 6 survive whenever 6 existed."""
    kept: list[Correspondence2D3D] = []
    for thresh in range(max(min_covis, 1), 0, -1):
        kept = [c for c in corrs if c.covis >= thresh]
        if len(kept) >= 6:
            return kept
    return kept
