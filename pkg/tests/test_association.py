"""Match clustering, second-stage densification, 2D-3D lifting, and
covisibility filtering."""

from dataclasses import dataclass, field

import numpy as np
import pytest

from panoloc.association import (FIRST_STAGE, MIN_BOX_SIZE, SECOND_STAGE,
                                 AssociationConfig, BoundingBox,
                                 Correspondence2D3D, cluster_matches,
                                 concat_stages, covisibility_filter, lift_2d3d,
                                 second_stage_match)
from panoloc.config import PipelineConfig
from panoloc.features import LocalFeatureSet, MatchSet
from panoloc.io import PointCloud, Pose
from panoloc.projection import NO_POINT, MapImage


@dataclass
class _StubDB:
    cloud: PointCloud
    covis: dict
    config: PipelineConfig = field(default_factory=PipelineConfig)
    id_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_index:
            self.id_index = {int(pid): i for i, pid in enumerate(self.cloud.ids)}


def _feats_at(xy):
    xy = np.asarray(xy, dtype=float)
    n = xy.shape[0]
    return LocalFeatureSet(xy, np.ones(n), np.zeros((n, 128)))


def _matches(n):
    idx = np.arange(n, dtype=np.int64)
    return MatchSet(np.stack([idx, idx], axis=1), np.ones(n))


def _map_image(pid_buf):
    pid_buf = np.asarray(pid_buf, dtype=np.int64)
    h, w = pid_buf.shape
    return MapImage(np.zeros((h, w), dtype=np.uint8),
                    np.ones((h, w), dtype=np.float32), pid_buf,
                    Pose.identity())


def _db_with_points(n):
    rng = np.random.default_rng(0)
    cloud = PointCloud(np.arange(n, dtype=np.int64), rng.normal(0, 5, (n, 3)),
                       np.ones(n))
    covis = {i: 1 + i % 4 for i in range(n)}
    return _StubDB(cloud, covis)


# ---------------------------------------------------------------------------
# bounding boxes

def test_bounding_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(10, 0, 10, 5)
    box = BoundingBox(1, 2, 11, 22)
    assert box.width == 10 and box.height == 20


def test_association_config_validation():
    with pytest.raises(ValueError):
        AssociationConfig(lift_radius=0)
    with pytest.raises(ValueError):
        AssociationConfig(crop_margin=0.6)


# ---------------------------------------------------------------------------
# cluster_matches

def test_cluster_matches_keeps_dominant_group():
    # 10 coherent matches plus 2 spatially distant stragglers
    coherent_q = [[100 + 5 * i, 100 + 3 * i] for i in range(10)]
    coherent_m = [[300 + 5 * i, 150 + 3 * i] for i in range(10)]
    stray_q = [[900, 50], [50, 440]]
    stray_m = [[900, 400], [1500, 30]]
    qf = _feats_at(coherent_q + stray_q)
    mf = _feats_at(coherent_m + stray_m)
    m = _matches(12)
    cfg = AssociationConfig()
    out = cluster_matches(m, qf, mf, cfg, (480, 960), (480, 1920))
    assert out is not None
    cluster, qbox, mbox = out
    assert len(cluster) == 10
    assert set(cluster.pairs[:, 0]) == set(range(10))
    # boxes cover the coherent hull with margin
    assert qbox.x_min <= 100 and qbox.x_max >= 145
    assert mbox.x_min <= 300 and mbox.x_max >= 345


def test_cluster_matches_too_small_cluster_rejected():
    q = [[100 + 5 * i, 100] for i in range(5)]
    qf = _feats_at(q)
    mf = _feats_at(q)
    m = _matches(5)
    cfg = AssociationConfig(min_cluster_matches=8)
    assert cluster_matches(m, qf, mf, cfg, (480, 960), (480, 1920)) is None


def test_cluster_matches_empty_and_all_noise():
    cfg = AssociationConfig()
    assert cluster_matches(MatchSet.empty(), _feats_at([]), _feats_at([]),
                           cfg, (480, 960), (480, 1920)) is None
    # two far-apart matches: everything is noise at min_pts 4
    qf = _feats_at([[0, 0], [400, 400]])
    mf = _feats_at([[0, 0], [1400, 400]])
    assert cluster_matches(_matches(2), qf, mf, cfg, (480, 960), (480, 1920)) is None


def test_cluster_matches_degenerate_hull_inflated_to_min_box():
    # 8 matches at nearly the same location
    pts = [[200.0 + 0.1 * i, 200.0] for i in range(8)]
    qf = _feats_at(pts)
    mf = _feats_at(pts)
    out = cluster_matches(_matches(8), qf, mf, AssociationConfig(),
                          (480, 960), (480, 1920))
    assert out is not None
    _, qbox, _ = out
    assert qbox.width >= MIN_BOX_SIZE
    assert qbox.height >= MIN_BOX_SIZE


def test_cluster_matches_box_clamped_to_image():
    pts = [[2.0 + i, 2.0] for i in range(8)]
    out = cluster_matches(_matches(8), _feats_at(pts), _feats_at(pts),
                          AssociationConfig(), (480, 960), (480, 1920))
    _, qbox, _ = out
    assert qbox.x_min >= 0 and qbox.y_min >= 0
    assert qbox.x_max <= 960 and qbox.y_max <= 480


# ---------------------------------------------------------------------------
# second stage

def test_second_stage_identity_crop_matches_everywhere():
    rng = np.random.default_rng(5)
    base = rng.integers(0, 256, (20, 20))
    img = np.kron(base, np.ones((8, 8))).astype(np.uint8)  # 160x160
    map_img = _map_image(np.zeros(img.shape, dtype=np.int64))
    map_img.intensity = img.copy()
    box = BoundingBox(20, 20, 140, 140)
    matches, qf, mf = second_stage_match(img, map_img, box, box)
    assert len(matches) > 0
    # identical crops: every match pairs a keypoint with itself
    for qi, mi in matches.pairs:
        np.testing.assert_allclose(qf.keypoints[qi], mf.keypoints[mi])
    # translated coordinates land inside the boxes in the full frame
    assert qf.keypoints[:, 0].min() >= box.x_min
    assert qf.keypoints[:, 1].min() >= box.y_min
    assert qf.keypoints[:, 0].max() < box.x_max
    assert qf.keypoints[:, 1].max() < box.y_max


# ---------------------------------------------------------------------------
# lifting

def test_lift_exact_pixel():
    db = _db_with_points(10)
    pid = np.full((40, 40), NO_POINT, dtype=np.int64)
    pid[20, 30] = 7
    img = _map_image(pid)
    qf = _feats_at([[5.0, 6.0]])
    mf = _feats_at([[30.0, 20.0]])
    out = lift_2d3d(_matches(1), qf, mf, img, db, FIRST_STAGE)
    assert len(out) == 1
    c = out[0]
    assert c.point_id == 7
    assert c.query_px == (5.0, 6.0)
    np.testing.assert_array_equal(c.point_xyz, db.cloud.xyz[7])
    assert c.covis == db.covis[7]
    assert c.stage == FIRST_STAGE


def test_lift_keypoint_rounding():
    db = _db_with_points(10)
    pid = np.full((40, 40), NO_POINT, dtype=np.int64)
    pid[20, 30] = 3
    img = _map_image(pid)
    # 29.6 rounds to 30, 19.5 rounds to 20
    mf = _feats_at([[29.6, 19.5]])
    out = lift_2d3d(_matches(1), _feats_at([[0.0, 0.0]]), mf, img, db)
    assert len(out) == 1 and out[0].point_id == 3


def test_lift_radius_fallback_nearest_euclidean():
    db = _db_with_points(10)
    pid = np.full((40, 40), NO_POINT, dtype=np.int64)
    pid[20, 32] = 4   # 2 px right of keypoint
    pid[22, 30] = 5   # 2 px below, same L2: tie -> lower id
    pid[21, 30] = 6   # 1 px below: strictly nearer, wins
    img = _map_image(pid)
    mf = _feats_at([[30.0, 20.0]])
    out = lift_2d3d(_matches(1), _feats_at([[0.0, 0.0]]), mf, img, db)
    assert out[0].point_id == 6


def test_lift_tie_breaks_to_lower_id():
    db = _db_with_points(10)
    pid = np.full((40, 40), NO_POINT, dtype=np.int64)
    pid[20, 32] = 9
    pid[20, 28] = 2  # same distance, lower id
    img = _map_image(pid)
    mf = _feats_at([[30.0, 20.0]])
    out = lift_2d3d(_matches(1), _feats_at([[0.0, 0.0]]), mf, img, db)
    assert out[0].point_id == 2


def test_lift_drops_unliftable():
    db = _db_with_points(10)
    pid = np.full((40, 40), NO_POINT, dtype=np.int64)
    pid[0, 0] = 1  # far from every keypoint
    img = _map_image(pid)
    mf = _feats_at([[30.0, 20.0]])
    out = lift_2d3d(_matches(1), _feats_at([[0.0, 0.0]]), mf, img, db)
    assert out == []


def test_lift_respects_config_radius():
    from dataclasses import replace
    db = _db_with_points(10)
    cfg = db.config
    db.config = replace(cfg, association=replace(cfg.association, lift_radius=1))
    pid = np.full((40, 40), NO_POINT, dtype=np.int64)
    pid[20, 32] = 4  # 2 px away: outside radius 1
    img = _map_image(pid)
    mf = _feats_at([[30.0, 20.0]])
    assert lift_2d3d(_matches(1), _feats_at([[0.0, 0.0]]), mf, img, db) == []


# ---------------------------------------------------------------------------
# stage merge and covisibility filter

def _corr(px, pid, covis=2, stage=FIRST_STAGE):
    return Correspondence2D3D(query_px=px, point_id=pid,
                              point_xyz=np.zeros(3), covis=covis, stage=stage)


def test_concat_stages_dedup_rules():
    first = [_corr((10.0, 10.0), 1), _corr((50.0, 50.0), 2)]
    second = [
        _corr((10.5, 10.5), 1, stage=SECOND_STAGE),   # same pid, <= 1 px: dup
        _corr((30.0, 30.0), 1, stage=SECOND_STAGE),   # same pid, far: kept
        _corr((10.5, 10.5), 3, stage=SECOND_STAGE),   # near but new pid: kept
    ]
    out = concat_stages(first, second)
    assert len(out) == 4
    assert out[0] is first[0] and out[1] is first[1]
    assert {(c.point_id, c.query_px) for c in out[2:]} == {
        (1, (30.0, 30.0)), (3, (10.5, 10.5))}


def test_concat_stages_empty_sides():
    c = [_corr((1.0, 1.0), 1)]
    out = concat_stages(c, [])
    assert len(out) == 1 and out[0] is c[0]
    out = concat_stages([], c)
    assert len(out) == 1 and out[0] is c[0]


def test_covis_filter_keeps_high_covis():
    corrs = [_corr((float(i), 0.0), i, covis=1 + i % 3) for i in range(18)]
    out = covisibility_filter(corrs, min_covis=2)
    assert len(out) == 12
    assert all(c.covis >= 2 for c in out)


def test_covis_filter_relaxes_to_keep_six():
    # only 3 pass covis >= 2, but 7 exist at covis >= 1
    corrs = [_corr((float(i), 0.0), i, covis=2) for i in range(3)]
    corrs += [_corr((float(i), 1.0), 10 + i, covis=1) for i in range(4)]
    out = covisibility_filter(corrs, min_covis=2)
    assert len(out) == 7


def test_covis_filter_returns_all_when_fewer_than_six():
    corrs = [_corr((float(i), 0.0), i, covis=1) for i in range(4)]
    out = covisibility_filter(corrs, min_covis=3)
    assert len(out) == 4


def test_covis_filter_empty():
    assert covisibility_filter([], 2) == []
