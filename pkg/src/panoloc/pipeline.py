"""Online relocalization: retrieval, association, and pose estimation for
one query image against a prebuilt database."""

from __future__ import annotations

import numpy as np

from panoloc.association import (FIRST_STAGE, SECOND_STAGE, Correspondence2D3D,
                                 cluster_matches, concat_stages,
                                 covisibility_filter, lift_2d3d,
                                 second_stage_match)
from panoloc.config import PipelineConfig
from panoloc.features import (bilinear_resize, get_global_extractor,
                              get_local_extractor, match_features)
from panoloc.io import CameraIntrinsics, Pose
from panoloc.mapdb import Database
from panoloc.pose import (STATUS_FAILED, RelocalizationResult, StageStats,
                          pnp_ransac)
from panoloc.projection import SENSOR_TO_CAMERA, clahe
from panoloc.retrieval import Candidate, covisibility_cluster, retrieve_topk


def preprocess_query(img: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Query-side normalization: CLAHE when equalization is enabled."""
    if cfg.use_equalization:
        return clahe(img, cfg.clahe_clip_limit, cfg.clahe_tiles)
    return img


def retrieval_descriptor(img: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Global descriptor of a query image.

    The central square crop is described, so the footprint compared
    against the (square) cube-face patches has matching geometry; a
    plain resize of a wide query would squash it anisotropically."""
    h, w = img.shape
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    img = img[y0:y0 + side, x0:x0 + side]
    s = cfg.projection.face_size
    if side != s:
        img = np.clip(np.floor(bilinear_resize(img, s, s) + 0.5), 0, 255).astype(np.uint8)
    img = preprocess_query(img, cfg)
    return get_global_extractor(cfg.global_extractor)(img)


def retrieve_candidates(query_img: np.ndarray, db: Database,
                        cfg: PipelineConfig) -> list[Candidate]:
    qdesc = retrieval_descriptor(query_img, cfg)
    cands = retrieve_topk(qdesc, db, cfg.retrieval.top_k)
    if cfg.use_covis_cluster:
        return covisibility_cluster(cands, db, cfg.retrieval)
    return cands[: cfg.retrieval.top_k_prime]


def associate_candidate(query_proc: np.ndarray, qfeats, db: Database,
                        image_id: int, cfg: PipelineConfig,
                        stats: StageStats, dump_cb=None) -> list[Correspondence2D3D]:
    """Two-stage 2D-3D association of one retrieval candidate."""
    map_img = db.images[image_id]
    mfeats = db.local_feats[image_id]
    matches = match_features(qfeats, mfeats, cfg.features.match_ratio)
    stats.first_stage_matches += len(matches)

    clustered = cluster_matches(matches, qfeats, mfeats, cfg.association,
                                query_proc.shape, map_img.intensity.shape)
    if clustered is None:
        return []
    cluster, qbox, mbox = clustered
    if dump_cb is not None:
        dump_cb(image_id, query_proc, map_img, cluster, qfeats, mfeats)
    first = lift_2d3d(cluster, qfeats, mfeats, map_img, db, FIRST_STAGE)

    if not cfg.use_two_stage:
        stats.lifted += len(first)
        return first

    matches2, qf2, mf2 = second_stage_match(
        query_proc, map_img, qbox, mbox,
        max_kp=cfg.features.second_max_keypoints, ratio=cfg.features.match_ratio)
    stats.second_stage_matches += len(matches2)
    second = lift_2d3d(matches2, qf2, mf2, map_img, db, SECOND_STAGE)
    merged = concat_stages(first, second)
    stats.lifted += len(merged)
    return merged


def relocalize_query(query_img: np.ndarray, db: Database, K: CameraIntrinsics,
                     cfg: PipelineConfig, dump_cb=None) -> RelocalizationResult:
    """Full online pipeline for one query; never raises on weak inputs."""
    stats = StageStats()
    candidates = retrieve_candidates(query_img, db, cfg)
    if not candidates:
        return RelocalizationResult(STATUS_FAILED, reason="no retrieval candidates",
                                    stats=stats)
    query_proc = preprocess_query(query_img, cfg)
    qfeats = get_local_extractor(cfg.local_extractor)(query_proc, cfg.max_keypoints)

    corrs: list[Correspondence2D3D] = []
    for cand in candidates:
        stats.candidates_tried += 1
        corrs.extend(associate_candidate(query_proc, qfeats, db, cand.image_id,
                                         cfg, stats, dump_cb))
    if cfg.use_covis_filter:
        corrs = covisibility_filter(corrs, cfg.association.min_covis)
    stats.filtered = len(corrs)
    if len(corrs) < 4:
        return RelocalizationResult(STATUS_FAILED, reason="insufficient matches",
                                    stats=stats, correspondences=corrs)
    result = pnp_ransac(corrs, K, cfg.ransac)
    result.stats = stats
    result.correspondences = corrs
    return result


def camera_pose_in_map(map_to_camera: Pose) -> Pose:
    """Convert the estimated map->camera transform into the sensor pose in
    map coordinates (same convention as trajectory files)."""
    R_cm = map_to_camera.rotation
    t_cm = map_to_camera.translation
    R_sensor = R_cm.T @ SENSOR_TO_CAMERA
    t_sensor = -R_cm.T @ t_cm
    return Pose(R_sensor, t_sensor)


def map_to_camera_from_sensor_pose(sensor_pose: Pose) -> Pose:
    """Inverse of :func:`camera_pose_in_map`."""
    R_cm = SENSOR_TO_CAMERA @ sensor_pose.rotation.T
    t_cm = -R_cm @ sensor_pose.translation
    return Pose(R_cm, t_cm)
