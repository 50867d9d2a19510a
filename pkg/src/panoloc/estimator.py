"""Scikit-learn style estimator facade over the relocalization pipeline.

`fit` builds the map database from a point cloud and mapping trajectory;
`predict` relocalizes grayscale query images, returning the estimated
sensor poses in map coordinates (None for failed queries).
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from panoloc.config import PipelineConfig
from panoloc.io import CameraIntrinsics, PointCloud, Pose, Trajectory
from panoloc.mapdb import build_database
from panoloc.pipeline import camera_pose_in_map, relocalize_query
from panoloc.pose import STATUS_OK


def _check_query_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("query images must be nonempty 2D grayscale arrays")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("query image values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


class CrossModalRelocalizer(BaseEstimator):
    """Visual relocalization against a LiDAR intensity map.

    Parameters mirror the pipeline configuration; `config` may supply a
    full :class:`PipelineConfig`, with the scalar parameters applied on
    top of it.
    """

    def __init__(self, intrinsics: CameraIntrinsics | None = None,
                 config: PipelineConfig | None = None,
                 face_size: int = 480, sample_interval_m: float = 1.0,
                 max_dist_m: float = 50.0, top_k: int = 50, top_k_prime: int = 10,
                 use_hec: bool = True, use_equalization: bool = True,
                 use_covis_cluster: bool = True, use_two_stage: bool = True,
                 use_covis_filter: bool = True, seed: int = 0):
        self.intrinsics = intrinsics
        self.config = config
        self.face_size = face_size
        self.sample_interval_m = sample_interval_m
        self.max_dist_m = max_dist_m
        self.top_k = top_k
        self.top_k_prime = top_k_prime
        self.use_hec = use_hec
        self.use_equalization = use_equalization
        self.use_covis_cluster = use_covis_cluster
        self.use_two_stage = use_two_stage
        self.use_covis_filter = use_covis_filter
        self.seed = seed

    def _resolved_config(self) -> PipelineConfig:
        cfg = self.config if self.config is not None else PipelineConfig()
        return replace(
            cfg,
            projection=replace(cfg.projection, face_size=self.face_size,
                               use_hec=self.use_hec),
            retrieval=replace(cfg.retrieval, top_k=self.top_k,
                              top_k_prime=self.top_k_prime),
            mapping=replace(cfg.mapping, sample_interval_m=self.sample_interval_m,
                            max_dist_m=self.max_dist_m),
            ransac=replace(cfg.ransac, seed=self.seed),
            pipeline=replace(cfg.pipeline,
                             use_equalization=self.use_equalization,
                             use_covis_cluster=self.use_covis_cluster,
                             use_two_stage=self.use_two_stage,
                             use_covis_filter=self.use_covis_filter),
        )

    def fit(self, cloud: PointCloud, trajectory: Trajectory) -> "CrossModalRelocalizer":
        if not isinstance(cloud, PointCloud):
            raise TypeError("cloud must be a PointCloud")
        if not isinstance(trajectory, Trajectory):
            raise TypeError("trajectory must be a Trajectory")
        cfg = self._resolved_config()
        self.database_ = build_database(cloud, trajectory, cfg)
        self.config_ = cfg
        return self

    def predict(self, images, intrinsics: CameraIntrinsics | None = None) -> list[Pose | None]:
        """Estimated sensor pose in map coordinates per query, None on failure."""
        results = self.relocalize(images, intrinsics)
        return [
            camera_pose_in_map(r.pose) if r.status == STATUS_OK else None
            for r in results
        ]

    def relocalize(self, images, intrinsics: CameraIntrinsics | None = None):
        """Full per-query results with inlier statistics."""
        check_is_fitted(self, "database_")
        K = intrinsics if intrinsics is not None else self.intrinsics
        if K is None:
            raise ValueError("camera intrinsics are required for prediction")
        return [
            relocalize_query(_check_query_image(img), self.database_, K, self.config_)
            for img in images
        ]
