"""Shared fixtures: small synthetic scenes and databases reused across
module tests, plus the full-size end-to-end suite for the acceptance run."""

from __future__ import annotations

import numpy as np
import pytest

from panoloc.config import PipelineConfig
from panoloc.harness import (DEFAULT_QUERY_INTRINSICS, SceneConfig,
                             generate_scene, generate_trajectory, render_query)
from panoloc.io import PointCloud, Pose, Trajectory
from panoloc.mapdb import build_database
from panoloc.projection import equalize_map_intensity


@pytest.fixture(scope="session")
def small_scene_cfg() -> SceneConfig:
    return SceneConfig(seed=0, extent=20.0, wall_count=6, points_per_m2=150.0)


@pytest.fixture(scope="session")
def small_cloud(small_scene_cfg) -> PointCloud:
    return generate_scene(small_scene_cfg)


@pytest.fixture(scope="session")
def small_traj(small_scene_cfg) -> Trajectory:
    return generate_trajectory(small_scene_cfg, 5, "straight", 1.0)


@pytest.fixture(scope="session")
def small_config() -> PipelineConfig:
    return PipelineConfig()


@pytest.fixture(scope="session")
def small_db(small_cloud, small_traj, small_config):
    return build_database(small_cloud, small_traj, small_config)


@pytest.fixture(scope="session")
def small_query(small_db, small_traj):
    """One query rendered at the first database pose, mild jitter."""
    img, gt = render_query(small_db.cloud, small_traj.poses[2],
                           DEFAULT_QUERY_INTRINSICS, jitter=(0.2, 1.0),
                           seed=7, gain=1.1, bias=5.0)
    return img, gt


def make_grid_cloud(n_side: int = 10, spacing: float = 0.5,
                    distance: float = 8.0, seed: int = 0) -> PointCloud:
    """Flat textured wall in front of the origin, equalized; handy for
    projection and association tests."""
    rng = np.random.default_rng(seed)
    ys, zs = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij")
    ys = (ys.ravel() - n_side / 2.0) * spacing
    zs = (zs.ravel() - n_side / 2.0) * spacing
    xyz = np.stack([np.full(ys.size, distance), ys, zs], axis=1)
    raw = rng.uniform(0.0, 1.0, ys.size)
    cloud = PointCloud(np.arange(ys.size, dtype=np.int64), xyz, raw)
    return equalize_map_intensity(cloud)


def random_pose(rng: np.random.Generator, trans_scale: float = 2.0) -> Pose:
    from panoloc.pose import so3_exp
    w = rng.normal(0.0, 0.5, 3)
    t = rng.normal(0.0, trans_scale, 3)
    return Pose(so3_exp(w), t)
