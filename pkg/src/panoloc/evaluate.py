"""Retrieval and relocalization metrics.

Recall@K for coarse retrieval; relocalization recall at paired
translation/rotation thresholds plus translation error statistics over
the queries passing the loosest gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from panoloc.io import Pose

DEFAULT_RR_THRESHOLDS = ((0.5, 1.0), (1.0, 3.0), (3.0, 5.0))
DEFAULT_K_LIST = (1, 5, 10, 30, 50)
RETRIEVAL_DIST_THRESH_M = 5.0


@dataclass
class PoseError:
    trans_err: float   # meters
    rot_err: float     # degrees


@dataclass
class EvalReport:
    recall_at_k: dict[int, float] = field(default_factory=dict)
    rr: dict[tuple[float, float], float] = field(default_factory=dict)
    rmse: float = float("nan")
    mse: float = float("nan")
    mae: float = float("nan")
    max_err: float = float("nan")
    n_queries: int = 0
    n_gated: int = 0


def pose_error(pred: Pose, gt: Pose) -> PoseError:
    trans = float(np.linalg.norm(pred.translation - gt.translation))
    cos_angle = (np.trace(pred.rotation @ gt.rotation.T) - 1.0) / 2.0
    rot = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
    return PoseError(trans, rot)


def recall_at_k(candidate_positions: list[np.ndarray], gt_positions: list[np.ndarray],
                k_list=DEFAULT_K_LIST,
                dist_thresh_m: float = RETRIEVAL_DIST_THRESH_M) -> dict[int, float]:
    """Fraction of queries with a candidate pose within dist_thresh_m among
    the first K.

    candidate_positions: per query, (N, 3) projecting-pose translations in
    retrieval score order."""
    if not candidate_positions:
        raise ValueError("empty query set")
    if len(candidate_positions) != len(gt_positions):
        raise ValueError("query/ground-truth count mismatch")
    out: dict[int, float] = {}
    for k in k_list:
        hits = 0
        for cands, gt in zip(candidate_positions, gt_positions):
            cands = np.atleast_2d(np.asarray(cands, dtype=np.float64))
            if cands.shape[0] and np.any(
                np.linalg.norm(cands[:k] - np.asarray(gt), axis=1) <= dist_thresh_m
            ):
                hits += 1
        out[k] = hits / len(candidate_positions)
    return out


def reloc_recall(pred_poses: list[Pose | None], gt_poses: list[Pose],
                 thresholds=DEFAULT_RR_THRESHOLDS) -> EvalReport:
    """RR at each (trans, rot) threshold; a None prediction (failed query)
    counts as a miss.  Error stats use translation errors of the queries
    passing the loosest gate."""
    if len(pred_poses) != len(gt_poses):
        raise ValueError("query/ground-truth count mismatch")
    errors = [
        pose_error(p, g) if p is not None else None
        for p, g in zip(pred_poses, gt_poses)
    ]
    n = len(errors)
    report = EvalReport(n_queries=n)
    for tau_t, tau_r in thresholds:
        ok = sum(1 for e in errors if e is not None
                 and e.trans_err <= tau_t and e.rot_err <= tau_r)
        report.rr[(tau_t, tau_r)] = ok / n if n else 0.0

    loose_t, loose_r = max(thresholds, key=lambda tr: tr[0])
    gated = np.array([
        e.trans_err for e in errors
        if e is not None and e.trans_err <= loose_t and e.rot_err <= loose_r
    ])
    report.n_gated = gated.size
    if gated.size:
        report.mse = float(np.mean(gated ** 2))
        report.rmse = math.sqrt(report.mse)
        report.mae = float(np.mean(gated))
        report.max_err = float(gated.max())
    return report
