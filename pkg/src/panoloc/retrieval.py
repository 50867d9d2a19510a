"""Coarse retrieval: cube-patch similarity search and covisibility clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panoloc.features import similarity

NOISE = -1


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 50
    top_k_prime: int = 10
    dbscan_eps: float = 2.5       # meters between projecting poses
    dbscan_min_pts: int = 2

    def __post_init__(self):
        if not (self.top_k >= self.top_k_prime >= 1):
            raise ValueError("need top_k >= top_k_prime >= 1")
        if self.dbscan_eps <= 0:
            raise ValueError("dbscan_eps must be positive")


@dataclass
class Candidate:
    image_id: int
    best_patch: int   # 0..3
    score: float
    cluster_label: int = NOISE


def retrieve_topk(qdesc: np.ndarray, db, k: int) -> list[Candidate]:
    """Top-k images by max similarity over their four cube patches.

    Ties break toward the lower image id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cands = []
    for img in db.images:
        patch_scores = [similarity(qdesc, db.global_feats[img.image_id][p]) for p in range(4)]
        best = int(np.argmax(patch_scores))
        cands.append(Candidate(img.image_id, best, float(patch_scores[best])))
    cands.sort(key=lambda c: (-c.score, c.image_id))
    return cands[:k]


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Euclidean DBSCAN, deterministic: seeds scanned and expanded in
    index order.  Returns labels with -1 for noise."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    neighbors = [np.nonzero(d2[i] <= eps * eps)[0] for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    cluster = 0
    visited = np.zeros(n, dtype=bool)
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = list(neighbors[i])
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == NOISE:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            if core[j]:
                queue.extend(neighbors[j])
        cluster += 1
    return labels


def covisibility_cluster(cands: list[Candidate], db, cfg: RetrievalConfig) -> list[Candidate]:
    """Select top-k' candidates from the dominant spatial cluster.

    Clusters of candidate projecting poses are ranked by (size, best
    member score); within the winner, candidates keep score order.  If
    everything is noise, fall back to the plain top-k' by score."""
    if not cands:
        return []
    positions = np.stack([db.images[c.image_id].pose.translation for c in cands])
    labels = dbscan(positions, cfg.dbscan_eps, cfg.dbscan_min_pts)
    for c, lab in zip(cands, labels):
        c.cluster_label = int(lab)

    clustered = [c for c in cands if c.cluster_label != NOISE]
    if not clustered:
        return cands[: cfg.top_k_prime]

    by_label: dict[int, list[Candidate]] = {}
    for c in clustered:
        by_label.setdefault(c.cluster_label, []).append(c)
    best_label = min(
        by_label,
        key=lambda lab: (-len(by_label[lab]), -max(c.score for c in by_label[lab]), lab),
    )
    winners = sorted(by_label[best_label], key=lambda c: (-c.score, c.image_id))
    return winners[: cfg.top_k_prime]
