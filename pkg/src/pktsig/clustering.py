"""DBSCAN over packet pairs with a direction-aware Euclidean distance."""

from __future__ import annotations

import math
from collections import defaultdict, deque
from typing import Hashable, Sequence

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1
_UNSEEN = -2


def pattern_distance(pattern1: Hashable, lengths1: Sequence[int],
                     pattern2: Hashable, lengths2: Sequence[int]) -> float:
    """Euclidean distance between length tuples, infinite across patterns."""
    if pattern1 != pattern2:
        return math.inf
    return math.hypot(*(a - b for a, b in zip(lengths1, lengths2)))


def neighborhoods(points: np.ndarray, patterns: Sequence[Hashable], eps: float) -> list[np.ndarray]:
    """Indices within eps of each point (itself included), ascending.

    Points with different patterns are never neighbors. Candidates come
    from a KD-tree and are re-checked on exact integer squared distances.
    """
    points = np.asarray(points, dtype=np.int64).reshape(len(patterns), -1)
    out: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * len(patterns)
    groups: dict[Hashable, list[int]] = defaultdict(list)
    for i, pat in enumerate(patterns):
        groups[pat].append(i)
    eps2 = eps * eps
    for idxs in groups.values():
        idxs = np.asarray(idxs, dtype=np.int64)
        pts = points[idxs]
        tree = cKDTree(pts.astype(np.float64))
        cands = tree.query_ball_point(pts.astype(np.float64), r=eps + 1e-6)
        for local, cand in enumerate(cands):
            cand = np.asarray(cand, dtype=np.int64)
            d2 = ((pts[cand] - pts[local]) ** 2).sum(axis=1)
            out[idxs[local]] = np.sort(idxs[cand[d2 <= eps2]])
    return out


def dbscan(points: np.ndarray, patterns: Sequence[Hashable], eps: float,
           min_pts: int) -> tuple[np.ndarray, np.ndarray]:
    """Label points in their given order; returns (labels, core mask).

    Clusters are numbered in the order their first core point is visited
    and a border point belongs to the first cluster that reaches it, so the
    result depends only on the input order.
    """
    m = len(patterns)
    labels = np.full(m, _UNSEEN, dtype=np.int64)
    if m == 0:
        return labels, np.zeros(0, dtype=bool)
    nbrs = neighborhoods(points, patterns, eps)
    core = np.array([len(n) >= min_pts for n in nbrs], dtype=bool)
    cluster = -1
    for i in range(m):
        if labels[i] != _UNSEEN:
            continue
        if not core[i]:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque([i])
        while queue:
            nb = nbrs[queue.popleft()]
            # unvisited points and earlier noise join this cluster; only
            # core points expand it further
            fresh = nb[(labels[nb] == _UNSEEN) | (labels[nb] == NOISE)]
            labels[fresh] = cluster
            queue.extend(fresh[core[fresh]].tolist())
    return labels, core
