"""Exact k-nearest-neighbour queries with a deterministic tie-break.

The kd-tree only proposes candidates. Final ordering is by exact squared
distance, then by point index, so results match a brute-force linear scan
even when several points are equidistant.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_SLACK = 2


class NeighborIndex:
    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries: np.ndarray, k: int, workers: int = 1):
        """Return ``(indices, sq_distances)`` of shape ``(M, k)``, sorted ascending."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        if k > n:
            raise ValueError(f"k={k} exceeds the {n} indexed points")
        m = min(n, k + _SLACK)
        _, cand = self.tree.query(queries, k=m, workers=workers)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(queries), m)
        d2 = np.sum((self.points[cand] - queries[:, None, :]) ** 2, axis=-1)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        if m < n:
            # the k-th distance may be shared by points the tree did not return
            spill = np.nonzero(d2[:, m - 1] <= d2[:, k - 1] * (1.0 + 1e-12))[0]
            for row in spill:
                idx, dist = brute_force_knn(self.points, queries[row], k)
                cand[row, :k] = idx
                d2[row, :k] = dist
        return cand[:, :k], d2[:, :k]


def brute_force_knn(points: np.ndarray, query: np.ndarray, k: int):
    d2 = np.sum((points - query) ** 2, axis=1)
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return order, d2[order]


def unique_first(points: np.ndarray) -> np.ndarray:
    """Indices of the first occurrence of every distinct position, ascending."""
    _, first = np.unique(points, axis=0, return_index=True)
    return np.sort(first)
