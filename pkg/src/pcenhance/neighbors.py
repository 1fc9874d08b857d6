"""Exact nearest-neighbour queries with deterministic tie-breaking.

Candidates come from a scipy ``cKDTree`` (or an exhaustive scan for small
references); exact squared distances are then recomputed from the integer
coordinates and ties are ordered by Morton key.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .voxel import morton_keys

BRUTE_FORCE_BELOW = 64
FLOAT_TIE_RTOL = 1e-9


class NeighborIndex:
    """Immutable search structure over a reference coordinate set."""

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords)
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise ValueError("reference set must be a non-empty (N, 3) array")
        self.coords = coords
        self.exact = np.issubdtype(coords.dtype, np.integer)
        if self.exact and coords.min() >= 0:
            self.keys = morton_keys(coords)
        else:
            self.keys = np.arange(len(coords), dtype=np.uint64)
        self.tree = None if len(coords) < BRUTE_FORCE_BELOW else cKDTree(coords.astype(np.float64))

    def __len__(self):
        return self.coords.shape[0]

    def sqdist(self, query: np.ndarray, idx: np.ndarray) -> np.ndarray:
        diff = self.coords[idx] - query[:, None, :] if idx.ndim == 2 else self.coords[idx] - query
        return np.sum(diff.astype(np.int64 if self.exact else np.float64) ** 2, axis=-1)

    def is_tie(self, d: np.ndarray, dmin: np.ndarray) -> np.ndarray:
        if self.exact:
            return d == dmin
        return d <= dmin * (1.0 + FLOAT_TIE_RTOL)

    def _raw_knn(self, query: np.ndarray, k: int):
        if self.tree is None:
            diff = query[:, None, :].astype(np.float64) - self.coords[None].astype(np.float64)
            d = np.sum(diff ** 2, axis=2)
            idx = np.argsort(d, axis=1, kind="stable")[:, :k]
        else:
            _, idx = self.tree.query(query.astype(np.float64), k=k)
            idx = np.asarray(idx).reshape(query.shape[0], k)
        return idx

    def knn(self, query: np.ndarray, k: int):
        """The ``k`` nearest per query ordered by (distance, Morton key).

        Returns ``(indices, squared_distances)``; ``k`` is clamped to the
        reference size.
        """
        query = np.asarray(query).reshape(-1, 3)
        k = min(k, len(self))
        # over-fetch one so a tie straddling position k can be detected
        kk = min(k + 1, len(self))
        idx = self._raw_knn(query, kk)
        d = self.sqdist(query, idx)
        order = np.lexsort((self.keys[idx], d), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        if kk > k:
            straddle = self.is_tie(d[:, k], d[:, k - 1])
            for row in np.flatnonzero(straddle):
                idx[row], d[row] = self._exact_knn_row(query[row], k, kk)
        return idx[:, :k], d[:, :k]

    def _exact_knn_row(self, q, k, kk):
        # boundary distance is tied: gather every point within it and re-sort
        idx = self._raw_knn(q[None], kk)[0]
        dk = self.sqdist(q, idx).max()
        if self.tree is None:
            cand = np.arange(len(self))
        else:
            r = np.sqrt(float(dk)) * (1 + 1e-7) + 1e-9
            cand = np.asarray(self.tree.query_ball_point(q.astype(np.float64), r), dtype=np.int64)
        d = self.sqdist(q, cand)
        order = np.lexsort((self.keys[cand], d))[:kk]
        out_idx = np.zeros(kk, dtype=np.int64)
        out_d = np.zeros(kk, dtype=d.dtype)
        out_idx[: order.size] = cand[order]
        out_d[: order.size] = d[order]
        return out_idx, out_d

    def nearest(self, query: np.ndarray):
        """Single nearest neighbour per query with Morton tie-break."""
        idx, d = self.knn(query, 1)
        return idx[:, 0], d[:, 0]
