"""Detail-aware nearest-neighbour recoloring and geometry/color error analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .neighbors import NeighborIndex
from .voxel import VoxelFrame


@dataclass
class NeighborSet:
    """``q`` nearest references per query, closest first.

    ``n_min`` counts the leading candidates that share the exact minimum
    squared distance; ``clamped`` records that ``q`` exceeded the reference
    size.
    """

    indices: np.ndarray
    sqdist: np.ndarray
    n_min: np.ndarray
    q: int
    clamped: bool

    def minimum_members(self, row: int) -> np.ndarray:
        return self.indices[row, : self.n_min[row]]


def _min_mask(index: NeighborIndex, d: np.ndarray) -> np.ndarray:
    return index.is_tie(d, d[:, :1])


def knn(query, reference, q: int, index: NeighborIndex | None = None) -> NeighborSet:
    """Exact ``q`` nearest neighbours ordered by (distance, Morton key)."""
    if q < 1:
        raise ValueError("q must be >= 1")
    ref_coords = reference.coords if isinstance(reference, VoxelFrame) else np.asarray(reference)
    index = index or NeighborIndex(ref_coords)
    query = np.asarray(query).reshape(-1, 3)
    idx, d = index.knn(query, q)
    n_min = _min_mask(index, d).sum(axis=1)
    return NeighborSet(idx, d, n_min, idx.shape[1], q > len(index))


def da_knn_recolor(g_enh: VoxelFrame, p_orig: VoxelFrame, q: int = 8) -> VoxelFrame:
    """Give each enhanced point the plain mean color of its closest originals.

    Among the ``q`` nearest originals only those at the exact minimum
    distance contribute. Contributions are summed in Morton order, then
    divided, so results are reproducible bit for bit.
    """
    if p_orig.attrs is None:
        raise ShapeMismatch("source frame has no attributes")
    index = NeighborIndex(p_orig.coords)
    ns = knn(g_enh.coords, p_orig, q, index)
    mask = np.arange(ns.q)[None, :] < ns.n_min[:, None]
    acc = np.zeros((len(g_enh), p_orig.attrs.shape[1]))
    for rank in range(ns.q):
        contrib = p_orig.attrs[ns.indices[:, rank]]
        acc[mask[:, rank]] += contrib[mask[:, rank]]
    return g_enh.with_attrs(acc / ns.n_min[:, None], p_orig.color_space)


@dataclass
class CorrelationResult:
    delta_geo: np.ndarray
    delta_att: np.ndarray
    slope: float
    pearson_r: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta_geo", "delta_att"])
            for g, a in zip(self.delta_geo, self.delta_att):
                w.writerow([repr(float(g)), repr(float(a))])


def fit_through_origin(x: np.ndarray, y: np.ndarray) -> float:
    sxx = float(np.dot(x, x))
    return float(np.dot(x, y)) / sxx if sxx > 0 else 0.0


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def correlation_analysis(p_orig: VoxelFrame, p_enh: VoxelFrame) -> CorrelationResult:
    """Per enhanced point: distance and color difference to its nearest original.

    Returns the samples with the least-squares slope of a line through the
    origin and the Pearson coefficient (NaN when either axis is constant).
    """
    if p_orig.attrs is None or p_enh.attrs is None:
        raise ShapeMismatch("both frames need attributes")
    index = NeighborIndex(p_orig.coords)
    nn, d2 = index.nearest(p_enh.coords)
    dgeo = np.sqrt(d2.astype(np.float64))
    datt = np.linalg.norm(p_orig.attrs[nn] - p_enh.attrs, axis=1)
    slope = fit_through_origin(dgeo, datt)
    return CorrelationResult(dgeo, datt, slope, pearson(dgeo, datt))
