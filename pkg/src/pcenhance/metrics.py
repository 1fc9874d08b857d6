"""Geometry and attribute PSNR, bits per point and Bjøntegaard deltas."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .color import rgb_to_yuv
from .errors import DivisionByZero, EmptyFrame, NoOverlap, OutOfDomain, ShapeMismatch
from .neighbors import NeighborIndex
from .voxel import VoxelFrame

PSNR_INF = float("inf")
CONVENTIONS = ("3peak2", "peak2")
YUV_WEIGHTS = (14.0, 1.0, 1.0)


def psnr(mse: float, peak: float, scale: float = 1.0) -> float:
    """``10 log10(scale * peak^2 / mse)``; zero error gives ``PSNR_INF``."""
    if mse <= 0:
        return PSNR_INF
    return float(10.0 * np.log10(scale * peak * peak / mse))


def geometry_peak(bit_depth: int) -> float:
    return float((1 << bit_depth) - 1)


def _check_nonempty(*frames):
    for f in frames:
        if len(f) == 0:
            raise EmptyFrame("metric input frame is empty")


@dataclass
class GeometryPsnr:
    """One-directional and symmetric PSNRs with the underlying MSEs."""

    ref_to_test: float
    test_to_ref: float
    symmetric: float
    mse_ref_to_test: float
    mse_test_to_ref: float
    degenerate: int = 0


def _peak_scale(bit_depth, peak, convention):
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    if peak is None:
        if bit_depth is None:
            raise ValueError("give bit_depth or peak")
        peak = geometry_peak(bit_depth)
    return peak, (3.0 if convention == "3peak2" else 1.0)


def _geometry_result(e_rt, e_tr, peak, scale, degenerate=0):
    m_rt, m_tr = float(np.mean(e_rt)), float(np.mean(e_tr))
    return GeometryPsnr(psnr(m_rt, peak, scale), psnr(m_tr, peak, scale),
                        psnr(max(m_rt, m_tr), peak, scale), m_rt, m_tr, degenerate)


def d1_psnr(ref: VoxelFrame, test: VoxelFrame, bit_depth: Optional[int] = None,
            peak: Optional[float] = None, convention: str = "3peak2") -> GeometryPsnr:
    """Point-to-point PSNR in both directions and their worst case.

    ``bit_depth`` defaults to the reference frame's.
    """
    _check_nonempty(ref, test)
    peak, scale = _peak_scale(bit_depth if bit_depth is not None else ref.bit_depth, peak, convention)
    _, d_rt = NeighborIndex(test.coords).nearest(ref.coords)
    _, d_tr = NeighborIndex(ref.coords).nearest(test.coords)
    return _geometry_result(d_rt, d_tr, peak, scale)


def estimate_normals(coords: np.ndarray, k: int = 12, index: NeighborIndex | None = None):
    """PCA normals from the ``k`` nearest neighbours (the point included).

    Returns ``(normals, ok)``; ``ok`` is False where the neighbourhood spans
    fewer than two dimensions and no plane is defined.
    """
    index = index or NeighborIndex(coords)
    nbr, _ = index.knn(coords, k)
    pts = index.coords[nbr].astype(np.float64)
    centred = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    evals, evecs = np.linalg.eigh(cov)
    tol = 1e-9 * np.maximum(evals[:, -1], 1e-300)
    rank = (evals > tol[:, None]).sum(axis=1)
    return evecs[:, :, 0], rank >= 2


def d2_psnr(ref: VoxelFrame, test: VoxelFrame, bit_depth: Optional[int] = None,
            peak: Optional[float] = None, normal_k: int = 12,
            convention: str = "3peak2") -> GeometryPsnr:
    """Point-to-plane PSNR using reference-cloud normals in both directions.

    Points whose reference normal is undefined use the point-to-point error;
    their number is reported in ``degenerate``.
    """
    _check_nonempty(ref, test)
    peak, scale = _peak_scale(bit_depth if bit_depth is not None else ref.bit_depth, peak, convention)
    ref_index = NeighborIndex(ref.coords)
    normals, ok = estimate_normals(ref.coords, normal_k, ref_index)
    rc = ref.coords.astype(np.float64)
    tc = test.coords.astype(np.float64)

    nn_t, d_rt = NeighborIndex(test.coords).nearest(ref.coords)
    proj = np.einsum("ij,ij->i", tc[nn_t] - rc, normals) ** 2
    e_rt = np.where(ok, proj, d_rt)

    nn_r, d_tr = ref_index.nearest(test.coords)
    proj = np.einsum("ij,ij->i", tc - rc[nn_r], normals[nn_r]) ** 2
    e_tr = np.where(ok[nn_r], proj, d_tr)

    degenerate = int((~ok).sum() + (~ok[nn_r]).sum())
    return _geometry_result(e_rt, e_tr, peak, scale, degenerate)


@dataclass
class AttributePsnr:
    channels: tuple
    mse: tuple
    combined: float

    @property
    def y(self) -> float:
        return self.channels[0]

    @property
    def u(self) -> float:
        return self.channels[1]

    @property
    def v(self) -> float:
        return self.channels[2]


def channel_psnr(ref_attrs: np.ndarray, test_attrs: np.ndarray, peak: float,
                 weights: Sequence[float] = YUV_WEIGHTS) -> AttributePsnr:
    """Per-channel PSNR of matched rows and their weighted combination."""
    ref_attrs = np.asarray(ref_attrs, dtype=np.float64)
    test_attrs = np.asarray(test_attrs, dtype=np.float64)
    if ref_attrs.shape != test_attrs.shape:
        raise ShapeMismatch(f"{ref_attrs.shape} vs {test_attrs.shape}")
    mse = tuple(float(v) for v in np.mean((ref_attrs - test_attrs) ** 2, axis=0))
    ch = tuple(psnr(m, peak) for m in mse)
    w = np.asarray(weights, dtype=np.float64)
    combined = float(np.dot(w, ch) / w.sum()) if len(ch) == len(w) else float("nan")
    return AttributePsnr(ch, mse, combined)


def match_attributes(ref: VoxelFrame, test: VoxelFrame) -> np.ndarray:
    """Test attributes at each reference point's nearest test point."""
    nn, _ = NeighborIndex(test.coords).nearest(ref.coords)
    return test.attrs[nn]


def _yuv(frame: VoxelFrame) -> np.ndarray:
    return frame.attrs if frame.color_space == "yuv" else rgb_to_yuv(frame.attrs)


def yuv_psnr(ref: VoxelFrame, test: VoxelFrame) -> AttributePsnr:
    """Y, U, V PSNRs (peak 1 on the [0, 1] YUV scale) and the 14:1:1 mix.

    RGB inputs are converted first; correspondence is nearest neighbour from
    reference to test.
    """
    _check_nonempty(ref, test)
    if ref.attrs is None or test.attrs is None:
        raise ShapeMismatch("both frames need attributes")
    nn, _ = NeighborIndex(test.coords).nearest(ref.coords)
    return channel_psnr(_yuv(ref), _yuv(test)[nn], 1.0)


def y_psnr(ref: VoxelFrame, test: VoxelFrame) -> float:
    return yuv_psnr(ref, test).y


def bpip(bitstream_bytes: float, original_point_count: int) -> float:
    if original_point_count == 0:
        raise DivisionByZero("bpip of a zero-point frame")
    return 8.0 * bitstream_bytes / original_point_count


class AkimaSpline:
    """Akima piecewise-cubic interpolant with exact integration.

    Outer slopes use the usual linear extension of the secant slopes.
    Evaluation is confined to ``[xs[0], xs[-1]]``.
    """

    def __init__(self, xs, ys):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.ndim != 1 or xs.shape != ys.shape:
            raise ShapeMismatch("xs and ys must be equal-length vectors")
        if xs.size < 4:
            raise ValueError("Akima interpolation needs at least 4 points")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("xs must be strictly increasing")
        if not np.all(np.isfinite(ys)):
            raise ValueError("ys must be finite")
        self.xs, self.ys = xs, ys
        h = np.diff(xs)
        m = np.diff(ys) / h
        m = np.concatenate([[3 * m[0] - 2 * m[1], 2 * m[0] - m[1]], m,
                            [2 * m[-1] - m[-2], 3 * m[-1] - 2 * m[-2]]])
        dm = np.abs(np.diff(m))
        w1, w2 = dm[2:], dm[:-2]
        den = w1 + w2
        flat = den == 0
        safe = np.where(flat, 1.0, den)
        t = np.where(flat, 0.5 * (m[1:-2] + m[2:-1]), (w1 * m[1:-2] + w2 * m[2:-1]) / safe)
        # cubic on segment i: y_i + t_i s + c_i s^2 + d_i s^3 with s = x - x_i
        seg = m[2:-2]
        self.b = t[:-1]
        self.c = (3 * seg - 2 * t[:-1] - t[1:]) / h
        self.d = (t[:-1] + t[1:] - 2 * seg) / (h * h)

    def _segment(self, x):
        return np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.xs.size - 2)

    def _check(self, x):
        if np.any(x < self.xs[0]) or np.any(x > self.xs[-1]):
            raise OutOfDomain(f"query outside [{self.xs[0]}, {self.xs[-1]}]")

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        i = self._segment(x)
        s = x - self.xs[i]
        return self.ys[i] + s * (self.b[i] + s * (self.c[i] + s * self.d[i]))

    def _antideriv(self, i, s):
        return s * (self.ys[i] + s * (self.b[i] / 2 + s * (self.c[i] / 3 + s * self.d[i] / 4)))

    def integrate(self, a: float, b: float) -> float:
        """Exact integral over ``[a, b]`` inside the knot range."""
        if b < a:
            return -self.integrate(b, a)
        self._check(np.array([a, b]))
        ia, ib = int(self._segment(a)), int(self._segment(b))
        if ia == ib:
            return float(self._antideriv(ia, b - self.xs[ia]) - self._antideriv(ia, a - self.xs[ia]))
        total = self._antideriv(ia, self.xs[ia + 1] - self.xs[ia]) - self._antideriv(ia, a - self.xs[ia])
        for i in range(ia + 1, ib):
            total += self._antideriv(i, self.xs[i + 1] - self.xs[i])
        total += self._antideriv(ib, b - self.xs[ib])
        return float(total)


def akima_interpolate(xs, ys, x_query):
    return AkimaSpline(xs, ys)(x_query)


@dataclass(frozen=True)
class RdPoint:
    bitrate: float
    quality: float

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError("bitrate must be positive")


class RdCurve:
    """Rate-quality samples; infinite quality sentinels are dropped."""

    def __init__(self, points: Sequence):
        pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in points]
        self.dropped = sum(1 for p in pts if not np.isfinite(p.quality))
        pts = [p for p in pts if np.isfinite(p.quality)]
        if len(pts) < 4:
            raise ValueError(f"an R-D curve needs at least 4 finite points, got {len(pts)}")
        self.rate = np.array([p.bitrate for p in pts])
        self.quality = np.array([p.quality for p in pts])
        if np.any(np.diff(self.rate) <= 0):
            raise ValueError("bitrates must be strictly increasing")

    @classmethod
    def from_arrays(cls, rate, quality):
        return cls(list(zip(rate, quality)))

    @property
    def log_rate(self) -> np.ndarray:
        return np.log10(self.rate)

    def points(self):
        return [RdPoint(r, q) for r, q in zip(self.rate, self.quality)]


def _overlap(a: np.ndarray, b: np.ndarray):
    lo, hi = max(a.min(), b.min()), min(a.max(), b.max())
    if not lo < hi:
        raise NoOverlap(f"ranges [{a.min()}, {a.max()}] and [{b.min()}, {b.max()}] do not overlap")
    return lo, hi


def _sorted_fit(x, y):
    order = np.argsort(x, kind="stable")
    if np.any(np.diff(x[order]) == 0):
        raise ValueError("an R-D curve repeats a quality value, so rate is not a function of quality")
    return AkimaSpline(x[order], y[order])


def bd_rate(anchor: RdCurve, test: RdCurve) -> float:
    """Average bitrate change of ``test`` versus ``anchor`` at equal quality, in percent."""
    lo, hi = _overlap(anchor.quality, test.quality)
    fa = _sorted_fit(anchor.quality, anchor.log_rate)
    fb = _sorted_fit(test.quality, test.log_rate)
    avg = (fb.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


def bd_quality(anchor: RdCurve, test: RdCurve) -> float:
    """Average quality change of ``test`` versus ``anchor`` over the shared log-rate range."""
    lo, hi = _overlap(anchor.log_rate, test.log_rate)
    fa = AkimaSpline(anchor.log_rate, anchor.quality)
    fb = AkimaSpline(test.log_rate, test.quality)
    return float((fb.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo))
