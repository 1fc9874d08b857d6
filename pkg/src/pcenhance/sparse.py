"""Sparse voxel tensors and the differentiable ops that act on them.

All convolutions run through a :class:`KernelMap`: per kernel offset, a list of
(input row, output row) pairs. Execution walks offsets in index order, so each
output row receives its contributions in ascending offset order, the same
order as the map's sorted triples. The result is bit-reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor, make_node
from .errors import CoordMismatch, MissingPoolRecord, ShapeMismatch, StrideUnderflow
from .voxel import MORTON_BITS, morton_keys

_GRID_LIMIT = 1 << MORTON_BITS


class SparseTensor:
    """Occupied voxel coordinates (Morton-sorted, unique) plus a feature matrix."""

    def __init__(self, coords, feats, stride: int = 1, *, check: bool = True):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = ag.as_tensor(feats)
        if feats.data.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ShapeMismatch(
                f"feature matrix {feats.shape} does not match {coords.shape[0]} coords"
            )
        if stride < 1:
            raise ValueError("stride must be positive")
        self.coords = coords
        self.feats = feats
        self.stride = int(stride)
        if check:
            self._check()

    def _check(self):
        if self.coords.size and np.any(self.coords % self.stride):
            raise ValueError(f"coordinates are not multiples of stride {self.stride}")
        keys = self.keys
        if keys.size > 1 and np.any(keys[1:] <= keys[:-1]):
            raise ValueError("coordinates must be unique and Morton-sorted")

    @classmethod
    def from_coords(cls, coords, feats=None, stride: int = 1, channels: int = 1):
        """Sort/deduplicate raw coordinates; default features are all ones."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = morton_keys(coords)
        uniq, first = np.unique(keys, return_index=True)
        coords = coords[first]
        if feats is None:
            feats = np.ones((coords.shape[0], channels))
        else:
            feats = np.asarray(feats)[first]
        return cls(coords, feats, stride)

    def __len__(self):
        return self.coords.shape[0]

    def __repr__(self):
        return f"SparseTensor(n={len(self)}, channels={self.channels}, stride={self.stride})"

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @cached_property
    def keys(self) -> np.ndarray:
        return morton_keys(self.coords)

    @cached_property
    def coord_index(self) -> dict:
        return {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)}

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row of each query coordinate, or -1 where it is not occupied."""
        query = np.asarray(query, dtype=np.int64).reshape(-1, 3)
        rows = np.full(query.shape[0], -1, dtype=np.int64)
        valid = np.all((query >= 0) & (query < _GRID_LIMIT), axis=1)
        if not valid.any() or len(self) == 0:
            return rows
        qk = morton_keys(query[valid])
        pos = np.searchsorted(self.keys, qk)
        pos = np.minimum(pos, len(self) - 1)
        hit = self.keys[pos] == qk
        sub = np.full(qk.shape[0], -1, dtype=np.int64)
        sub[hit] = pos[hit]
        rows[valid] = sub
        return rows

    def with_feats(self, feats) -> "SparseTensor":
        return SparseTensor(self.coords, feats, self.stride, check=False)


def kernel_offsets(kernel_size: int, centered: bool = True) -> np.ndarray:
    """Unit offsets of a cubic kernel in lexicographic (dx, dy, dz) order."""
    if centered:
        if kernel_size % 2 != 1:
            raise ValueError("centered kernels need an odd size")
        r = range(-(kernel_size // 2), kernel_size // 2 + 1)
    else:
        r = range(kernel_size)
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


@dataclass
class KernelMap:
    """(in_row, out_row, offset_index) triples sorted by out_row then offset."""

    in_rows: np.ndarray
    out_rows: np.ndarray
    offset_index: np.ndarray
    offsets: np.ndarray  # (K^3, 3), already scaled by stride
    kernel_size: int
    stride: int
    n_in: int
    n_out: int

    def __len__(self):
        return self.in_rows.shape[0]

    @cached_property
    def groups(self) -> list:
        """Per offset: (offset_index, in_rows, out_rows), out rows ascending."""
        order = np.lexsort((self.out_rows, self.offset_index))
        k_sorted = self.offset_index[order]
        bounds = np.searchsorted(k_sorted, np.arange(len(self.offsets) + 1))
        out = []
        for k in range(len(self.offsets)):
            sl = order[bounds[k]:bounds[k + 1]]
            if sl.size:
                out.append((k, self.in_rows[sl], self.out_rows[sl]))
        return out

    def triples(self) -> np.ndarray:
        return np.stack([self.in_rows, self.out_rows, self.offset_index], axis=1)


def _map_from_offsets(src: SparseTensor, out_coords: np.ndarray, offsets: np.ndarray,
                      kernel_size: int, stride: int) -> KernelMap:
    ins, outs, ks = [], [], []
    out_rows_all = np.arange(out_coords.shape[0], dtype=np.int64)
    for k, off in enumerate(offsets):
        rows = src.lookup(out_coords + off)
        hit = rows >= 0
        if hit.any():
            ins.append(rows[hit])
            outs.append(out_rows_all[hit])
            ks.append(np.full(int(hit.sum()), k, dtype=np.int64))
    if ins:
        in_rows, out_rows, k_idx = (np.concatenate(v) for v in (ins, outs, ks))
        order = np.lexsort((k_idx, out_rows))
        in_rows, out_rows, k_idx = in_rows[order], out_rows[order], k_idx[order]
    else:
        in_rows = out_rows = k_idx = np.zeros(0, dtype=np.int64)
    return KernelMap(in_rows, out_rows, k_idx, offsets, kernel_size, stride,
                     len(src), out_coords.shape[0])


_KMAP_CACHE: dict = {}
_KMAP_CACHE_SIZE = 4096


def build_kernel_map(src: SparseTensor, out_coords, kernel_size: int = 3,
                     stride: Optional[int] = None) -> KernelMap:
    """Triples with ``out_coords[out] + offset * stride == src.coords[in]``."""
    if kernel_size % 2 != 1:
        raise ValueError("kernel_size must be odd")
    stride = src.stride if stride is None else stride
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    cache_key = ("conv", src.keys.tobytes(), out_coords.tobytes(), kernel_size, stride)
    hit = _KMAP_CACHE.get(cache_key)
    if hit is not None:
        return hit
    offsets = kernel_offsets(kernel_size) * stride
    kmap = _map_from_offsets(src, out_coords, offsets, kernel_size, stride)
    _cache_put(cache_key, kmap)
    return kmap


def _cache_put(key, value):
    if len(_KMAP_CACHE) >= _KMAP_CACHE_SIZE:
        _KMAP_CACHE.pop(next(iter(_KMAP_CACHE)))
    _KMAP_CACHE[key] = value


def clear_kernel_map_cache():
    _KMAP_CACHE.clear()


def _apply_kernel_map(x: Tensor, kmap: KernelMap, weight: Tensor,
                      bias: Optional[Tensor]) -> Tensor:
    """Gather-matmul-scatter over the kernel map, differentiable in all inputs.

    Offsets are visited in index order, so accumulation order is fixed.
    Within one offset every output row appears at most once.
    """
    xd, wd = x.data, weight.data
    if wd.shape[0] != len(kmap.offsets):
        raise ShapeMismatch(f"weight has {wd.shape[0]} taps, kernel has {len(kmap.offsets)}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeMismatch(f"input has {xd.shape[1]} channels, weight expects {wd.shape[1]}")
    n_out, c_out = kmap.n_out, wd.shape[2]
    groups = kmap.groups
    out = np.zeros((n_out, c_out), dtype=np.result_type(xd, wd))
    for k, i, o in groups:
        out[o] += xd[i] @ wd[k]
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for k, i, o in groups:
                gx[i] += g[o] @ wd[k].T
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            for k, i, o in groups:
                gw[k] = xd[i].T @ g[o]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_node(out, parents, bw)


def gsconv(x: SparseTensor, out_coords, weight: Tensor, bias: Optional[Tensor] = None,
           kernel_map: Optional[KernelMap] = None) -> SparseTensor:
    """Generalized sparse convolution onto an arbitrary output coordinate set.

    ``out[u] = sum_k W_k x[u + k * stride]`` over offsets whose target is
    occupied in ``x``; outputs with no occupied neighbour receive the bias only.
    ``out_coords`` must be unique and Morton-sorted (or a SparseTensor).
    """
    if isinstance(out_coords, SparseTensor):
        out_coords = out_coords.coords
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    weight = ag.as_tensor(weight)
    k = round(weight.shape[0] ** (1 / 3))
    if k ** 3 != weight.shape[0]:
        raise ShapeMismatch(f"weight tap count {weight.shape[0]} is not a cube")
    if x.channels != weight.shape[1]:
        raise ShapeMismatch(f"input has {x.channels} channels, weight expects {weight.shape[1]}")
    kmap = kernel_map or build_kernel_map(x, out_coords, k, x.stride)
    feats = _apply_kernel_map(x.feats, kmap, weight, None if bias is None else ag.as_tensor(bias))
    return SparseTensor(out_coords, feats, x.stride, check=False)


def spconv(x: SparseTensor, weight, bias=None) -> SparseTensor:
    """Coordinate-preserving sparse convolution."""
    return gsconv(x, x.coords, weight, bias)


def tsconv_upsample(x: SparseTensor, weight, bias=None, up_factor: int = 2) -> SparseTensor:
    """Transposed sparse convolution generating children at ``stride / up_factor``.

    An even kernel size K places taps at ``{0..K-1} * new_stride`` (K = 2 gives the
    8 children of each voxel, no overlap); an odd K centres the taps, so
    neighbouring footprints overlap and shared children sum all contributions.
    """
    if x.stride % up_factor or x.stride < up_factor:
        raise StrideUnderflow(f"cannot upsample stride {x.stride} by {up_factor}")
    weight = ag.as_tensor(weight)
    k = round(weight.shape[0] ** (1 / 3))
    if k ** 3 != weight.shape[0]:
        raise ShapeMismatch(f"weight tap count {weight.shape[0]} is not a cube")
    if x.channels != weight.shape[1]:
        raise ShapeMismatch(f"input has {x.channels} channels, weight expects {weight.shape[1]}")
    new_stride = x.stride // up_factor
    offsets = kernel_offsets(k, centered=bool(k % 2)) * new_stride
    cache_key = ("tconv", x.keys.tobytes(), k, new_stride)
    cached = _KMAP_CACHE.get(cache_key)
    if cached is None:
        cand = (x.coords[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        cand = cand[np.all((cand >= 0) & (cand < _GRID_LIMIT), axis=1)]
        keys = morton_keys(cand)
        _, first = np.unique(keys, return_index=True)
        cand = cand[first]
        # transposed: input u contributes to u + off_k, i.e. in = out - off_k
        kmap = _map_from_offsets(x, cand, -offsets, k, new_stride)
        cached = (cand, kmap)
        _cache_put(cache_key, cached)
    cand, kmap = cached
    feats = _apply_kernel_map(x.feats, kmap, weight, None if bias is None else ag.as_tensor(bias))
    return SparseTensor(cand, feats, new_stride, check=False)


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def parent_coords(coords: np.ndarray, stride: int) -> np.ndarray:
    step = 2 * stride
    return (coords // step) * step


def pool(x: SparseTensor) -> SparseTensor:
    """Average children into parents at twice the stride."""
    parents = parent_coords(x.coords, x.stride)
    keys = morton_keys(parents)
    _, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True,
                                          return_counts=True)
    n = first.size
    xd = x.feats.data
    feats = _segment_sum(xd, inverse, n) / counts[:, None]
    scale = (1.0 / counts)[inverse][:, None]

    def bw(g):
        return (g[inverse] * scale,)

    out = make_node(feats, (x.feats,), bw)
    return SparseTensor(parents[first], out, 2 * x.stride, check=False)


def unpool(x: SparseTensor, target) -> SparseTensor:
    """Broadcast each parent feature of ``x`` to its children in ``target``.

    ``target`` is the finer tensor (or its coordinates) that was pooled to
    produce ``x``'s coordinate set.
    """
    if isinstance(target, SparseTensor):
        t_coords, t_stride = target.coords, target.stride
    else:
        t_coords, t_stride = np.asarray(target, dtype=np.int64), x.stride // 2
    if x.stride != 2 * t_stride:
        raise MissingPoolRecord(f"no pool relation between stride {t_stride} and {x.stride}")
    rows = x.lookup(parent_coords(t_coords, t_stride))
    if np.any(rows < 0):
        raise MissingPoolRecord("target coordinates have parents missing from the input")
    n = len(x)

    def bw(g):
        return (_segment_sum(g, rows, n),)

    out = make_node(x.feats.data[rows], (x.feats,), bw)
    return SparseTensor(t_coords, out, t_stride, check=False)


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_feats(ag.relu(x.feats))


def sigmoid(x: SparseTensor) -> SparseTensor:
    return x.with_feats(ag.sigmoid(x.feats))


def concat_channels(*xs: SparseTensor) -> SparseTensor:
    first = xs[0]
    for other in xs[1:]:
        if other.stride != first.stride or not np.array_equal(other.coords, first.coords):
            raise CoordMismatch("concat_channels requires identical coordinate sets")
    return first.with_feats(ag.concat([x.feats for x in xs], axis=1))


def linear(x: SparseTensor, weight, bias=None) -> SparseTensor:
    """Per-voxel affine map (a 1x1x1 convolution)."""
    weight = ag.as_tensor(weight)
    if x.channels != weight.shape[0]:
        raise ShapeMismatch(f"input has {x.channels} channels, weight expects {weight.shape[0]}")
    out = ag.matmul(x.feats, weight)
    if bias is not None:
        out = ag.add(out, bias)
    return x.with_feats(out)


def zeros_like(x: SparseTensor, channels: int) -> SparseTensor:
    return x.with_feats(np.zeros((len(x), channels), dtype=x.feats.dtype))


def layer_norm(x: SparseTensor, gamma, beta, eps: float = 1e-5) -> SparseTensor:
    """Per-voxel normalization over channels."""
    return x.with_feats(ag.layer_norm(x.feats, gamma, beta, eps))
