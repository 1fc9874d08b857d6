"""Voxel-level primitives: frames, Morton ordering, voxelization, partitioning."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyFrame, OutOfRange, ShapeMismatch

MORTON_BITS = 21  # per axis; 3 * 21 = 63 bits fit in uint64
COLOR_SPACES = ("rgb", "yuv")
_COLOR_RANGE = {"rgb": (0.0, 255.0), "yuv": (0.0, 1.0)}


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_keys(coords: np.ndarray, bit_depth: int = MORTON_BITS) -> np.ndarray:
    """Vectorized z-order keys for an (N, 3) integer array.

    Bit ``i`` of x lands at position ``3*i + 2``, of y at ``3*i + 1`` and of z
    at ``3*i``. Raises :class:`OutOfRange` if any component is outside
    ``[0, 2**bit_depth)``.
    """
    if not 1 <= bit_depth <= MORTON_BITS:
        raise OutOfRange(f"bit_depth must be in [1, {MORTON_BITS}], got {bit_depth}")
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeMismatch(f"expected (N, 3) coordinates, got {coords.shape}")
    if coords.size and (coords.min() < 0 or coords.max() >= (1 << bit_depth)):
        raise OutOfRange(
            f"coordinates must lie in [0, {1 << bit_depth}) for bit depth {bit_depth}"
        )
    x = _spread_bits(coords[:, 0])
    y = _spread_bits(coords[:, 1])
    z = _spread_bits(coords[:, 2])
    return (x << np.uint64(2)) | (y << np.uint64(1)) | z


def morton_key(c: Sequence[int], bit_depth: int) -> int:
    """Morton key of a single coordinate."""
    return int(morton_keys(np.asarray([c], dtype=np.int64), bit_depth)[0])


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        if np.any(self.min > self.max):
            raise ValueError("bounding box min must not exceed max")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass(frozen=True, eq=False)
class VoxelFrame:
    """A voxelized point cloud at one time instant.

    ``coords`` is an (N, 3) int64 array with unique rows; ``attrs`` an optional
    (N, 3) float64 array in RGB ``[0, 255]`` or YUV ``[0, 1]``.
    Arrays are stored read-only.
    """

    coords: np.ndarray
    attrs: Optional[np.ndarray] = None
    bit_depth: int = 10
    frame_index: int = 0
    color_space: str = "rgb"
    check_unique: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.int64).reshape(-1, 3)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.attrs is not None:
            attrs = np.array(self.attrs, dtype=np.float64)
            if attrs.ndim != 2 or attrs.shape[0] != coords.shape[0]:
                raise ShapeMismatch(
                    f"attrs shape {attrs.shape} does not match {coords.shape[0]} points"
                )
            attrs.setflags(write=False)
            object.__setattr__(self, "attrs", attrs)
        if self.color_space not in COLOR_SPACES:
            raise ValueError(f"unknown color space {self.color_space!r}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        if self.check_unique and len(coords) > 1:
            keys = _packed_keys(coords)
            if np.unique(keys).size != keys.size:
                raise ValueError("VoxelFrame coordinates must be unique")

    def __len__(self):
        return self.coords.shape[0]

    @property
    def has_attrs(self) -> bool:
        return self.attrs is not None

    def with_attrs(self, attrs, color_space=None) -> "VoxelFrame":
        return replace(
            self,
            attrs=attrs,
            color_space=color_space or self.color_space,
            check_unique=False,
        )

    def bounding_box(self) -> BoundingBox:
        if len(self) == 0:
            raise EmptyFrame("bounding box of an empty frame")
        return BoundingBox(self.coords.min(axis=0), self.coords.max(axis=0))

    def validate(self, atol: float = 1e-9) -> None:
        """Check grid range and that attribute values fit the color space."""
        if len(self) and (
            self.coords.min() < 0 or self.coords.max() >= (1 << self.bit_depth)
        ):
            raise OutOfRange(f"coordinates exceed the {self.bit_depth}-bit grid")
        if self.attrs is not None and self.attrs.size:
            lo, hi = _COLOR_RANGE[self.color_space]
            if self.attrs.min() < lo - atol or self.attrs.max() > hi + atol:
                raise OutOfRange(
                    f"attribute values [{self.attrs.min()}, {self.attrs.max()}] "
                    f"outside the {self.color_space} range [{lo}, {hi}]"
                )


def _packed_keys(coords: np.ndarray) -> np.ndarray:
    """Collision-free int64 keys for coordinates in [-2**20, 2**20)."""
    c = coords.astype(np.int64) + (1 << 20)
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def _merge_sorted(coords: np.ndarray, attrs: Optional[np.ndarray]):
    """Morton-sort, deduplicate and average attributes of collapsed voxels."""
    keys = morton_keys(coords)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    uniq, start, counts = np.unique(keys, return_index=True, return_counts=True)
    out_coords = coords[order][start]
    out_attrs = None
    if attrs is not None:
        inverse = np.repeat(np.arange(uniq.size), counts)
        sums = np.zeros((uniq.size, attrs.shape[1]))
        np.add.at(sums, inverse, attrs[order])
        out_attrs = sums / counts[:, None]
    return out_coords, out_attrs


def voxelize(
    points,
    attrs=None,
    bit_depth: int = 10,
    color_space: str = "rgb",
    frame_index: int = 0,
) -> VoxelFrame:
    """Floor-quantize real points onto the grid and merge collisions by mean."""
    if not 1 <= bit_depth <= 16:
        raise OutOfRange(f"bit_depth must be in [1, 16], got {bit_depth}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyFrame("cannot voxelize an empty point set")
    if attrs is not None:
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[0] != points.shape[0]:
            raise ShapeMismatch(
                f"{attrs.shape[0] if attrs.ndim else 0} attribute rows for "
                f"{points.shape[0]} points"
            )
    coords = np.floor(points).astype(np.int64)
    if coords.min() < 0 or coords.max() >= (1 << bit_depth):
        raise OutOfRange(f"points fall outside the {bit_depth}-bit grid")
    coords, attrs = _merge_sorted(coords, attrs)
    return VoxelFrame(
        coords, attrs, bit_depth, frame_index, color_space, check_unique=False
    )


def dedupe_and_sort(frame: VoxelFrame) -> VoxelFrame:
    coords, attrs = _merge_sorted(frame.coords, frame.attrs)
    return replace(frame, coords=coords, attrs=attrs, check_unique=False)


def frame_from_arrays(
    coords, attrs=None, bit_depth=10, frame_index=0, color_space="rgb"
) -> VoxelFrame:
    """Build a frame from possibly duplicated, unsorted integer coordinates."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if attrs is not None:
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.shape[0] != coords.shape[0]:
            raise ShapeMismatch("attribute/coordinate count mismatch")
    if coords.shape[0] == 0:
        return VoxelFrame(coords, attrs, bit_depth, frame_index, color_space)
    coords, attrs = _merge_sorted(coords, attrs)
    return VoxelFrame(
        coords, attrs, bit_depth, frame_index, color_space, check_unique=False
    )


def concat_frames(frames: Sequence[VoxelFrame]) -> VoxelFrame:
    """Stack frames and restore canonical order (duplicates are merged)."""
    if not frames:
        raise EmptyFrame("no frames to concatenate")
    first = frames[0]
    coords = np.concatenate([f.coords for f in frames])
    attrs = None
    if all(f.attrs is not None for f in frames):
        attrs = np.concatenate([f.attrs for f in frames])
    return frame_from_arrays(
        coords, attrs, first.bit_depth, first.frame_index, first.color_space
    )


def kdtree_partition(frame: VoxelFrame, max_points: int) -> list:
    """Split a frame into disjoint parts holding at most ``max_points`` points.

    Each split halves the current part at its median along the longest
    bounding-box axis (ties resolved x, then y, then z). Points sharing the
    median coordinate are separated by Morton key so parts never overlap.
    """
    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    if len(frame) == 0:
        raise EmptyFrame("cannot partition an empty frame")
    keys = morton_keys(frame.coords)
    parts = []
    stack = [np.arange(len(frame))]
    while stack:
        idx = stack.pop()
        if idx.size <= max_points:
            parts.append(idx)
            continue
        sub = frame.coords[idx]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        order = np.lexsort((keys[idx], sub[:, axis]))
        half = idx.size // 2
        left, right = np.sort(idx[order[:half]]), np.sort(idx[order[half:]])
        stack.append(right)
        stack.append(left)
    out = []
    for idx in parts:
        attrs = frame.attrs[idx] if frame.attrs is not None else None
        out.append(replace(frame, coords=frame.coords[idx], attrs=attrs, check_unique=False))
    return out
