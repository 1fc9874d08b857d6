"""Seeded synthetic dynamic point clouds and the sequence container."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..ply import read_ply, write_ply
from ..voxel import VoxelFrame, frame_from_arrays, voxelize

KINDS = ("moving-cube", "rotating-sphere", "textured-wave")

# texture components: (amplitude, wavelength) per RGB channel
_TEXTURE = np.array([[60.0, 16.0], [45.0, 22.0], [50.0, 13.0]])
# global brightness change per frame, in 8-bit units
DEFAULT_DRIFT = 4.0


@dataclass
class SequenceDataset:
    """Temporally ordered frames of one sequence.

    Frames come either from PLY ``paths`` (loaded lazily) or are held in
    memory. Only the first ``window`` frames are exposed.
    """

    paths: List[str] = field(default_factory=list)
    bit_depth: int = 10
    window: int = 32
    frames_in_memory: Optional[List[VoxelFrame]] = None
    name: str = "sequence"

    def __post_init__(self):
        if self.frames_in_memory is None and not self.paths:
            raise ValueError("a sequence needs paths or in-memory frames")
        self._cache = {}

    @classmethod
    def from_frames(cls, frames, window=32, name="sequence"):
        frames = list(frames)
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frames must be strictly ordered by index")
        if len({f.bit_depth for f in frames}) > 1:
            raise ValueError("frames must share one bit depth")
        return cls([], frames[0].bit_depth, window, frames, name)

    def __len__(self):
        n = len(self.frames_in_memory) if self.frames_in_memory is not None else len(self.paths)
        return min(n, self.window)

    def __getitem__(self, i) -> VoxelFrame:
        if not 0 <= i < len(self):
            raise IndexError(i)
        if self.frames_in_memory is not None:
            return self.frames_in_memory[i]
        if i not in self._cache:
            self._cache[i] = read_ply(self.paths[i], self.bit_depth, frame_index=i)
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def smooth_texture(u: np.ndarray, t: float, drift: float = DEFAULT_DRIFT, phase=None) -> np.ndarray:
    """RGB in [0, 255] as a sum of sinusoids of the object-local position ``u``."""
    phase = np.zeros(3) if phase is None else phase
    rgb = np.empty((u.shape[0], 3))
    for ch, (amp, lam) in enumerate(_TEXTURE):
        arg = 2 * np.pi * (u[:, ch % 3] + 0.5 * u[:, (ch + 1) % 3]) / lam + phase[ch]
        rgb[:, ch] = 128.0 + amp * np.sin(arg) + drift * t
    return np.clip(rgb, 0, 255)


def _hollow_cube(side: int, walls=(1, 2, 2)) -> np.ndarray:
    """Shell of a cube with per-axis wall thickness.

    The faces crossed by the x motion stay one voxel thin, so after a
    2x downscale their fine position is only recoverable from the motion;
    the thicker side walls keep consecutive frames overlapping by more
    than half.
    """
    r = np.arange(side)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    w = np.asarray(walls)
    edge = np.any((g < w) | (g >= side - w), axis=1)
    return g[edge]


def _cube_frames(frames, bit_depth, rng, side, drift):
    grid = 1 << bit_depth
    side = min(side, grid // 2)
    local = _hollow_cube(side)
    lo = max(1, (grid - side - frames) // 4)
    hi = max(lo + 1, grid - side - frames - 1)
    origin = rng.integers(lo, hi, size=3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    out = []
    for t in range(frames):
        pos = origin + np.array([t, 0, 0])
        rgb = np.rint(smooth_texture(local.astype(float), t, drift, phase))
        out.append(frame_from_arrays(local + pos, rgb, bit_depth, t))
    return out


def _sphere_frames(frames, bit_depth, rng, drift):
    grid = 1 << bit_depth
    radius = 0.3 * grid
    centre = grid / 2.0
    n = int(40 * radius * radius)
    z = rng.uniform(-1, 1, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    unit = np.stack([np.sqrt(1 - z * z) * np.cos(phi), np.sqrt(1 - z * z) * np.sin(phi), z], 1)
    phase = rng.uniform(0, 2 * np.pi, 3)
    out = []
    for t in range(frames):
        a = 0.1 * t
        rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
        pts = unit @ rot.T * radius + centre
        # texture is attached to the rotating surface
        rgb = smooth_texture(unit * radius, t, drift, phase)
        f = voxelize(pts, rgb, bit_depth, frame_index=t)
        out.append(f.with_attrs(np.rint(f.attrs)))
    return out


def _wave_frames(frames, bit_depth, rng, drift):
    grid = 1 << bit_depth
    r = np.arange(2, grid - 2)
    x, y = np.meshgrid(r, r, indexing="ij")
    x, y = x.ravel(), y.ravel()
    amp = grid / 10.0
    phase = rng.uniform(0, 2 * np.pi, 3)
    out = []
    for t in range(frames):
        h = grid / 2.0 + amp * np.sin(2 * np.pi * (x + 2 * t) / (grid / 2.0)) * np.cos(2 * np.pi * y / grid)
        z = np.floor(h).astype(np.int64)
        # thicken vertically so the surface is watertight on the voxel grid
        zz = np.concatenate([z, z + 1])
        xy = np.concatenate([np.stack([x, y], 1)] * 2)
        pts = np.column_stack([xy, zz])
        rgb = np.rint(smooth_texture(pts.astype(float), t, drift, phase))
        out.append(frame_from_arrays(pts, rgb, bit_depth, t))
    return out


def make_synthetic_sequence(kind: str = "moving-cube", frames: int = 8, bit_depth: int = 6,
                            seed: int = 0, out_dir=None, cube_side: int = 16,
                            drift: float = DEFAULT_DRIFT) -> SequenceDataset:
    """Deterministic temporally coherent sequence with smooth integer RGB.

    ``moving-cube`` translates a hollow cube by one voxel along x per
    frame; ``rotating-sphere`` spins a textured shell about z;
    ``textured-wave`` is a travelling height field. Colors also
    brighten by ``drift`` per frame. With ``out_dir`` the frames are also
    written as binary PLY files.
    """
    if frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    if kind not in KINDS:
        raise ValueError(f"unknown sequence kind {kind!r}; choose from {KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "moving-cube":
        seq = _cube_frames(frames, bit_depth, rng, cube_side, drift)
    elif kind == "rotating-sphere":
        seq = _sphere_frames(frames, bit_depth, rng, drift)
    else:
        seq = _wave_frames(frames, bit_depth, rng, drift)
    paths = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for f in seq:
            p = os.path.join(out_dir, f"{kind}_{f.frame_index:04d}.ply")
            write_ply(p, f)
            paths.append(p)
    ds = SequenceDataset.from_frames(seq, window=frames, name=kind)
    ds.paths = paths
    return ds


def jitter_frame(frame: VoxelFrame, max_shift: int, rng) -> VoxelFrame:
    """Move every point by a random integer offset, keeping its own color.

    Each point draws its own shift magnitude in ``[0, max_shift]`` so the
    displaced cloud covers a range of geometry errors. Collisions are
    merged and points leaving the grid are clamped to it.
    """
    n = len(frame)
    mag = rng.integers(0, max_shift + 1, size=n)
    step = rng.integers(-1, 2, size=(n, 3)) * mag[:, None]
    coords = np.clip(frame.coords + step, 0, (1 << frame.bit_depth) - 1)
    return frame_from_arrays(coords, frame.attrs, frame.bit_depth, frame.frame_index, frame.color_space)
