"""Dynamic geometry enhancement network.

A shared sparse U-Net extracts features from the decoded previous and current
geometries, a generalized sparse convolution aligns the previous-frame
features onto the current coordinates, and an upsampler scores the children
of every current voxel. The ``N`` most probable children form the output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import sparse as sp
from .errors import EmptyFrame, InsufficientCandidates
from .losses import bce_loss
from .nn import DenseBlock, FeatureUNet, LayerNorm, Linear, Module, SparseConv, TransposedConv
from .runtime import deterministic
from .sparse import SparseTensor
from .training import TrainConfig, fit, load_state, save_model
from .voxel import VoxelFrame, morton_keys


@dataclass
class GfeConfig:
    encoder_levels: int = 5
    decoder_levels: int = 4
    latent_width: int = 512
    output_width: int = 32
    input_width: int = 1

    def __post_init__(self):
        if min(self.latent_width, self.output_width, self.input_width) < 1:
            raise ValueError("widths must be positive")
        if self.decoder_levels != self.encoder_levels - 1:
            raise ValueError("decoder_levels must equal encoder_levels - 1")

    def widths(self) -> list:
        """Per-level channel counts, geometric from output to latent width."""
        w = np.geomspace(self.output_width, self.latent_width, self.encoder_levels)
        return [int(round(v)) for v in w]


@dataclass
class DgeConfig:
    gfe: GfeConfig = field(default_factory=GfeConfig)
    upsampler_width: int = 32
    growth: int = 16
    tsconv_kernel: int = 2
    use_gmc: bool = True
    layer_norm: bool = True
    seed: int = 0
    dtype: str = "float64"

    @classmethod
    def toy(cls, **kw):
        """Desk-scale widths (8-channel features, 32-wide bottleneck)."""
        base = dict(gfe=GfeConfig(latent_width=32, output_width=8), upsampler_width=16, growth=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["gfe"] = GfeConfig(**d["gfe"])
        return cls(**d)


@dataclass
class OccupancyField:
    """Candidate voxels with occupancy probabilities."""

    coords: np.ndarray
    probs: np.ndarray
    stride: int
    probs_tensor: Optional[ag.Tensor] = None

    def __post_init__(self):
        if np.any((self.probs < 0) | (self.probs > 1)):
            raise ValueError("probabilities must lie in [0, 1]")


class GeometryMotionCompensation(Module):
    """GSConv onto the current coordinates, then SPConv-ReLU-SPConv-ReLU.

    With ``norm`` every convolution is followed by a per-voxel layer norm.
    """

    def __init__(self, width, rng, dtype=np.float64, norm=True):
        self.gsconv = SparseConv(width, width, rng, dtype=dtype)
        self.conv1 = SparseConv(width, width, rng, dtype=dtype)
        self.conv2 = SparseConv(width, width, rng, dtype=dtype)
        self.norms = [LayerNorm(width, dtype) for _ in range(3)] if norm else []

    def _norm(self, i, x):
        return self.norms[i](x) if self.norms else x

    def forward(self, feat_prev: SparseTensor, coords_curr) -> SparseTensor:
        aligned = self._norm(0, self.gsconv(feat_prev, coords_curr))
        h = sp.relu(self._norm(1, self.conv1(aligned)))
        return sp.relu(self._norm(2, self.conv2(h)))


class GeometryUpsampler(Module):
    """TSConv candidate generation, dense refinement and a sigmoid occupancy head."""

    def __init__(self, c_in, width, growth, rng, kernel_size=2, dtype=np.float64):
        self.tsconv = TransposedConv(c_in, width, rng, kernel_size=kernel_size, dtype=dtype)
        self.dense = DenseBlock(width, growth, width, rng, dtype=dtype)
        self.head = Linear(width, 1, rng, dtype=dtype)

    def forward(self, fused: SparseTensor) -> SparseTensor:
        h = sp.relu(self.tsconv(fused))
        h = sp.relu(self.dense(h))
        return sp.sigmoid(self.head(h))


class DGENet(Module):
    def __init__(self, config: DgeConfig | None = None):
        self.config = config or DgeConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        widths = cfg.gfe.widths()
        w = widths[0]
        self.gfe = FeatureUNet(widths, cfg.gfe.input_width, rng, dtype, cfg.layer_norm)
        self.gmc = GeometryMotionCompensation(w, rng, dtype, cfg.layer_norm)
        self.upsampler = GeometryUpsampler(2 * w, cfg.upsampler_width, cfg.growth, rng,
                                           cfg.tsconv_kernel, dtype)

    @property
    def feature_width(self) -> int:
        return self.config.gfe.widths()[0]

    def zero_gmc(self):
        for p in self.gmc.parameters():
            p.data = np.zeros_like(p.data)

    def occupancy(self, prev: SparseTensor, curr: SparseTensor) -> SparseTensor:
        """Candidate coordinates at half stride with a 1-channel probability."""
        f_curr = gfe_forward(self.gfe, curr)
        if self.config.use_gmc:
            f_prev = gfe_forward(self.gfe, prev)
            aligned = gmc(self.gmc, f_prev, curr.coords)
        else:
            aligned = sp.zeros_like(f_curr, self.feature_width)
        return self.upsampler(sp.concat_channels(f_curr, aligned))

    def forward(self, prev: SparseTensor, curr: SparseTensor) -> OccupancyField:
        out = self.occupancy(prev, curr)
        return OccupancyField(out.coords, out.feats.data[:, 0], out.stride, out.feats)


def occupancy_tensor(frame: VoxelFrame, stride: int, dtype=np.float64) -> SparseTensor:
    if len(frame) == 0:
        raise EmptyFrame("geometry frame is empty")
    coords = (frame.coords // stride) * stride
    t = SparseTensor.from_coords(coords, stride=stride)
    return t.with_feats(np.ones((len(t), 1), dtype=dtype))


def gfe_forward(gfe: FeatureUNet, frame_geometry: SparseTensor) -> SparseTensor:
    if len(frame_geometry) == 0:
        raise EmptyFrame("geometry frame is empty")
    return gfe(frame_geometry)


def gmc(module: GeometryMotionCompensation, feat_prev: SparseTensor, coords_curr) -> SparseTensor:
    return module(feat_prev, coords_curr)


def select_top_n(coords: np.ndarray, probs: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` best candidates: probability descending, Morton ascending."""
    if n > coords.shape[0]:
        raise InsufficientCandidates(n, coords.shape[0])
    keys = morton_keys(coords)
    order = np.lexsort((keys, -probs))
    chosen = order[:n]
    return chosen[np.argsort(keys[chosen], kind="stable")]


def geometry_upsampler(module: GeometryUpsampler, fused: SparseTensor, target_count: int,
                       bit_depth: int = 10, frame_index: int = 0) -> VoxelFrame:
    out = module(fused)
    idx = select_top_n(out.coords, out.feats.data[:, 0], target_count)
    return VoxelFrame(out.coords[idx], None, bit_depth, frame_index, check_unique=False)


def level_counts(original: VoxelFrame, input_stride: int) -> dict:
    """Occupied-voxel count of ``original`` at every stride below ``input_stride``.

    These are the side information a multi-stage upsampling needs; for an
    input stride of 2 only the point count itself is used.
    """
    counts = {}
    s = input_stride // 2
    while s >= 1:
        q = (original.coords // s) * s
        counts[s] = int(np.unique(morton_keys(q)).size)
        s //= 2
    return counts


def dge_forward(model: DGENet, prev_decoded: VoxelFrame, curr_decoded: VoxelFrame,
                n_points: int, input_stride: int = 2,
                counts: Optional[dict] = None) -> VoxelFrame:
    """Enhanced current geometry with exactly ``n_points`` voxels.

    Strides above 2 are upsampled one octave per pass with the same weights;
    intermediate passes keep ``counts[stride]`` voxels.
    """
    if input_stride < 2 or input_stride & (input_stride - 1):
        raise ValueError("input_stride must be a power of two >= 2")
    if input_stride > 2 and counts is None:
        raise ValueError("multi-pass upsampling needs per-stride voxel counts")
    dtype = np.dtype(model.config.dtype)
    with deterministic(True), ag.no_grad():
        prev_coords = occupancy_tensor(prev_decoded, input_stride, dtype).coords
        curr = occupancy_tensor(curr_decoded, input_stride, dtype)
        stride = input_stride
        while stride > 1:
            # the previous frame stays at its decoded resolution on every pass
            prev = SparseTensor(prev_coords, np.ones((len(prev_coords), 1), dtype), stride, check=False)
            field = model(prev, curr)
            n = n_points if field.stride == 1 else counts[field.stride]
            idx = select_top_n(field.coords, field.probs, n)
            stride = field.stride
            curr = SparseTensor(field.coords[idx], np.ones((n, 1), dtype), stride, check=False)
    return VoxelFrame(curr.coords, None, curr_decoded.bit_depth, curr_decoded.frame_index,
                      check_unique=False)


@dataclass
class DgeSample:
    """Decoded previous/current geometry and the original current geometry."""

    prev: VoxelFrame
    curr: VoxelFrame
    target: VoxelFrame
    stride: int = 2


def occupancy_labels(candidates: np.ndarray, target: VoxelFrame, stride: int) -> np.ndarray:
    """1 where a candidate voxel is occupied in ``target`` quantized to ``stride``."""
    tq = np.unique(morton_keys((target.coords // stride) * stride))
    return np.isin(morton_keys(candidates), tq).astype(np.float64)


class _PreparedDge:
    def __init__(self, sample: DgeSample, dtype):
        self.prev = occupancy_tensor(sample.prev, sample.stride, dtype)
        self.curr = occupancy_tensor(sample.curr, sample.stride, dtype)
        self.target = sample.target
        self.labels = None


def _dge_loss(model, prepared):
    out = model.occupancy(prepared.prev, prepared.curr)
    if prepared.labels is None:
        prepared.labels = occupancy_labels(out.coords, prepared.target, out.stride)
    return bce_loss(out.feats, prepared.labels)


def train_dge(samples: Sequence[DgeSample], config: DgeConfig | None = None,
              train: TrainConfig | None = None, model: DGENet | None = None):
    """Fit a DGE network with BCE over all candidates; returns ``(model, history)``."""
    model = model or DGENet(config or DgeConfig.toy())
    train = train or TrainConfig()
    dtype = np.dtype(model.config.dtype)
    prepared = [_PreparedDge(s, dtype) for s in samples]
    history = fit(model, prepared, _dge_loss, train, tag="dge")
    return model, history


def save_dge(path, model: DGENet, extra=None):
    save_model(path, model, "dge", extra)


def load_dge(path) -> DGENet:
    tensors, meta = load_state(path)
    if meta.get("kind") != "dge":
        raise ValueError(f"{path} is not a DGE checkpoint")
    model = DGENet(DgeConfig.from_dict(meta["config"]))
    model.load_state_dict(tensors)
    return model
