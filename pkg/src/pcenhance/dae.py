"""Dynamic attribute enhancement network.

Spatial features of the current frame (AFE) and dedicated temporal features
of the previous frame (ATFE) are fused after aligning the temporal ones onto
the current geometry (AMC). A linear offset estimator (AOE) predicts a YUV
residual that is added to the decoded attributes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import sparse as sp
from .dge import GfeConfig
from .errors import EmptyFrame, ShapeMismatch
from .losses import wmse_loss
from .nn import DenseBlock, FeatureUNet, LayerNorm, Linear, Module, SparseConv
from .runtime import deterministic
from .sparse import SparseTensor
from .training import TrainConfig, fit, load_state, save_model
from .voxel import VoxelFrame, morton_keys


# network inputs are (yuv - INPUT_CENTER) * input_gain
INPUT_CENTER = 0.5


def _afe_default():
    return GfeConfig(latent_width=512, output_width=64, input_width=3)


@dataclass
class DaeConfig:
    afe: GfeConfig = field(default_factory=_afe_default)
    growth: int = 16
    use_amc: bool = True
    use_atfe: bool = True
    layer_norm: bool = True
    seed: int = 0
    dtype: str = "float64"
    wmse_tau: float = 0.4
    w_high: float = 2.0
    w_low: float = 0.5
    input_gain: float = 4.0

    def __post_init__(self):
        if self.afe.input_width != 3:
            raise ValueError("attribute features take 3 input channels")

    @classmethod
    def toy(cls, **kw):
        """Desk-scale widths (16-channel features, 64-wide bottleneck)."""
        base = dict(afe=GfeConfig(latent_width=64, output_width=16, input_width=3), growth=8)
        base.update(kw)
        return cls(**base)

    @property
    def width(self) -> int:
        return self.afe.widths()[0]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["afe"] = GfeConfig(**d["afe"])
        return cls(**d)


class TemporalExtractor(Module):
    """Three rounds of SConv, ReLU and a dense module (layer norm before each ReLU)."""

    def __init__(self, c_in, width, growth, rng, dtype=np.float64, norm=True):
        self.convs = [SparseConv(c_in if i == 0 else width, width, rng, dtype=dtype) for i in range(3)]
        self.dense = [DenseBlock(width, growth, width, rng, dtype=dtype) for _ in range(3)]
        self.norms = [LayerNorm(width, dtype) for _ in range(3)] if norm else []

    def forward(self, x: SparseTensor) -> SparseTensor:
        for i, (conv, dense) in enumerate(zip(self.convs, self.dense)):
            h = conv(x)
            if self.norms:
                h = self.norms[i](h)
            x = dense(sp.relu(h))
        return x


class AttributeMotionCompensation(Module):
    """GSConv onto the current coordinates, a dense module, then SConv.

    With ``norm`` both convolutions are followed by a layer norm.
    """

    def __init__(self, width, growth, rng, dtype=np.float64, norm=True):
        self.gsconv = SparseConv(width, width, rng, dtype=dtype)
        self.dense = DenseBlock(width, growth, width, rng, dtype=dtype)
        self.conv = SparseConv(width, width, rng, dtype=dtype)
        self.norms = [LayerNorm(width, dtype), LayerNorm(width, dtype)] if norm else []

    def forward(self, feat_prev: SparseTensor, coords_curr) -> SparseTensor:
        h = self.gsconv(feat_prev, coords_curr)
        if self.norms:
            h = self.norms[0](h)
        h = self.conv(self.dense(h))
        return self.norms[1](h) if self.norms else h


class DAENet(Module):
    def __init__(self, config: DaeConfig | None = None):
        self.config = config or DaeConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        w = cfg.width
        self.afe = FeatureUNet(cfg.afe.widths(), 3, rng, dtype, cfg.layer_norm)
        self.atfe = TemporalExtractor(3, w, cfg.growth, rng, dtype, cfg.layer_norm) if cfg.use_atfe else None
        self.amc = AttributeMotionCompensation(w, cfg.growth, rng, dtype, cfg.layer_norm)
        self.aoe = Linear(2 * w, 3, rng, zero_init=True, dtype=dtype)

    def zero_amc(self):
        for p in self.amc.parameters():
            p.data = np.zeros_like(p.data)

    def temporal_features(self, prev: SparseTensor) -> SparseTensor:
        if self.atfe is None:
            return self.afe(prev)
        return self.atfe(prev)

    def normalize(self, x: SparseTensor) -> SparseTensor:
        return x.with_feats((x.feats.data - INPUT_CENTER) * self.config.input_gain)

    def offset(self, prev: SparseTensor, curr: SparseTensor) -> SparseTensor:
        """Per-point YUV offset for the current frame from raw YUV inputs."""
        prev, curr = self.normalize(prev), self.normalize(curr)
        spatial = self.afe(curr)
        if self.config.use_amc:
            aligned = amc(self.amc, self.temporal_features(prev), curr.coords)
        else:
            aligned = sp.zeros_like(spatial, self.config.width)
        return aoe(self.aoe, sp.concat_channels(spatial, aligned))

    def forward(self, prev: SparseTensor, curr: SparseTensor) -> SparseTensor:
        off = self.offset(prev, curr)
        return curr.with_feats(curr.feats + off.feats)


def atfe_forward(module: TemporalExtractor, prev_attrs_on_geom: SparseTensor) -> SparseTensor:
    if len(prev_attrs_on_geom) == 0:
        raise EmptyFrame("previous frame is empty")
    return module(prev_attrs_on_geom)


def amc(module: AttributeMotionCompensation, feat_prev: SparseTensor, coords_curr) -> SparseTensor:
    return module(feat_prev, coords_curr)


def aoe(module: Linear, fused: SparseTensor) -> SparseTensor:
    if fused.channels != module.weight.shape[0]:
        raise ShapeMismatch(f"offset estimator expects {module.weight.shape[0]} channels, "
                            f"got {fused.channels}")
    return module(fused)


def attribute_tensor(frame: VoxelFrame, dtype=np.float64):
    """YUV frame as a sparse tensor plus the permutation back to frame order."""
    if len(frame) == 0:
        raise EmptyFrame("attribute frame is empty")
    if frame.attrs is None:
        raise ShapeMismatch("frame has no attributes")
    if frame.color_space != "yuv":
        raise ValueError("attribute enhancement works on YUV frames")
    order = np.argsort(morton_keys(frame.coords), kind="stable")
    t = SparseTensor(frame.coords[order], frame.attrs[order].astype(dtype), check=False)
    return t, order


def dae_forward(model: DAENet, curr_decoded: VoxelFrame, prev_decoded: VoxelFrame,
                deterministic_default: bool = False) -> VoxelFrame:
    """Enhanced current attributes; coordinates and their order are kept."""
    dtype = np.dtype(model.config.dtype)
    with deterministic(deterministic_default), ag.no_grad():
        curr, order = attribute_tensor(curr_decoded, dtype)
        prev, _ = attribute_tensor(prev_decoded, dtype)
        off = model.offset(prev, curr).feats.data
    attrs = np.array(curr_decoded.attrs, dtype=np.float64, copy=True)
    attrs[order] = attrs[order] + off
    return curr_decoded.with_attrs(attrs, "yuv")


@dataclass
class DaeSample:
    """Decoded recolored previous/current YUV frames and the clean recolored target.

    ``target`` shares ``curr``'s coordinates row for row.
    """

    prev: VoxelFrame
    curr: VoxelFrame
    target: VoxelFrame

    def __post_init__(self):
        if self.target.coords.shape != self.curr.coords.shape or not np.array_equal(
                self.target.coords, self.curr.coords):
            raise ShapeMismatch("target must lie on the current geometry")


class _PreparedDae:
    def __init__(self, sample: DaeSample, dtype):
        self.curr, order = attribute_tensor(sample.curr, dtype)
        self.prev, _ = attribute_tensor(sample.prev, dtype)
        self.target = sample.target.attrs[order]


def _dae_loss(model, prepared):
    cfg = model.config
    out = model(prepared.prev, prepared.curr)
    return wmse_loss(prepared.target, out.feats, cfg.wmse_tau, cfg.w_high, cfg.w_low)


def train_dae(samples: Sequence[DaeSample], config: DaeConfig | None = None,
              train: TrainConfig | None = None, model: DAENet | None = None):
    """Fit a DAE network with W-MSE against recolored targets; returns ``(model, history)``."""
    model = model or DAENet(config or DaeConfig.toy())
    train = train or TrainConfig()
    dtype = np.dtype(model.config.dtype)
    prepared = [_PreparedDae(s, dtype) for s in samples]
    history = fit(model, prepared, _dae_loss, train, tag="dae")
    return model, history


def save_dae(path, model: DAENet, extra=None):
    save_model(path, model, "dae", extra)


def load_dae(path) -> DAENet:
    tensors, meta = load_state(path)
    if meta.get("kind") != "dae":
        raise ValueError(f"{path} is not a DAE checkpoint")
    model = DAENet(DaeConfig.from_dict(meta["config"]))
    model.load_state_dict(tensors)
    return model
