"""Layer containers built on the sparse ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import sparse as sp
from .autograd import Parameter
from .errors import ShapeMismatch
from .sparse import SparseTensor


class Module:
    """Parameter container; children are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ShapeMismatch(f"{name}: expected {p.data.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)
            p.zero_grad()
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
            p.step = 0

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SparseConv(Module):
    """K^3 sparse convolution; with ``out_coords`` it acts as a GSConv."""

    def __init__(self, c_in, c_out, rng, kernel_size=3, bias=True, dtype=np.float64):
        taps = kernel_size ** 3
        self.kernel_size = kernel_size
        self.weight = Parameter(_uniform(rng, (taps, c_in, c_out), taps * c_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: SparseTensor, out_coords=None) -> SparseTensor:
        if out_coords is None:
            return sp.spconv(x, self.weight, self.bias)
        return sp.gsconv(x, out_coords, self.weight, self.bias)

    def set_identity(self):
        """Centre tap = identity, everything else (bias included) zero."""
        w = np.zeros_like(self.weight.data)
        c = min(w.shape[1], w.shape[2])
        w[w.shape[0] // 2, np.arange(c), np.arange(c)] = 1.0
        self.weight.data = w
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class TransposedConv(Module):
    def __init__(self, c_in, c_out, rng, kernel_size=2, up_factor=2, bias=True, dtype=np.float64):
        taps = kernel_size ** 3
        self.up_factor = up_factor
        self.weight = Parameter(_uniform(rng, (taps, c_in, c_out), taps * c_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: SparseTensor) -> SparseTensor:
        return sp.tsconv_upsample(x, self.weight, self.bias, self.up_factor)


class Linear(Module):
    def __init__(self, c_in, c_out, rng, bias=True, zero_init=False, dtype=np.float64):
        if zero_init:
            w = np.zeros((c_in, c_out), dtype=dtype)
        else:
            w = _uniform(rng, (c_in, c_out), c_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: SparseTensor) -> SparseTensor:
        return sp.linear(x, self.weight, self.bias)


class DenseBlock(Module):
    """Four densely connected SPConv+ReLU stages and a 1x1x1 projection.

    Stage ``i`` sees the block input concatenated with the outputs of stages
    ``1..i-1``; the projection sees everything and maps to ``c_out``.
    """

    def __init__(self, c_in, growth, c_out, rng, stages=4, dtype=np.float64):
        self.c_in, self.growth, self.c_out = c_in, growth, c_out
        self.stages = [
            SparseConv(c_in + i * growth, growth, rng, dtype=dtype) for i in range(stages)
        ]
        self.project = Linear(c_in + stages * growth, c_out, rng, dtype=dtype)

    def stage_widths(self) -> list:
        return [(s.weight.shape[1], s.weight.shape[2]) for s in self.stages]

    def forward(self, x: SparseTensor) -> SparseTensor:
        if x.channels != self.c_in:
            raise ShapeMismatch(f"dense block expects {self.c_in} channels, got {x.channels}")
        feats = [x]
        for stage in self.stages:
            inp = feats[0] if len(feats) == 1 else sp.concat_channels(*feats)
            feats.append(sp.relu(stage(inp)))
        return self.project(sp.concat_channels(*feats))


def dense_block(x: SparseTensor, block: DenseBlock) -> SparseTensor:
    return block(x)


class LayerNorm(Module):
    def __init__(self, channels, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: SparseTensor) -> SparseTensor:
        return sp.layer_norm(x, self.gamma, self.beta)


class ConvBlock(Module):
    """Two SPConv+ReLU layers; stands in for one U-Net stage.

    With ``norm`` each convolution is followed by a per-voxel layer norm,
    which keeps activations from shrinking through deep stacks on sparse
    surfaces where most kernel taps are empty.
    """

    def __init__(self, c_in, c_out, rng, dtype=np.float64, norm=True):
        self.conv1 = SparseConv(c_in, c_out, rng, dtype=dtype)
        self.conv2 = SparseConv(c_out, c_out, rng, dtype=dtype)
        self.norms = [LayerNorm(c_out, dtype), LayerNorm(c_out, dtype)] if norm else []

    def forward(self, x: SparseTensor) -> SparseTensor:
        h = self.conv1(x)
        if self.norms:
            h = self.norms[0](h)
        h = self.conv2(sp.relu(h))
        if self.norms:
            h = self.norms[1](h)
        return sp.relu(h)


class FeatureUNet(Module):
    """Sparse U-Net: ``levels`` encoder stages, ``levels - 1`` pools, mirrored decoder.

    Decoder stage ``s`` unpools the coarser decoder output onto encoder level
    ``s`` coordinates, concatenates the skip features and applies a block.
    Output coordinates equal the input coordinates.
    """

    def __init__(self, widths, input_width, rng, dtype=np.float64, norm=True):
        widths = list(widths)
        self.widths = widths
        self.encoders = [ConvBlock(input_width, widths[0], rng, dtype, norm)]
        self.encoders += [ConvBlock(widths[s - 1], widths[s], rng, dtype, norm)
                          for s in range(1, len(widths))]
        # decoders[s] produces level-s features from level s+1 and skip s
        self.decoders = [ConvBlock(widths[s + 1] + widths[s], widths[s], rng, dtype, norm)
                         for s in range(len(widths) - 1)]

    def forward(self, x: SparseTensor, return_levels: bool = False):
        skips = [self.encoders[0](x)]
        for enc in self.encoders[1:]:
            skips.append(enc(sp.pool(skips[-1])))
        d = skips[-1]
        for s in reversed(range(len(self.decoders))):
            up = sp.unpool(d, skips[s])
            d = self.decoders[s](sp.concat_channels(up, skips[s]))
        if return_levels:
            return d, skips
        return d
