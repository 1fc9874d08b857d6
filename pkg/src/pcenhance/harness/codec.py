"""Deterministic codec stand-in and an external-codec subprocess hook.

The stand-in is not a real codec: geometry is coarsened by integer
coordinate division and attributes are uniformly quantized. Its bitrate is
an order-0 entropy estimate of the quantized symbols.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..errors import CodecError
from ..ply import read_ply, write_ply
from ..voxel import VoxelFrame, frame_from_arrays

MODES = ("stand-in", "external-codec")
COUNT_BITS = 32


@dataclass(frozen=True)
class DegradationConfig:
    """``attribute_qstep`` is in 8-bit RGB units; 1 is lossless on integer colors."""

    geometry_downscale: int = 1
    attribute_qstep: float = 1.0
    mode: str = "stand-in"
    codec_cmd: Optional[str] = None

    def __post_init__(self):
        if int(self.geometry_downscale) != self.geometry_downscale or self.geometry_downscale < 1:
            raise ValueError("geometry_downscale must be an integer >= 1")
        if not self.attribute_qstep > 0:
            raise ValueError("attribute_qstep must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "external-codec" and not self.codec_cmd:
            raise ValueError("external-codec mode needs codec_cmd")

    def to_dict(self):
        return asdict(self)


# Rate ladder from coarse to fine, shaped like a five-point codec test set.
PRESETS = {
    "R01": DegradationConfig(16, 32.0),
    "R02": DegradationConfig(8, 16.0),
    "R03": DegradationConfig(4, 10.0),
    "R04": DegradationConfig(2, 6.0),
    "R05": DegradationConfig(2, 3.0),
}


def entropy_bits(symbols: np.ndarray) -> float:
    """Order-0 empirical entropy of ``symbols`` times their count."""
    symbols = np.asarray(symbols).ravel()
    if symbols.size == 0:
        return 0.0
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return float(-(counts * np.log2(p)).sum())


def degrade_geometry(frame: VoxelFrame, factor: int) -> VoxelFrame:
    """Floor-divide, merge and rescale coordinates; attributes are averaged."""
    if factor == 1:
        return frame
    coarse = (frame.coords // factor) * factor
    return frame_from_arrays(coarse, frame.attrs, frame.bit_depth, frame.frame_index, frame.color_space)


def quantize_attrs(attrs: np.ndarray, qstep: float):
    """Mid-tread quantization; returns ``(symbols, reconstruction)``."""
    symbols = np.rint(np.asarray(attrs) / qstep).astype(np.int64)
    return symbols, np.clip(symbols * qstep, 0.0, 255.0)


def degrade(frame: VoxelFrame, cfg: DegradationConfig):
    """Return ``(decoded_frame, bits)``; ``bits / len(frame)`` is the bpip proxy.

    Geometry bits are the entropy of the coarse coordinates (one symbol
    stream per axis), attribute bits the entropy of the per-channel
    quantization indices; a fixed header carries the point count.
    """
    if cfg.mode == "external-codec":
        decoded, nbytes = external_codec_hook(frame, cfg.codec_cmd)
        return decoded, 8.0 * nbytes
    dec = degrade_geometry(frame, cfg.geometry_downscale)
    cells = dec.coords // cfg.geometry_downscale
    bits = COUNT_BITS + sum(entropy_bits(cells[:, a]) for a in range(3))
    if dec.attrs is not None:
        symbols, recon = quantize_attrs(dec.attrs, cfg.attribute_qstep)
        bits += sum(entropy_bits(symbols[:, c]) for c in range(symbols.shape[1]))
        dec = dec.with_attrs(recon)
    return dec, bits


def degrade_attributes(frame: VoxelFrame, qstep: float):
    """Attribute-only coding on fixed geometry: ``(decoded, bits)``."""
    symbols, recon = quantize_attrs(frame.attrs, qstep)
    bits = COUNT_BITS + sum(entropy_bits(symbols[:, c]) for c in range(symbols.shape[1]))
    return frame.with_attrs(recon), bits


def external_codec_hook(frame: VoxelFrame, cmdline_template: str):
    """Round-trip ``frame`` through an external encoder/decoder command.

    The template must contain ``{input}`` and ``{output}`` and may contain
    ``{bitstream}``; bytes are counted from the bitstream file when given,
    else from the decoded output.
    """
    if "{input}" not in cmdline_template or "{output}" not in cmdline_template:
        raise CodecError("codec template needs {input} and {output} placeholders")
    with tempfile.TemporaryDirectory(prefix="pcecodec_") as tmp:
        paths = {k: os.path.join(tmp, f"{k}.{ext}") for k, ext in
                 (("input", "ply"), ("output", "ply"), ("bitstream", "bin"))}
        write_ply(paths["input"], frame)
        cmd = cmdline_template.format(**{k: shlex.quote(v) for k, v in paths.items()})
        try:
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        except OSError as exc:
            raise CodecError(f"could not launch codec: {exc}") from exc
        if proc.returncode != 0:
            raise CodecError("codec exited with an error", proc.returncode, proc.stdout, proc.stderr)
        try:
            decoded = read_ply(paths["output"], frame.bit_depth, frame.frame_index)
        except (OSError, ValueError) as exc:
            raise CodecError(f"unreadable codec output: {exc}", proc.returncode,
                             proc.stdout, proc.stderr) from exc
        counted = paths["bitstream"] if "{bitstream}" in cmdline_template else paths["output"]
        if not os.path.exists(counted):
            raise CodecError("codec did not write a bitstream", proc.returncode, proc.stdout, proc.stderr)
        return decoded, os.path.getsize(counted)
