"""Sectioned binary checkpoint format.

Layout::

    magic   8 bytes  b"PCECKPT1"
    length  uint64   little-endian byte length of the manifest
    manifest         UTF-8 JSON: {"metadata": {...}, "tensors": [
                         {"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    padding          zero bytes up to a 64-byte boundary
    payload          raw little-endian arrays; offsets are relative to here
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PCECKPT1"
_ALIGN = 64


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    manifest = json.dumps({"metadata": metadata or {}, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    with open(path, "wb") as fh:
        fh.write(head + b"\0" * _pad(len(head)))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(tensors, metadata)``; tensors is an insertion-ordered dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (mlen,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    base = 16 + mlen
    base += _pad(base)
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return tensors, manifest["metadata"]
