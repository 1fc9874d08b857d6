"""Minimal PLY reader/writer for voxel frames (ASCII and binary little-endian)."""

from __future__ import annotations

import os

import numpy as np

from .errors import PlyFormatError
from .voxel import VoxelFrame, frame_from_arrays

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_COLOR_NAMES = ("red", "green", "blue")


def _parse_header(fh):
    line = fh.readline().strip()
    if line != b"ply":
        raise PlyFormatError("not a PLY file")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyFormatError("unterminated PLY header")
        parts = raw.decode("ascii").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is not None:
                # vertex data comes first; later elements are ignored
                pass
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyFormatError("list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyFormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise PlyFormatError("PLY file has no vertex element")
    return fmt, count, props


def read_ply(path, bit_depth: int = 10, frame_index: int = 0) -> VoxelFrame:
    """Read x, y, z and optional red/green/blue into a canonical frame.

    Coordinates are floored to integers; duplicates are merged by mean.
    """
    with open(path, "rb") as fh:
        fmt, count, props = _parse_header(fh)
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if fmt == "ascii":
            table = np.loadtxt(fh, ndmin=2, max_rows=count) if count else np.empty((0, len(props)))
            data = np.empty(count, dtype=dtype)
            for i, (name, _) in enumerate(props):
                data[name] = table[:, i]
        else:
            data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
    names = [p[0] for p in props]
    xyz = np.stack([data[k].astype(np.float64) for k in ("x", "y", "z")], axis=1)
    attrs = None
    if all(c in names for c in _COLOR_NAMES):
        attrs = np.stack([data[c].astype(np.float64) for c in _COLOR_NAMES], axis=1)
    return frame_from_arrays(np.floor(xyz), attrs, bit_depth, frame_index, "rgb")


def write_ply(path, frame: VoxelFrame, binary: bool = True) -> int:
    """Write a frame; returns the file size in bytes.

    Integer-valued attributes in [0, 255] are stored as ``uchar``; anything
    else (averaged or YUV-derived colors) as ``double`` so nothing is lost.
    """
    n = len(frame)
    fields = [("x", "<i4"), ("y", "<i4"), ("z", "<i4")]
    attrs = frame.attrs
    color_type = None
    if attrs is not None:
        integral = (np.all(attrs == np.round(attrs))
                    and attrs.min(initial=0) >= 0 and attrs.max(initial=0) <= 255)
        color_type = "<u1" if integral else "<f8"
        fields += [(c, color_type) for c in _COLOR_NAMES]
    rec = np.empty(n, dtype=fields)
    for i, k in enumerate(("x", "y", "z")):
        rec[k] = frame.coords[:, i]
    if attrs is not None:
        for i, c in enumerate(_COLOR_NAMES):
            rec[c] = attrs[:, i]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property int {k}" for k in ("x", "y", "z")]
    if attrs is not None:
        ply_t = "uchar" if color_type == "<u1" else "double"
        header += [f"property {ply_t} {c}" for c in _COLOR_NAMES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                vals = [str(int(row[k])) for k in ("x", "y", "z")]
                if attrs is not None:
                    if color_type == "<u1":
                        vals += [str(int(row[c])) for c in _COLOR_NAMES]
                    else:
                        vals += [repr(float(row[c])) for c in _COLOR_NAMES]
                fh.write((" ".join(vals) + "\n").encode("ascii"))
    return os.path.getsize(path)
