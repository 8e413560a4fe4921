"""Minimal binary little-endian PLY reader/writer for Gaussian splat files.

Only the vertex element is interpreted. The reader tolerates unknown extra
per-vertex properties (they are parsed for stride and ignored); the writer
emits exactly the splat layout: positions, log-space scales, a w-first
rotation quaternion, an opacity logit, and optional uint8 colors.
"""

from __future__ import annotations

import numpy as np


class SplatFileError(ValueError):
    """Raised for malformed or incomplete splat PLY files."""


_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}

SPLAT_FIELDS = (
    "x",
    "y",
    "z",
    "scale_0",
    "scale_1",
    "scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
    "opacity",
)


def read_splat_arrays(path: str) -> dict[str, np.ndarray]:
    """Read the vertex element of a binary splat PLY as a dict of columns.

    Raises SplatFileError naming the first missing required field.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise SplatFileError(f"{path}: not a PLY file")
        fmt = fh.readline().split()
        if len(fmt) < 2 or fmt[0] != b"format" or fmt[1] != b"binary_little_endian":
            raise SplatFileError(f"{path}: expected binary_little_endian format")

        count = None
        fields: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise SplatFileError(f"{path}: header ended before end_header")
            tokens = line.split()
            if not tokens:
                continue
            key = tokens[0]
            if key == b"comment":
                continue
            if key == b"element":
                in_vertex = tokens[1] == b"vertex"
                if in_vertex:
                    count = int(tokens[2])
            elif key == b"property" and in_vertex:
                if tokens[1] == b"list":
                    raise SplatFileError(f"{path}: list properties are not supported")
                type_name = tokens[1].decode()
                prop = tokens[2].decode()
                if type_name not in _PLY_TYPES:
                    raise SplatFileError(f"{path}: unknown property type {type_name}")
                fields.append((prop, _PLY_TYPES[type_name]))
            elif key == b"end_header":
                break
        if count is None:
            raise SplatFileError(f"{path}: missing 'element vertex' declaration")

        names = [name for name, _ in fields]
        for required in SPLAT_FIELDS:
            if required not in names:
                raise SplatFileError(f"{path}: missing required field {required!r}")

        dtype = np.dtype(fields)
        raw = fh.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise SplatFileError(f"{path}: truncated vertex data")
        records = np.frombuffer(raw, dtype=dtype, count=count)

    return {name: np.ascontiguousarray(records[name]) for name in names}


def write_splat_ply(
    path: str,
    means: np.ndarray,
    log_scales: np.ndarray,
    quats_wxyz: np.ndarray,
    opacity_logits: np.ndarray,
    colors: np.ndarray | None = None,
) -> None:
    """Write a binary splat PLY. ``colors`` (N x 3 uint8) is optional."""
    means = np.asarray(means, dtype=np.float32)
    n = means.shape[0]
    fields = [(name, "<f4") for name in SPLAT_FIELDS]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    records = np.zeros(n, dtype=np.dtype(fields))
    records["x"], records["y"], records["z"] = means.T
    for i in range(3):
        records[f"scale_{i}"] = np.asarray(log_scales, dtype=np.float32)[:, i]
    for i in range(4):
        records[f"rot_{i}"] = np.asarray(quats_wxyz, dtype=np.float32)[:, i]
    records["opacity"] = np.asarray(opacity_logits, dtype=np.float32)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        records["red"], records["green"], records["blue"] = colors.T

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    type_names = {"<f4": "float", "u1": "uchar"}
    header += [f"property {type_names[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(records.tobytes())
