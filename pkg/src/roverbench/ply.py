"""Minimal PLY point-cloud I/O (binary little-endian float32 xyz on write)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(points, path, comment: str | None = None) -> Path:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0"]
    if comment:
        header.append(f"comment {comment}")
    header += [
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(pts.tobytes())
    return path


def read_ply(path) -> np.ndarray:
    """Read the ``x, y, z`` vertex properties as an ``(n, 3)`` float64 array."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    fmt = None
    count = 0
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in data[:end].decode("ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif props or count:
                # elements after the vertex block do not affect vertex parsing
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    names = [n for n, _ in props]
    if not {"x", "y", "z"} <= set(names):
        raise ValueError(f"{path}: vertex element lacks x/y/z")
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:count]
        arr = np.array([[float(v) for v in r.split()[: len(props)]] for r in rows]).reshape(-1, len(props))
        return arr[:, [names.index(c) for c in "xyz"]].astype(np.float64)
    if fmt not in ("binary_little_endian", "binary_big_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    endian = "<" if fmt == "binary_little_endian" else ">"
    dtype = np.dtype([(n, endian + t) for n, t in props])
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
