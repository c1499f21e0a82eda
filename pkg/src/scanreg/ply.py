"""Reader/writer for a documented PLY subset.

Supported: ascii 1.0 and binary_little_endian 1.0, one ``vertex`` element
with float or double x/y/z properties and optional nx/ny/nz normals. Other
scalar vertex properties are skipped on read; other elements (e.g. faces) are
rejected. Writing emits x/y/z (+ normals when present) as float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import DataError

_SIZES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def read_ply(path: str | Path) -> PointCloud:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    element = None
    for line in header[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise DataError(f"{path}: unsupported format {tokens[1]}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            element = tokens[1]
            if element == "vertex":
                count = int(tokens[2])
            elif int(tokens[2]) > 0:
                raise DataError(f"{path}: unsupported element {element}")
        elif tokens[0] == "property":
            if element != "vertex":
                continue
            if tokens[1] == "list":
                raise DataError(f"{path}: list properties are not supported")
            if tokens[1] not in _SIZES:
                raise DataError(f"{path}: unsupported property type {tokens[1]}")
            props.append((tokens[2], tokens[1]))
    if fmt is None or count is None:
        raise DataError(f"{path}: missing format or vertex element")
    names = [n for n, _ in props]
    if not {"x", "y", "z"} <= set(names):
        raise DataError(f"{path}: vertex element lacks x/y/z")
    has_normals = {"nx", "ny", "nz"} <= set(names)

    if fmt == "ascii":
        rows = np.loadtxt([ln for ln in body.decode("ascii").splitlines()
                           if ln.strip()], dtype=np.float64, ndmin=2)
        if rows.shape != (count, len(props)):
            raise DataError(f"{path}: expected {count} vertices with "
                            f"{len(props)} properties")
        table = {n: rows[:, k] for k, (n, _) in enumerate(props)}
    else:
        dtype = np.dtype([(n, "<" + _SIZES[t]) for n, t in props])
        if len(body) < count * dtype.itemsize:
            raise DataError(f"{path}: truncated binary payload")
        rec = np.frombuffer(body, dtype=dtype, count=count)
        table = {n: rec[n].astype(np.float64) for n, _ in props}

    points = np.column_stack([table["x"], table["y"], table["z"]])
    normals = None
    if has_normals:
        normals = np.column_stack([table["nx"], table["ny"], table["nz"]])
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.maximum(lengths, 1e-300)
    try:
        return PointCloud(points, normals)
    except Exception as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_ply(path: str | Path, cloud: PointCloud, fmt: str = "binary") -> Path:
    path = Path(path)
    if fmt not in ("binary", "ascii"):
        raise ValueError("fmt must be 'binary' or 'ascii'")
    names = ["x", "y", "z"]
    columns = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        columns.append(cloud.normals)
    data = np.hstack(columns)

    header = ["ply",
              "format ascii 1.0" if fmt == "ascii" else "format binary_little_endian 1.0",
              f"element vertex {len(data)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(head)
        if fmt == "ascii":
            lines = "\n".join(" ".join(repr(float(v)) for v in row)
                              for row in data)
            fh.write((lines + "\n").encode("ascii"))
        else:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return path
