"""Minimal PLY reader/writer: ASCII and binary_little_endian.

Handles the shapes this package produces and consumes: point clouds with an
optional scalar channel, and triangle meshes with optional per-vertex uchar
colors. Property order on write is fixed (x y z [intensity] [r g b]) so
reruns are byte-identical.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

_DTYPES = {
    "char": "i1",
    "uchar": "u1",
    "short": "i2",
    "ushort": "u2",
    "int": "i4",
    "uint": "u4",
    "int8": "i1",
    "uint8": "u1",
    "int16": "i2",
    "uint16": "u2",
    "int32": "i4",
    "uint32": "u4",
    "float": "f4",
    "double": "f8",
    "float32": "f4",
    "float64": "f8",
}


@dataclass
class PlyData:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray | None = None  # (M, 3) int64
    channel: np.ndarray | None = None  # (N,) float64
    colors: np.ndarray | None = None  # (N, 3) uint8


def _parse_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise ParseError("not a PLY file (missing 'ply' magic)", line=1)
    fmt = None
    elements = []  # list of (name, count, [(prop_name, dtype, is_list, count_dtype)])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("unexpected EOF in PLY header", line=lineno)
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before element", line=lineno)
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], _DTYPES[tokens[3]], True, _DTYPES[tokens[2]]))
            else:
                elements[-1][2].append((tokens[2], _DTYPES[tokens[1]], False, None))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format '{fmt}'")
    return fmt, elements


def _read_ascii_element(fh, count, props):
    rows = []
    for _ in range(count):
        tokens = fh.readline().split()
        rows.append(tokens)
    return rows


def read_ply(path) -> PlyData:
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        data = {}
        for name, count, props in elements:
            if fmt == "ascii":
                data[name] = _read_ascii_records(fh, count, props)
            else:
                data[name] = _read_binary_records(fh, count, props)

    if "vertex" not in data:
        raise ParseError("PLY file has no vertex element")
    vert = data["vertex"]
    try:
        xyz = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    except KeyError as e:
        raise ParseError(f"vertex element missing coordinate property {e}") from e
    channel = None
    for cand in ("intensity", "scalar", "ring"):
        if cand in vert:
            channel = vert[cand].astype(np.float64)
            break
    colors = None
    if all(c in vert for c in ("red", "green", "blue")):
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1).astype(np.uint8)
    faces = None
    if "face" in data:
        face_lists = data["face"].get("vertex_indices", data["face"].get("vertex_index"))
        if face_lists is not None and len(face_lists):
            faces = np.asarray(face_lists, dtype=np.int64)
            if faces.ndim != 2 or faces.shape[1] != 3:
                raise ParseError("only triangle faces are supported")
    return PlyData(vertices=xyz, faces=faces, channel=channel, colors=colors)


def _read_ascii_records(fh, count, props):
    out = {p[0]: [] for p in props}
    for i in range(count):
        tokens = fh.readline().split()
        if not tokens:
            raise ParseError("short ASCII PLY body", line=None)
        pos = 0
        for pname, dt, is_list, _ in props:
            if is_list:
                n = int(tokens[pos])
                vals = [float(v) for v in tokens[pos + 1 : pos + 1 + n]]
                pos += 1 + n
                out[pname].append(vals)
            else:
                out[pname].append(float(tokens[pos]))
                pos += 1
    return {
        k: (v if v and isinstance(v[0], list) else np.asarray(v))
        for k, v in out.items()
    }


def _read_binary_records(fh, count, props):
    out = {p[0]: [] for p in props}
    has_list = any(p[2] for p in props)
    if not has_list:
        dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
        buf = fh.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise ParseError("short binary PLY body")
        rec = np.frombuffer(buf, dtype=dtype, count=count)
        return {p[0]: rec[p[0]] for p in props}
    for _ in range(count):
        for pname, dt, is_list, count_dt in props:
            if is_list:
                n = int(np.frombuffer(fh.read(np.dtype(count_dt).itemsize), dtype="<" + count_dt)[0])
                vals = np.frombuffer(fh.read(np.dtype(dt).itemsize * n), dtype="<" + dt)
                out[pname].append(vals.tolist())
            else:
                out[pname].append(np.frombuffer(fh.read(np.dtype(dt).itemsize), dtype="<" + dt)[0])
    return {k: (v if isinstance(v[0], list) else np.asarray(v)) for k, v in out.items()}


def write_ply(path, vertices, faces=None, channel=None, colors=None, binary=True):
    """Write a point cloud or triangle mesh.

    vertices: (N, 3) float; faces: (M, 3) int or None; channel: (N,) float or
    None; colors: (N, 3) uint8 or None.
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    n = vertices.shape[0]
    header = io.StringIO()
    header.write("ply\n")
    header.write(f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n")
    header.write(f"element vertex {n}\n")
    header.write("property float x\nproperty float y\nproperty float z\n")
    if channel is not None:
        header.write("property float intensity\n")
    if colors is not None:
        header.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header.write(f"element face {faces.shape[0]}\n")
        header.write("property list uchar int vertex_indices\n")
    header.write("end_header\n")

    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if channel is not None:
                fields.append(("intensity", "<f4"))
            if colors is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.zeros(n, dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = vertices.T.astype(np.float32)
            if channel is not None:
                rec["intensity"] = np.asarray(channel, dtype=np.float32)
            if colors is not None:
                cols = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
                rec["red"], rec["green"], rec["blue"] = cols.T
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.zeros(
                    faces.shape[0], dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
                )
                frec["n"] = 3
                frec["idx"] = faces.astype(np.int32)
                fh.write(frec.tobytes())
        else:
            body = io.StringIO()
            chan = None if channel is None else np.asarray(channel, dtype=np.float32)
            cols = None if colors is None else np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
            for i in range(n):
                parts = [f"{float(v):.9g}" for v in vertices[i].astype(np.float32)]
                if chan is not None:
                    parts.append(f"{float(chan[i]):.9g}")
                if cols is not None:
                    parts.extend(str(int(v)) for v in cols[i])
                body.write(" ".join(parts) + "\n")
            if faces is not None:
                for f in faces:
                    body.write(f"3 {f[0]} {f[1]} {f[2]}\n")
            fh.write(body.getvalue().encode("ascii"))


def read_cloud(path):
    """Read a PLY as a point cloud, ignoring any faces."""
    from .geometry import PointCloud

    data = read_ply(path)
    return PointCloud(data.vertices, data.channel)


def write_cloud(path, cloud, binary=True):
    from .geometry import as_xyz

    channel = cloud.channel if hasattr(cloud, "channel") else None
    write_ply(path, as_xyz(cloud), channel=channel, binary=binary)
