"""OBJ and PLY reading, binary PLY writing."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from road.errors import GeometryError


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    normals: np.ndarray  # (N, 3) float64


def load_shape(path, format: str | None = None) -> Mesh | PointCloud:
    """Load an OBJ or PLY file as a triangle mesh or an oriented point cloud.

    PLY files without faces must carry ``nx, ny, nz``; a bare point set has no
    orientation and cannot be labelled.
    """
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).lower()
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "ply":
        return _load_ply(path)
    raise GeometryError(f"unsupported shape format {fmt!r} for {path}")


def _load_obj(path: str) -> Mesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise GeometryError(f"{path}:{lineno}: vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise GeometryError(f"{path}:{lineno}: face needs at least 3 vertices")
                    # fan-triangulate polygons
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
    except (ValueError, IndexError) as exc:
        raise GeometryError(f"failed to parse OBJ {path}: {exc}") from exc
    if not verts or not faces:
        raise GeometryError(f"OBJ {path} has no triangles")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if f.min() < 0 or f.max() >= len(v):
        raise GeometryError(f"OBJ {path} references missing vertices")
    return Mesh(v, f)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise GeometryError(f"{path} is not a PLY file")
    fmt = None
    elements: list[dict] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise GeometryError(f"{path}: truncated PLY header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise GeometryError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1]["props"].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise GeometryError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def _load_ply(path: str) -> Mesh | PointCloud:
    try:
        with open(path, "rb") as fh:
            fmt, elements = _parse_ply_header(fh, path)
            body = fh.read()
    except OSError as exc:
        raise GeometryError(f"cannot read {path}: {exc}") from exc
    try:
        if fmt == "ascii":
            data = _read_ply_ascii(body, elements)
        else:
            data = _read_ply_binary(body, elements)
    except (ValueError, IndexError, KeyError) as exc:
        raise GeometryError(f"failed to parse PLY {path}: {exc}") from exc

    vert = data.get("vertex")
    if vert is None or not all(k in vert for k in ("x", "y", "z")):
        raise GeometryError(f"{path}: PLY has no x/y/z vertex properties")
    points = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    faces = data.get("face", {}).get("vertex_indices", data.get("face", {}).get("vertex_index"))
    if faces is not None and len(faces):
        tris = []
        for poly in faces:
            for k in range(1, len(poly) - 1):
                tris.append((poly[0], poly[k], poly[k + 1]))
        return Mesh(points, np.asarray(tris, dtype=np.int64))
    if not all(k in vert for k in ("nx", "ny", "nz")):
        raise GeometryError(f"{path}: point cloud without faces: normals required")
    normals = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1).astype(np.float64)
    return PointCloud(points, normals)


def _read_ply_ascii(body: bytes, elements):
    tokens = body.split()
    pos = 0
    out = {}
    for el in elements:
        cols: dict[str, list] = {p[0]: [] for p in el["props"]}
        for _ in range(el["count"]):
            for prop in el["props"]:
                if prop[1] == "list":
                    n = int(tokens[pos])
                    pos += 1
                    cols[prop[0]].append([int(t) for t in tokens[pos:pos + n]])
                    pos += n
                else:
                    cols[prop[0]].append(float(tokens[pos]))
                    pos += 1
        out[el["name"]] = {
            k: (v if el["props"][i][1] == "list" else np.asarray(v))
            for i, (k, v) in enumerate(cols.items())
        }
    return out


def _read_ply_binary(body: bytes, elements):
    out = {}
    offset = 0
    for el in elements:
        has_list = any(p[1] == "list" for p in el["props"])
        if not has_list:
            dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in el["props"]])
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
            out[el["name"]] = {name: arr[name] for name in dt.names}
            continue
        cols: dict[str, list] = {p[0]: [] for p in el["props"]}
        for _ in range(el["count"]):
            for prop in el["props"]:
                if prop[1] == "list":
                    cnt_t = np.dtype("<" + _PLY_TYPES[prop[2]])
                    idx_t = np.dtype("<" + _PLY_TYPES[prop[3]])
                    n = int(np.frombuffer(body, cnt_t, 1, offset)[0])
                    offset += cnt_t.itemsize
                    cols[prop[0]].append(np.frombuffer(body, idx_t, n, offset).tolist())
                    offset += idx_t.itemsize * n
                else:
                    t = np.dtype("<" + _PLY_TYPES[prop[1]])
                    cols[prop[0]].append(np.frombuffer(body, t, 1, offset)[0])
                    offset += t.itemsize
        out[el["name"]] = cols
    return out


def write_ply(path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    """Write a binary little-endian PLY with float32 x,y,z[,nx,ny,nz]."""
    points = np.asarray(points, dtype=np.float32)
    fields = ["x", "y", "z"]
    cols = [points]
    if normals is not None:
        fields += ["nx", "ny", "nz"]
        cols.append(np.asarray(normals, dtype=np.float32))
    dt = np.dtype([(f, "<f4") for f in fields])
    rec = np.empty(len(points), dtype=dt)
    flat = np.concatenate(cols, axis=1) if cols else points
    for i, f in enumerate(fields):
        rec[f] = flat[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property float {f}" for f in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def write_obj(path, mesh: Mesh) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
