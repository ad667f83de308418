"""Binary model archives (``ROAD``) and per-shape label caches (``ROLB``).

Everything is little-endian. A model archive is::

    b"ROAD" | u32 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    | f32 weights, manifest order | codebook entries
      (u32 id_len | id bytes | D x f32)

A label cache is::

    b"ROLB" | u32 version | u32 id_len | id bytes | u32 max_lod
    | f64 center[3] | f64 scale
    | per lod 0..max_lod: u64 count | u64 morton[count] | f32 sdf[count] | f32 normal[count*3]
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from road.errors import FormatError
from road.geometry import LevelLabels, NormalizationTransform, VoxelLabelSet
from road.model import RoadModel

MODEL_MAGIC = b"ROAD"
MODEL_VERSION = 1
LABEL_MAGIC = b"ROLB"
LABEL_VERSION = 1


def _header(model: RoadModel, meta: dict | None) -> bytes:
    head = dict(model.config())
    head["shape_count"] = len(model.codebook)
    head["manifest"] = [[name, list(shape)] for name, shape in model.layer_shapes()]
    if meta:
        head["meta"] = meta
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_model(model: RoadModel, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    header = _header(model, meta)
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(header)))
    buf.write(header)
    for name, shape in model.layer_shapes():
        arr = model.params[name].data
        if arr.shape != tuple(shape):
            raise FormatError(f"parameter {name} has shape {arr.shape}, manifest says {shape}")
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for sid, z in model.codebook.items():
        raw = sid.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(np.ascontiguousarray(z.data, dtype="<f4").tobytes())
    return buf.getvalue()


def deserialize_model(data: bytes, dtype=np.float32) -> tuple[RoadModel, dict]:
    """Parse an archive; returns the model and the header's ``meta`` dict."""
    if data[:4] != MODEL_MAGIC:
        raise FormatError("not a model archive (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model archive version {version}")
        head = json.loads(data[12:12 + hlen].decode("utf-8"))
        off = 12 + hlen
        model = RoadModel(
            latent_dim=head["latent_dim"], max_lod=head["max_lod"], hidden=head["hidden"],
            fusion=head["fusion"], head_layout=head["head_layout"], omega0=head["omega0"],
            concat_max_lod=head["concat_max_lod"], dtype=dtype, init=False,
        )
        expected = [[n, list(s)] for n, s in model.layer_shapes()]
        if head["manifest"] != expected:
            raise FormatError("parameter manifest does not match the declared architecture")
        for name, shape in model.layer_shapes():
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            model.params.add(name, arr.astype(dtype))
        for _ in range(head["shape_count"]):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            sid = data[off:off + n].decode("utf-8")
            off += n
            z = np.frombuffer(data, dtype="<f4", count=model.latent_dim, offset=off)
            off += 4 * model.latent_dim
            model.set_latent(sid, z)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt model archive: {exc}") from exc
    if off != len(data):
        raise FormatError(f"model archive has {len(data) - off} trailing bytes")
    return model, head.get("meta", {})


def save_model(model: RoadModel, path, meta: dict | None = None) -> int:
    data = serialize_model(model, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path, dtype=np.float32) -> tuple[RoadModel, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read model archive {path}: {exc}") from exc
    return deserialize_model(data, dtype)


# ---------------------------------------------------------------------------
# label caches


def serialize_labels(labels: VoxelLabelSet) -> bytes:
    buf = io.BytesIO()
    sid = labels.shape_id.encode("utf-8")
    buf.write(LABEL_MAGIC)
    buf.write(struct.pack("<II", LABEL_VERSION, len(sid)))
    buf.write(sid)
    buf.write(struct.pack("<I", labels.max_lod))
    buf.write(np.asarray(labels.transform.center, dtype="<f8").tobytes())
    buf.write(struct.pack("<d", float(labels.transform.scale)))
    for lvl in labels.levels:
        buf.write(struct.pack("<Q", len(lvl)))
        buf.write(np.ascontiguousarray(lvl.keys, dtype="<u8").tobytes())
        buf.write(np.ascontiguousarray(lvl.sdf, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(lvl.normals, dtype="<f4").tobytes())
    return buf.getvalue()


def deserialize_labels(data: bytes) -> VoxelLabelSet:
    if data[:4] != LABEL_MAGIC:
        raise FormatError("not a label cache (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != LABEL_VERSION:
            raise FormatError(f"unsupported label cache version {version}")
        off = 12
        sid = data[off:off + n].decode("utf-8")
        off += n
        (max_lod,) = struct.unpack_from("<I", data, off)
        off += 4
        center = np.frombuffer(data, "<f8", 3, off).astype(np.float64)
        off += 24
        (scale,) = struct.unpack_from("<d", data, off)
        off += 8
        levels = []
        for _ in range(max_lod + 1):
            (cnt,) = struct.unpack_from("<Q", data, off)
            off += 8
            keys = np.frombuffer(data, "<u8", cnt, off).astype(np.uint64)
            off += 8 * cnt
            sdf = np.frombuffer(data, "<f4", cnt, off).astype(np.float32)
            off += 4 * cnt
            nrm = np.frombuffer(data, "<f4", 3 * cnt, off).astype(np.float32).reshape(cnt, 3)
            off += 12 * cnt
            if cnt > 1 and not np.all(keys[1:] > keys[:-1]):
                raise FormatError(f"label cache {sid!r}: Morton keys not strictly increasing")
            levels.append(LevelLabels(keys, sdf, nrm))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt label cache: {exc}") from exc
    if off != len(data):
        raise FormatError("label cache has trailing bytes")
    return VoxelLabelSet(sid, levels, NormalizationTransform(center, scale))


def save_labels(labels: VoxelLabelSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_labels(labels))


def load_labels(path) -> VoxelLabelSet:
    if not os.path.exists(path):
        raise FormatError(f"label cache {path} does not exist")
    with open(path, "rb") as fh:
        return deserialize_labels(fh.read())
