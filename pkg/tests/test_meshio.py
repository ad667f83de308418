import struct

import numpy as np
import pytest

from road.errors import FormatError, GeometryError
from road.formats import deserialize_labels, load_labels, serialize_labels, save_labels
from road.geometry import OrientedPointCloud, build_labels
from road.meshio import Mesh, PointCloud, load_shape, write_obj, write_ply


def test_obj_quads_and_negative_indices(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4/1 -3/2 -2/3 -1/4\n")
    m = load_shape(p)
    assert isinstance(m, Mesh)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_errors(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(GeometryError):
        load_shape(p)
    p.write_text("v 0 0\n")
    with pytest.raises(GeometryError):
        load_shape(p)
    with pytest.raises(GeometryError):
        load_shape(tmp_path / "x.stl")


def test_obj_round_trip(tmp_path):
    m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]]), np.array([[0, 1, 2]]))
    write_obj(tmp_path / "t.obj", m)
    back = load_shape(tmp_path / "t.obj")
    np.testing.assert_allclose(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_ascii_ply_mesh(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty float x\nproperty float y\n"
                 "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
                 "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    m = load_shape(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_binary_ply_mesh(tmp_path):
    p = tmp_path / "b.ply"
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
            "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n").encode()
    body = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], "<f4").tobytes() + struct.pack("<B3i", 3, 0, 1, 2)
    p.write_bytes(head + body)
    m = load_shape(p)
    assert m.faces.tolist() == [[0, 1, 2]]
    np.testing.assert_array_equal(m.vertices[1], [1, 0, 0])


def test_point_cloud_ply(tmp_path, rng):
    pts, nrm = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    write_ply(tmp_path / "c.ply", pts, nrm)
    pc = load_shape(tmp_path / "c.ply")
    assert isinstance(pc, PointCloud)
    np.testing.assert_array_equal(pc.points, pts.astype(np.float32))
    write_ply(tmp_path / "bare.ply", pts)
    with pytest.raises(GeometryError, match="normals required"):
        load_shape(tmp_path / "bare.ply")


def test_label_cache_round_trip(tmp_path, rng):
    pts = rng.uniform(-0.9, 0.9, (300, 3))
    nrm = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    labels = build_labels(OrientedPointCloud(pts, nrm, "blob"), 3)
    save_labels(labels, tmp_path / "l.rolb")
    back = load_labels(tmp_path / "l.rolb")
    assert back.shape_id == "blob" and back.max_lod == 3
    for a, b in zip(labels.levels, back.levels):
        np.testing.assert_array_equal(a.keys, b.keys)
        np.testing.assert_array_equal(a.sdf, b.sdf)
        np.testing.assert_array_equal(a.normals, b.normals)
    data = serialize_labels(labels)
    with pytest.raises(FormatError):
        deserialize_labels(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        deserialize_labels(data[:-3])
    with pytest.raises(FormatError):
        load_labels(tmp_path / "missing.rolb")


def test_label_cache_rejects_unsorted_keys(rng):
    pts = rng.uniform(-0.9, 0.9, (300, 3))
    labels = build_labels(OrientedPointCloud(pts, np.tile([0, 0, 1.0], (300, 1))), 2)
    labels.levels[2].keys = labels.levels[2].keys[::-1].copy()
    with pytest.raises(FormatError, match="increasing"):
        deserialize_labels(serialize_labels(labels))
