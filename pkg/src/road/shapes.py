"""Analytic toy shapes as closed, outward-oriented triangle meshes."""

from __future__ import annotations

import numpy as np

from road.meshio import Mesh


def _grid_mesh(pts: np.ndarray, periodic_v: bool) -> Mesh:
    """Triangulate an (nv, nu, 3) grid, periodic in u (and optionally v)."""
    nv, nu, _ = pts.shape
    idx = np.arange(nv * nu).reshape(nv, nu)
    rows = nv if periodic_v else nv - 1
    faces = []
    for a in range(rows):
        b = (a + 1) % nv
        for i in range(nu):
            j = (i + 1) % nu
            faces.append((idx[a, i], idx[b, i], idx[b, j]))
            faces.append((idx[a, i], idx[b, j], idx[a, j]))
    mesh = Mesh(pts.reshape(-1, 3).astype(np.float64), np.asarray(faces, dtype=np.int64))
    return _orient_outward(_weld(mesh))


def _weld(mesh: Mesh, decimals: int = 12) -> Mesh:
    """Merge coincident vertices (revolution poles) and drop collapsed faces."""
    key = np.round(mesh.vertices, decimals) + 0.0  # folds -0.0 into 0.0
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    f = inv.reshape(-1)[mesh.faces]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return Mesh(uniq, f[ok])


def _orient_outward(mesh: Mesh) -> Mesh:
    v = mesh.vertices[mesh.faces]
    vol = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0
    if vol < 0:
        mesh = Mesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh


def _revolve(radius: np.ndarray, height: np.ndarray, nu: int) -> Mesh:
    u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    pts = np.stack(
        [radius[:, None] * np.cos(u)[None], radius[:, None] * np.sin(u)[None], np.broadcast_to(height[:, None], (len(radius), nu))],
        axis=-1,
    )
    return _grid_mesh(pts, periodic_v=False)


def sphere(radius: float = 0.5, nu: int = 128, nv: int = 64) -> Mesh:
    v = np.linspace(0, np.pi, nv + 1)
    return _revolve(radius * np.sin(v), radius * np.cos(v), nu)


def torus(major: float = 0.6, minor: float = 0.25, nu: int = 128, nv: int = 48) -> Mesh:
    u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    r = major + minor * np.cos(v)[:, None]
    pts = np.stack([r * np.cos(u)[None], r * np.sin(u)[None], np.broadcast_to((minor * np.sin(v))[:, None], (nv, nu))], axis=-1)
    return _grid_mesh(pts, periodic_v=True)


def box(size=(1.0, 0.7, 0.5)) -> Mesh:
    hx, hy, hz = (s / 2 for s in size)
    v = np.array([[x, y, z] for z in (-hz, hz) for y in (-hy, hy) for x in (-hx, hx)], dtype=np.float64)
    # vertex index = x + 2y + 4z (bits)
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    faces = np.asarray(faces, dtype=np.int64)
    tri = v[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inward = np.einsum("ij,ij->i", normal, tri.mean(axis=1)) < 0
    faces[inward] = faces[inward][:, ::-1]
    return Mesh(v, faces)


def capsule(radius: float = 0.3, length: float = 0.8, nu: int = 96, n_cap: int = 24, n_body: int = 24) -> Mesh:
    """Cylinder of ``length`` along z with hemispherical caps."""
    half = length / 2
    t_top = np.linspace(0, np.pi / 2, n_cap + 1)
    t_bot = np.linspace(np.pi / 2, np.pi, n_cap + 1)
    z_body = np.linspace(half, -half, n_body + 1)[1:-1]
    r = np.concatenate([radius * np.sin(t_top), np.full(len(z_body), radius), radius * np.sin(t_bot)])
    z = np.concatenate([half + radius * np.cos(t_top), z_body, -half + radius * np.cos(t_bot)])
    return _revolve(r, z, nu)


def superellipsoid(radii=(0.6, 0.5, 0.4), e1: float = 0.5, e2: float = 0.5, nu: int = 128, nv: int = 64) -> Mesh:
    """Superellipsoid with exponent ``e1`` along latitude and ``e2`` along longitude."""

    def spow(x, e):
        return np.sign(x) * np.abs(x) ** e

    u = np.linspace(-np.pi, np.pi, nu, endpoint=False)
    v = np.linspace(-np.pi / 2, np.pi / 2, nv + 1)
    cv, sv = spow(np.cos(v), e1)[:, None], spow(np.sin(v), e1)[:, None]
    cu, su = spow(np.cos(u), e2)[None], spow(np.sin(u), e2)[None]
    pts = np.stack([radii[0] * cv * cu, radii[1] * cv * su, np.broadcast_to(radii[2] * sv, (nv + 1, nu))], axis=-1)
    return _grid_mesh(pts, periodic_v=False)


TOY_SHAPES = {
    "sphere": sphere,
    "torus": torus,
    "box": box,
    "capsule": capsule,
}


def toy_suite(names=None) -> dict[str, Mesh]:
    names = names or list(TOY_SHAPES)
    return {n: TOY_SHAPES[n]() for n in names}


def extended_suite(count: int) -> dict[str, Mesh]:
    """Up to eight distinct shapes: the toy four plus parameter variants."""
    extra = {
        "sphere_oblate": lambda: superellipsoid((0.6, 0.6, 0.35), 1.0, 1.0),
        "torus_thin": lambda: torus(0.55, 0.12),
        "box_long": lambda: box((1.2, 0.4, 0.4)),
        "capsule_fat": lambda: capsule(0.45, 0.3),
    }
    makers = dict(TOY_SHAPES)
    makers.update(extra)
    names = list(makers)[:count]
    return {n: makers[n]() for n in names}
