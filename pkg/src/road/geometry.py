"""Shape normalization, oriented surface sampling and octree supervision labels.

Cells at level of detail ``m`` split ``[-1, 1]^3`` into ``2**m`` cells per axis
of side ``2 / 2**m``. Cells are addressed by the Morton code of their integer
coordinates with x in the lowest bit of each triple, so the children of a
cell with code ``c`` are ``8 * c + i`` for ``i`` in ``range(8)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from road.errors import ConfigError, GeometryError
from road.meshio import Mesh, PointCloud

MAX_LOD = 12
NORMALIZED_HALF_EXTENT = 0.95


def voxel_size(lod: int) -> float:
    """Cell side length at ``lod``; also the scale of the normalized SDF."""
    return 2.0 / (1 << lod)


# ---------------------------------------------------------------------------
# Morton codes


def _spread3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(ijk: np.ndarray) -> np.ndarray:
    """Interleave (N, 3) integer cell coordinates into uint64 Morton codes."""
    ijk = np.asarray(ijk)
    return _spread3(ijk[..., 0]) | (_spread3(ijk[..., 1]) << np.uint64(1)) | (_spread3(ijk[..., 2]) << np.uint64(2))


def morton_decode(code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=np.uint64)
    i = _compact3(code)
    j = _compact3(code >> np.uint64(1))
    k = _compact3(code >> np.uint64(2))
    return np.stack([i, j, k], axis=-1).astype(np.int64)


@dataclass(frozen=True)
class VoxelKey:
    lod: int
    morton: int

    def __post_init__(self):
        if not 0 <= self.lod <= MAX_LOD:
            raise ConfigError(f"lod {self.lod} outside [0, {MAX_LOD}]")
        if not 0 <= self.morton < 8**self.lod:
            raise ConfigError(f"morton {self.morton} out of range for lod {self.lod}")

    @classmethod
    def from_ijk(cls, lod: int, ijk) -> "VoxelKey":
        ijk = np.asarray(ijk, dtype=np.int64)
        if np.any(ijk < 0) or np.any(ijk >= (1 << lod)):
            raise ConfigError(f"cell {tuple(ijk)} out of range for lod {lod}")
        return cls(lod, int(morton_encode(ijk)))

    @property
    def ijk(self) -> tuple[int, int, int]:
        return tuple(int(x) for x in morton_decode(np.uint64(self.morton)))

    def parent(self) -> "VoxelKey":
        if self.lod == 0:
            raise ConfigError("root has no parent")
        return VoxelKey(self.lod - 1, self.morton >> 3)

    def child(self, i: int) -> "VoxelKey":
        """Child ``i``: bit b of ``i`` picks the upper half along axis b."""
        if not 0 <= i < 8:
            raise ConfigError(f"child index {i} outside [0, 8)")
        return VoxelKey(self.lod + 1, self.morton * 8 + i)


def voxel_center(key: VoxelKey) -> np.ndarray:
    return voxel_centers(key.lod, np.asarray(key.ijk)[None])[0]


def voxel_centers(lod: int, ijk: np.ndarray) -> np.ndarray:
    return -1.0 + (np.asarray(ijk, dtype=np.float64) + 0.5) * voxel_size(lod)


def cell_coords(points: np.ndarray, lod: int) -> np.ndarray:
    """Integer cell of each point; faces belong to the upper cell, the last cell is closed."""
    n = 1 << lod
    ijk = np.floor((np.asarray(points, dtype=np.float64) + 1.0) * (n / 2.0)).astype(np.int64)
    return np.clip(ijk, 0, n - 1)


# ---------------------------------------------------------------------------
# point clouds and normalization


@dataclass
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray
    shape_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.points.shape != self.normals.shape:
            raise GeometryError("points and normals differ in length")

    def __len__(self) -> int:
        return len(self.points)

    def validate(self, tol: float = 1e-5) -> None:
        if len(self) == 0:
            return
        if np.any(np.abs(self.points) > 1.0):
            raise GeometryError(f"{self.shape_id}: points outside [-1, 1]^3")
        lens = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lens - 1.0) > tol):
            raise GeometryError(f"{self.shape_id}: normals are not unit length")


@dataclass
class NormalizationTransform:
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def normalize(shape: Mesh | PointCloud | OrientedPointCloud, half_extent: float = NORMALIZED_HALF_EXTENT):
    """Center the bounding box at the origin and scale isotropically.

    Returns the transformed shape (same type) and the transform that was applied.
    """
    pts = shape.vertices if isinstance(shape, Mesh) else shape.points
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) == 0:
        raise GeometryError("cannot normalize empty geometry")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if not half > 0:
        raise GeometryError("degenerate geometry: zero extent")
    tf = NormalizationTransform(center=(lo + hi) / 2.0, scale=half_extent / half)
    if isinstance(shape, Mesh):
        return Mesh(tf.apply(shape.vertices), shape.faces.copy()), tf
    if isinstance(shape, OrientedPointCloud):
        return OrientedPointCloud(tf.apply(shape.points), shape.normals.copy(), shape.shape_id), tf
    return PointCloud(tf.apply(shape.points), shape.normals.copy()), tf


def face_areas_normals(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    v = mesh.vertices[mesh.faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    dbl = np.linalg.norm(cross, axis=1)
    normals = np.zeros_like(cross)
    ok = dbl > 0
    normals[ok] = cross[ok] / dbl[ok, None]
    return 0.5 * dbl, normals


def sample_surface(mesh: Mesh, count: int, seed: int = 0, shape_id: str = "") -> OrientedPointCloud:
    """Area-weighted uniform samples on the triangles, carrying face normals."""
    if count == 0:
        return OrientedPointCloud(np.zeros((0, 3)), np.zeros((0, 3)), shape_id)
    areas, normals = face_areas_normals(mesh)
    total = areas.sum()
    if not total > 0:
        raise GeometryError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    v = mesh.vertices[mesh.faces[face]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    return OrientedPointCloud(pts, normals[face], shape_id)


def to_oriented_cloud(shape: Mesh | PointCloud, count: int, seed: int, shape_id: str) -> OrientedPointCloud:
    """Normalized-space oriented cloud from a mesh (sampled) or a cloud (used as is)."""
    if isinstance(shape, Mesh):
        return sample_surface(shape, count, seed, shape_id)
    n = shape.normals / np.maximum(np.linalg.norm(shape.normals, axis=1, keepdims=True), 1e-300)
    return OrientedPointCloud(shape.points, n, shape_id)


# ---------------------------------------------------------------------------
# nearest neighbour


class NearestIndex:
    """Exact Euclidean nearest neighbour over an oriented cloud (k-d tree)."""

    def __init__(self, cloud: OrientedPointCloud):
        if len(cloud) == 0:
            raise GeometryError("nearest-neighbour index over empty cloud")
        self.cloud = cloud
        self.tree = cKDTree(cloud.points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (distance, index) for each query row."""
        d, i = self.tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k=1)
        return d, i.astype(np.int64)


def nearest_surface(query, cloud: OrientedPointCloud, index: NearestIndex | None = None):
    """Nearest cloud point to ``query``: (point, normal, distance)."""
    index = index or NearestIndex(cloud)
    d, i = index.query(np.asarray(query, dtype=np.float64)[None])
    return cloud.points[i[0]], cloud.normals[i[0]], float(d[0])


# ---------------------------------------------------------------------------
# labels


@dataclass
class LevelLabels:
    keys: np.ndarray  # (N,) uint64, strictly increasing
    sdf: np.ndarray  # (N,) float32, signed distance in voxel units
    normals: np.ndarray  # (N, 3) float32

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(occupied mask, row index into this level) for each Morton code."""
        codes = np.asarray(codes, dtype=np.uint64)
        pos = np.searchsorted(self.keys, codes)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (pos < len(self.keys)) & (self.keys[pos_c] == codes) if len(self.keys) else np.zeros(len(codes), bool)
        return hit, pos_c


@dataclass
class VoxelLabelSet:
    shape_id: str
    levels: list[LevelLabels]
    transform: NormalizationTransform = field(default_factory=NormalizationTransform)

    @property
    def max_lod(self) -> int:
        return len(self.levels) - 1

    def check_parent_closure(self) -> bool:
        for m in range(1, len(self.levels)):
            parents = self.levels[m].keys >> np.uint64(3)
            hit, _ = self.levels[m - 1].lookup(parents)
            if not hit.all():
                return False
        return True


def label_values(centers: np.ndarray, cloud: OrientedPointCloud, nn_idx: np.ndarray, lod: int):
    """Normalized SDF and normal at cell centers given their nearest cloud points."""
    p = cloud.points[nn_idx]
    n = cloud.normals[nn_idx]
    diff = centers - p
    dist = np.sqrt((diff * diff).sum(axis=1))
    sign = np.sign((n * diff).sum(axis=1))
    sdf = sign * dist / voxel_size(lod)
    return sdf.astype(np.float32), n.astype(np.float32)


def build_labels(cloud: OrientedPointCloud, max_lod: int, index: NearestIndex | None = None,
                 transform: NormalizationTransform | None = None) -> VoxelLabelSet:
    """Occupancy, normalized SDF and normal for every occupied cell up to ``max_lod``.

    Occupancy is computed at the finest level and coarsened by shifting, so
    every occupied cell has an occupied parent.
    """
    if len(cloud) == 0:
        raise GeometryError("cannot build labels from an empty cloud")
    if not 0 <= max_lod <= MAX_LOD:
        raise ConfigError(f"max_lod must be in [0, {MAX_LOD}], got {max_lod}")
    index = index or NearestIndex(cloud)
    finest = cell_coords(cloud.points, max_lod)
    levels = []
    for m in range(max_lod + 1):
        ijk = finest >> (max_lod - m)
        keys = np.unique(morton_encode(ijk))
        centers = voxel_centers(m, morton_decode(keys))
        _, nn = index.query(centers)
        sdf, nrm = label_values(centers, cloud, nn, m)
        levels.append(LevelLabels(keys, sdf, nrm))
    return VoxelLabelSet(cloud.shape_id, levels, transform or NormalizationTransform())
