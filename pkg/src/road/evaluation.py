"""Reconstruction metrics and latent-space analysis."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from road.errors import ConfigError
from road.geometry import OrientedPointCloud

GIOU_SAMPLES = 1 << 17


@dataclass
class MetricsReport:
    shape_id: str
    chamfer_x1000: float
    giou_percent: float
    storage_bytes: int = 0
    compression_ratio: float | None = None
    seed: int = 0
    per_lod: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, OrientedPointCloud) else x
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ConfigError("metric needs non-empty point sets")
    return pts


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance a->b plus b->a (unscaled)."""
    a, b = _points(a), _points(b)
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def chamfer_x1000(a, b) -> float:
    return 1000.0 * chamfer(a, b)


def inside_mask(cloud: OrientedPointCloud, queries: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Query points on the inner side of the nearest oriented sample."""
    if len(cloud) == 0:
        raise ConfigError("inside test against an empty cloud")
    tree = tree or cKDTree(cloud.points)
    _, idx = tree.query(queries, k=1)
    d = queries - cloud.points[idx]
    return np.einsum("ij,ij->i", d, cloud.normals[idx]) < 0


def giou(gt: OrientedPointCloud, pred: OrientedPointCloud, samples: int = GIOU_SAMPLES, seed: int = 0) -> float:
    """Monte-Carlo volumetric IoU (percent) over the cube [-1, 1]^3."""
    q = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(samples, 3))
    a = inside_mask(gt, q)
    b = inside_mask(pred, q)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return 100.0 * np.count_nonzero(a & b) / union


def compression_ratio(storage: int, source_bytes) -> float:
    total = float(np.sum(source_bytes))
    if total <= 0:
        raise ConfigError("source sizes must be positive")
    return 1.0 - storage / total


def compression_report(model, source_bytes) -> dict:
    from road.model import storage_bytes

    size = storage_bytes(model)
    return {"storage_bytes": size, "source_bytes": int(np.sum(source_bytes)),
            "compression_ratio": compression_ratio(size, source_bytes)}


# ---------------------------------------------------------------------------
# latent space


def latent_pca(latents) -> np.ndarray:
    """2-D coordinates of each latent on the top two principal directions.

    Each direction's sign is fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ConfigError("latent_pca needs at least two latents")
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise ConfigError("latent collection has rank 0")
    cov = Xc.T @ Xc / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    for j in range(top.shape[1]):
        if top[np.argmax(np.abs(top[:, j])), j] < 0:
            top[:, j] = -top[:, j]
    return Xc @ top


@dataclass
class KnnResult:
    indices: np.ndarray
    distances: np.ndarray
    truncated: bool


def latent_knn(query, collection, k: int) -> KnnResult:
    """Exact k nearest latents by Euclidean distance; ties keep collection order."""
    C = np.asarray(collection, dtype=np.float64)
    if C.ndim != 2 or len(C) == 0:
        raise ConfigError("latent_knn needs a non-empty collection")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    d = np.sqrt(((C - q) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    truncated = k > len(C)
    order = order[: min(k, len(C))]
    return KnnResult(order, d[order], truncated)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
