"""Occupancy-gated octree traversal and zero-isosurface projection.

The frontier is kept as parallel arrays (latents, hidden states, cell
coordinates) so each level is a handful of matrix products over contiguous
blocks of rows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from road.diffcore import Tape, Tensor
from road.errors import ConfigError, InferenceError
from road.geometry import morton_encode, voxel_centers, voxel_size
from road.meshio import write_ply
from road.model import OCCUPIED, RoadModel

DEFAULT_BLOCK = 16384


@dataclass
class SurfaceSamples:
    positions: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3)
    lod: int
    keys: np.ndarray  # (N,) uint64 Morton codes at ``lod``

    def __len__(self) -> int:
        return len(self.positions)

    def sorted(self) -> "SurfaceSamples":
        order = np.argsort(self.keys, kind="stable")
        return SurfaceSamples(self.positions[order], self.normals[order], self.lod, self.keys[order])


@dataclass
class TraversalStats:
    expanded: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    total_samples: int = 0

    def to_dict(self) -> dict:
        return {"expanded": self.expanded, "seconds": self.seconds, "total_samples": self.total_samples}

    def growth(self) -> list[float]:
        e = self.expanded
        return [e[m] / e[m - 1] if e[m - 1] else 0.0 for m in range(1, len(e))]


def project(centers: np.ndarray, normals: np.ndarray, sdf: np.ndarray, lod: int) -> np.ndarray:
    """Move cell centers onto the encoded surface: x - alpha * n * s."""
    return centers - voxel_size(lod) * normals * np.asarray(sdf)[:, None]


def _softmax_occ(logits: np.ndarray) -> np.ndarray:
    # p(occupied) for two-class logits, computed stably
    d = logits[:, 1 - OCCUPIED] - logits[:, OCCUPIED]
    with np.errstate(over="ignore"):  # exp -> inf gives the right limit, 0
        return 1.0 / (1.0 + np.exp(d))


def _check(a: np.ndarray, what: str, lod: int) -> None:
    if not np.all(np.isfinite(a)):
        raise InferenceError(f"non-finite {what} at lod {lod}")


def _blocks(n: int, block: int):
    for start in range(0, n, block):
        yield start, min(start + block, n)


def extract_batched(model: RoadModel, z0, target_lod: int, occ_threshold: float = 0.5,
                    batch: int = DEFAULT_BLOCK) -> tuple[SurfaceSamples, TraversalStats]:
    """Surface samples at ``target_lod`` from root latent ``z0``.

    Rows are pushed through the network ``batch`` at a time; the result does
    not depend on ``batch``.
    """
    _check_args(model, target_lod, occ_threshold)
    if batch <= 0:
        raise ConfigError("batch must be positive")
    tape = Tape(record=False)
    dt = model.dtype
    z = np.asarray(z0, dtype=dt).reshape(1, -1)
    ijk = np.zeros((1, 3), dtype=np.int64)
    stats = TraversalStats(expanded=[1], seconds=[0.0])
    t0 = time.perf_counter()
    h = np.concatenate([model.encode(tape, Tensor(z[a:b]), 0).data for a, b in _blocks(1, batch)])
    stats.seconds[0] = time.perf_counter() - t0
    offsets = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)
    # with one shared head the last level's occupancy pass already yields s and n
    reuse = model.head_layout == "shared" and target_lod > 0
    kept_s, kept_n = [], []
    for m in range(1, target_lod + 1):
        t0 = time.perf_counter()
        last = reuse and m == target_lod
        kept_z, kept_h, kept_ijk = [], [], []
        for a, b in _blocks(len(z), max(batch // 8, 1)):
            kids = model.children(tape, Tensor(z[a:b]), Tensor(h[a:b]), m - 1).data
            hk = model.encode(tape, Tensor(kids), m).data
            if last:
                logits, s, n = model.surface(tape, Tensor(hk))
                logits = logits.data
            else:
                logits = model.occupancy_logits(tape, Tensor(hk)).data
            prob = _softmax_occ(logits)
            _check(prob, "occupancy", m)
            keep = prob >= occ_threshold
            if last:
                kept_s.append(s.data[keep, 0])
                kept_n.append(n.data[keep])
            else:
                kept_z.append(kids[keep])
                kept_h.append(hk[keep])
            child_ijk = (ijk[a:b, None, :] * 2 + offsets[None]).reshape(-1, 3)
            kept_ijk.append(child_ijk[keep])
        ijk = np.concatenate(kept_ijk) if kept_ijk else np.zeros((0, 3), np.int64)
        if not last:
            z = np.concatenate(kept_z) if kept_z else np.zeros((0, model.latent_dim_at(m)), dt)
            h = np.concatenate(kept_h) if kept_h else np.zeros((0, model.hidden), dt)
        stats.expanded.append(len(ijk))
        stats.seconds.append(time.perf_counter() - t0)
        if len(ijk) == 0:
            break
    t0 = time.perf_counter()
    if len(ijk) == 0:
        samples = _emit(model, tape, h[:0], ijk, target_lod, batch)
    elif reuse:
        samples = _surface_samples(np.concatenate(kept_s), np.concatenate(kept_n), ijk, target_lod)
    else:
        samples = _emit(model, tape, h, ijk, target_lod, batch)
    stats.seconds[-1] += time.perf_counter() - t0
    stats.total_samples = len(samples)
    return samples, stats


def _emit(model: RoadModel, tape: Tape, h: np.ndarray, ijk: np.ndarray, lod: int, batch: int) -> SurfaceSamples:
    if len(h) == 0:
        return SurfaceSamples(np.zeros((0, 3)), np.zeros((0, 3)), lod, np.zeros(0, np.uint64))
    s_all, n_all = [], []
    for a, b in _blocks(len(h), batch):
        _, s, n = model.surface(tape, Tensor(h[a:b]))
        s_all.append(s.data[:, 0])
        n_all.append(n.data)
    return _surface_samples(np.concatenate(s_all), np.concatenate(n_all), ijk, lod)


def _surface_samples(s: np.ndarray, n: np.ndarray, ijk: np.ndarray, lod: int) -> SurfaceSamples:
    s, n = s.astype(np.float64), n.astype(np.float64)
    _check(s, "sdf", lod)
    _check(n, "normal", lod)
    pos = project(voxel_centers(lod, ijk), n, s, lod)
    return SurfaceSamples(pos, n, lod, morton_encode(ijk))


def extract(model: RoadModel, z0, target_lod: int, occ_threshold: float = 0.5):
    """Octree surface extraction with the default block size."""
    return extract_batched(model, z0, target_lod, occ_threshold, DEFAULT_BLOCK)


def _check_args(model: RoadModel, target_lod: int, occ_threshold: float) -> None:
    if not 0 <= target_lod <= model.max_lod:
        raise ConfigError(f"target lod {target_lod} outside [0, {model.max_lod}]")
    if not 0 < occ_threshold < 1:
        raise ConfigError("occ_threshold must lie in (0, 1)")


def extract_recursive(model: RoadModel, z0, target_lod: int, occ_threshold: float = 0.5) -> SurfaceSamples:
    """Reference traversal: one node at a time, depth first, no batching."""
    _check_args(model, target_lod, occ_threshold)
    tape = Tape(record=False)
    out_pos, out_n, out_keys = [], [], []

    def visit(z: np.ndarray, ijk: np.ndarray, m: int) -> None:
        h = model.encode(tape, Tensor(z[None]), m)
        if m == target_lod:
            _, s, n = model.surface(tape, h)
            c = voxel_centers(m, ijk[None])
            out_pos.append(project(c, n.data.astype(np.float64), s.data[:, 0].astype(np.float64), m)[0])
            out_n.append(n.data[0].astype(np.float64))
            out_keys.append(morton_encode(ijk[None])[0])
            return
        kids = model.children(tape, Tensor(z[None]), h, m).data
        for c in range(8):
            hk = model.encode(tape, Tensor(kids[c:c + 1]), m + 1)
            prob = _softmax_occ(model.occupancy_logits(tape, hk).data)[0]
            if prob >= occ_threshold:
                child = ijk * 2 + np.array([(c >> a) & 1 for a in range(3)])
                visit(kids[c], child, m + 1)

    visit(np.asarray(z0, dtype=model.dtype), np.zeros(3, dtype=np.int64), 0)
    if not out_pos:
        return SurfaceSamples(np.zeros((0, 3)), np.zeros((0, 3)), target_lod, np.zeros(0, np.uint64))
    return SurfaceSamples(np.array(out_pos), np.array(out_n), target_lod, np.array(out_keys, dtype=np.uint64))


def differentiable_surface(tape: Tape, model: RoadModel, z0: Tensor, target_lod: int,
                           occ_threshold: float = 0.5) -> tuple[Tensor, np.ndarray]:
    """Traversal recorded on ``tape``: sample positions as a function of ``z0``.

    The discrete occupancy decisions are not differentiated; positions are.
    Returns (positions tensor (N, 3), Morton keys).
    """
    _check_args(model, target_lod, occ_threshold)
    z = tape.reshape(z0, (1, z0.shape[-1]))
    ijk = np.zeros((1, 3), dtype=np.int64)
    h = model.encode(tape, z, 0)
    offsets = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)
    for m in range(1, target_lod + 1):
        kids = model.children(tape, z, h, m - 1)
        hk = model.encode(tape, kids, m)
        prob = _softmax_occ(model.occupancy_logits(tape, hk).data)
        keep = np.flatnonzero(prob >= occ_threshold)
        ijk = (ijk[:, None, :] * 2 + offsets[None]).reshape(-1, 3)[keep]
        z = tape.gather_rows(kids, keep, unique=True)
        h = tape.gather_rows(hk, keep, unique=True)
    _, s, n = model.surface(tape, h)
    centers = Tensor(voxel_centers(target_lod, ijk).astype(model.dtype))
    offset = tape.scale(tape.mul(n, s), voxel_size(target_lod))
    return tape.sub(centers, offset), morton_encode(ijk)


def export_ply(samples: SurfaceSamples, path) -> None:
    if len(samples) == 0:
        raise ConfigError("refusing to write an empty surface")
    write_ply(path, samples.positions, samples.normals)
