"""Auto-decoder training: teacher-forced octree descent and multi-LoD loss.

Every step picks a few shapes, starts from their root latents and walks down
the ground-truth occupied octree. At each level all eight children of every
expanded parent are decoded: occupancy is supervised on all of them, SDF and
normal only on the occupied ones. Weights and the touched root latents share
one Adam instance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from road.diffcore import ParamStore, Tape, Tensor, adam_step
from road.errors import ConfigError, TrainingError
from road.geometry import VoxelLabelSet, voxel_size
from road.model import OCCUPIED, RoadModel

log = logging.getLogger(__name__)


@dataclass
class CurriculumConfig:
    enabled: bool = True
    start_lod: int = 3
    confidence_threshold: float = 0.95
    ema_decay: float = 0.99


@dataclass
class TrainConfig:
    latent_dim: int = 64
    max_lod: int = 6
    hidden: int = 512
    fusion: str = "direct"
    head_layout: str = "shared"
    lr: float = 6e-5
    batch_shapes: int = 8
    nodes_per_level_cap: int = 512
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    w_occ: float = 1.0
    w_normal: float = 0.1
    steps: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim <= 0 or self.hidden <= 0:
            raise ConfigError("latent_dim and hidden must be positive")
        if self.batch_shapes <= 0 or self.nodes_per_level_cap <= 0:
            raise ConfigError("batch_shapes and nodes_per_level_cap must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.curriculum.enabled and not 0 <= self.curriculum.start_lod <= self.max_lod:
            raise ConfigError("curriculum start_lod must lie in [0, max_lod]")
        if not 0 < self.curriculum.confidence_threshold <= 1:
            raise ConfigError("confidence_threshold must lie in (0, 1]")
        if not 0 <= self.curriculum.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        cur = d.pop("curriculum", {}) or {}
        if isinstance(cur, Mapping):
            bad = set(cur) - set(CurriculumConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown curriculum keys: {sorted(bad)}")
            cur = CurriculumConfig(**cur)
        cfg = cls(curriculum=cur, **d)
        cfg.validate()
        return cfg


@dataclass
class CurriculumState:
    active_lod: int
    ema_confidence: float = 0.0


@dataclass
class LossReport:
    occ: list[float]
    sdf: list[float]
    normal: list[float]
    sdf_weights: list[float]
    total: float
    confidence: float
    active_lod: int

    def weighted_total(self, w_occ: float, w_normal: float) -> float:
        return sum(w_occ * o + ws * s + w_normal * n for o, s, n, ws in zip(self.occ, self.sdf, self.normal, self.sdf_weights))


def sdf_weight(lod: int) -> float:
    """Inverse voxel radius at ``lod`` (radius = half the cell side)."""
    return 1.0 / (voxel_size(lod) / 2.0)


def curriculum_update(state: CurriculumState, confidences, max_lod: int, cfg: CurriculumConfig) -> CurriculumState:
    """Fold the mean confidence into the EMA; advance one level past the threshold."""
    conf = float(np.mean(confidences)) if np.size(confidences) else 0.0
    ema = cfg.ema_decay * state.ema_confidence + (1 - cfg.ema_decay) * conf
    if ema >= cfg.confidence_threshold and state.active_lod < max_lod:
        return CurriculumState(state.active_lod + 1, 0.0)
    return CurriculumState(state.active_lod, ema)


def init_codebook(shape_ids, latent_dim: int, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Root latents drawn from N(0, 0.01^2), in ``shape_ids`` order."""
    if latent_dim <= 0:
        raise ConfigError("latent_dim must be positive")
    ids = list(shape_ids)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ConfigError(f"duplicate shape ids: {dup}")
    rng = np.random.default_rng(seed)
    vals = rng.normal(0.0, 0.01, size=(len(ids), latent_dim)).astype(dtype)
    return {sid: vals[i] for i, sid in enumerate(ids)}


# ---------------------------------------------------------------------------
# the teacher-forced traversal


@dataclass
class TraversalTrace:
    """Per-level row counts of a teacher-forced pass (for inspection/tests)."""

    rows: list[int] = field(default_factory=list)
    expanded: list[int] = field(default_factory=list)
    occupied: list[int] = field(default_factory=list)
    correct: list[int] = field(default_factory=list)


def teacher_forced_loss(
    tape: Tape,
    model: RoadModel,
    roots: Tensor,
    labelsets: list[VoxelLabelSet],
    last_lod: int,
    rng: np.random.Generator,
    cap: int,
    w_occ: float = 1.0,
    w_normal: float = 0.1,
    surface_lods: set[int] | None = None,
    sdf_override: dict[tuple[int, int], np.ndarray] | None = None,
):
    """Weighted multi-LoD loss for root latents ``roots`` (one row per labelset).

    ``surface_lods`` restricts SDF/normal supervision to those levels (None: all).
    ``sdf_override[(row, lod)]`` replaces the SDF targets of one shape at one level.
    Returns (total tensor, LossReport, trace).
    """
    B = roots.shape[0]
    if len(labelsets) != B:
        raise ConfigError("one labelset per root latent required")
    for ls in labelsets:
        if ls.max_lod < last_lod:
            raise ConfigError(f"labels for {ls.shape_id!r} stop at lod {ls.max_lod}, need {last_lod}")
    z = roots
    owner = np.arange(B)
    keys = np.zeros(B, dtype=np.uint64)
    terms, weights = [], []
    rep = LossReport([], [], [], [], 0.0, 0.0, last_lod)
    trace = TraversalTrace()
    for m in range(last_lod + 1):
        h = model.encode(tape, z, m)
        occ = np.zeros(len(keys), dtype=np.int64)
        label_row = np.zeros(len(keys), dtype=np.int64)
        # rows are grouped by owner, in owner order
        bounds = np.searchsorted(owner, np.arange(B + 1))
        for b in range(B):
            lo, hi = bounds[b], bounds[b + 1]
            if hi > lo:
                hit, pos = labelsets[b].levels[m].lookup(keys[lo:hi])
                occ[lo:hi] = hit
                label_row[lo:hi] = pos
        occ_rows = np.flatnonzero(occ)
        supervise_surface = surface_lods is None or m in surface_lods
        logits, s, n = model.surface(tape, h, occ_rows)
        l_occ = tape.cross_entropy2(logits, occ)
        terms.append(l_occ)
        weights.append(w_occ)
        rep.occ.append(float(l_occ.data))
        ws = sdf_weight(m)
        rep.sdf_weights.append(ws)
        if supervise_surface and len(occ_rows):
            s_t = np.empty(len(occ_rows), dtype=np.float32)
            n_t = np.empty((len(occ_rows), 3), dtype=np.float32)
            for b in range(B):
                sel = owner[occ_rows] == b
                if not sel.any():
                    continue
                lvl = labelsets[b].levels[m]
                s_src = sdf_override.get((b, m), lvl.sdf) if sdf_override else lvl.sdf
                s_t[sel] = s_src[label_row[occ_rows[sel]]]
                n_t[sel] = lvl.normals[label_row[occ_rows[sel]]]
            l_s = tape.l2_loss(s, s_t[:, None])
            l_n = tape.l2_loss(n, n_t)
            terms += [l_s, l_n]
            weights += [ws, w_normal]
            rep.sdf.append(float(l_s.data))
            rep.normal.append(float(l_n.data))
        else:
            rep.sdf.append(0.0)
            rep.normal.append(0.0)
        probs = _softmax2(logits.data)
        trace.rows.append(len(keys))
        trace.occupied.append(len(occ_rows))
        trace.correct.append(int(((probs[:, OCCUPIED] >= 0.5) == occ.astype(bool)).sum()))
        if m == last_lod:
            rep.confidence = float(probs.max(axis=1).mean())
            trace.expanded.append(0)
            break
        # teacher forcing: descend only into ground-truth occupied cells
        expand = []
        for b in range(B):
            cand = occ_rows[owner[occ_rows] == b]
            if len(cand) > cap:
                cand = np.sort(rng.choice(cand, size=cap, replace=False))
            expand.append(cand)
        expand = np.concatenate(expand) if expand else np.zeros(0, np.int64)
        trace.expanded.append(len(expand))
        if len(expand) == 0:
            break
        hz = tape.gather_rows(h, expand, unique=True)
        zz = tape.gather_rows(z, expand, unique=True) if model.fusion != "direct" else z
        z = model.children(tape, zz, hz, m)
        keys = (keys[expand][:, None] * np.uint64(8) + np.arange(8, dtype=np.uint64)[None]).reshape(-1)
        owner = np.repeat(owner[expand], 8)
    total = tape.weighted_sum(terms, weights)
    rep.total = float(total.data)
    if not np.isfinite(rep.total):
        raise TrainingError("non-finite loss")
    return total, rep, trace


def _softmax2(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# training state and steps


@dataclass
class TrainState:
    step: int
    curriculum: CurriculumState
    store: ParamStore

    @classmethod
    def fresh(cls, model: RoadModel, cfg: TrainConfig) -> "TrainState":
        start = cfg.curriculum.start_lod if cfg.curriculum.enabled else cfg.max_lod
        return cls(0, CurriculumState(start, 0.0), build_store(model))


def build_store(model: RoadModel) -> ParamStore:
    """A ParamStore sharing tensors with the model weights and its latents."""
    store = ParamStore()
    store.params.update(model.params.params)
    for sid, t in model.codebook.items():
        store.params[f"latent/{sid}"] = t
    return store


def new_model(cfg: TrainConfig, shape_ids, dtype=np.float32) -> RoadModel:
    cfg.validate()
    model = RoadModel(cfg.latent_dim, cfg.max_lod, cfg.hidden, cfg.fusion, cfg.head_layout, seed=cfg.seed, dtype=dtype)
    for sid, z in init_codebook(shape_ids, cfg.latent_dim, cfg.seed, dtype).items():
        model.set_latent(sid, z)
    return model


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train_step(model: RoadModel, labels: Mapping[str, VoxelLabelSet], cfg: TrainConfig, state: TrainState):
    """One optimizer step; returns (LossReport, trace). Mutates model and state."""
    ids = list(model.codebook)
    missing = [sid for sid in ids if sid not in labels]
    if missing:
        raise ConfigError(f"no labels for shapes: {missing}")
    rng = step_rng(cfg.seed, state.step)
    k = min(cfg.batch_shapes, len(ids))
    pick = np.sort(rng.choice(len(ids), size=k, replace=False))
    chosen = [ids[i] for i in pick]
    tape = Tape()
    roots = tape.stack_rows([model.codebook[sid] for sid in chosen])
    active = state.curriculum.active_lod
    total, rep, trace = teacher_forced_loss(
        tape, model, roots, [labels[sid] for sid in chosen], active, rng,
        cfg.nodes_per_level_cap, cfg.w_occ, cfg.w_normal,
    )
    state.store.zero_grad()
    tape.backward(total)
    adam_step(state.store, state.store.grads(), cfg.lr)
    state.store.zero_grad()
    if cfg.curriculum.enabled:
        state.curriculum = curriculum_update(
            state.curriculum, np.array([rep.confidence]), cfg.max_lod, cfg.curriculum
        )
    state.step += 1
    return rep, trace


def evaluate_loss(model: RoadModel, labels: Mapping[str, VoxelLabelSet], lod: int, cap: int,
                  seed: int = 0, w_occ: float = 1.0, w_normal: float = 0.1) -> LossReport:
    """Teacher-forced loss over all shapes at depth ``lod``, without updates."""
    ids = list(model.codebook)
    tape = Tape(record=False)
    roots = Tensor(np.stack([model.codebook[s].data for s in ids]))
    _, rep, _ = teacher_forced_loss(tape, model, roots, [labels[s] for s in ids], lod,
                                    np.random.default_rng(seed), cap, w_occ, w_normal)
    return rep


def occupancy_accuracy(model: RoadModel, labels: VoxelLabelSet, shape_id: str, lod: int, cap: int = 1 << 30) -> float:
    """Fraction of correctly classified children at ``lod`` in a teacher-forced pass."""
    tape = Tape(record=False)
    roots = Tensor(model.latent(shape_id)[None])
    _, _, trace = teacher_forced_loss(tape, model, roots, [labels], lod, np.random.default_rng(0), cap)
    return trace.correct[lod] / max(trace.rows[lod], 1)


def train(model: RoadModel, labels: Mapping[str, VoxelLabelSet], cfg: TrainConfig,
          state: TrainState | None = None, steps: int | None = None, log_file=None,
          callback=None) -> TrainState:
    """Run ``steps`` (default ``cfg.steps``) optimizer steps, logging JSON lines."""
    state = state or TrainState.fresh(model, cfg)
    target = cfg.steps if steps is None else steps
    while state.step < target:
        rep, _ = train_step(model, labels, cfg, state)
        record = {
            "step": state.step,
            "total": rep.total,
            "occ": rep.occ,
            "sdf": rep.sdf,
            "normal": rep.normal,
            "confidence": rep.confidence,
            "active_lod": state.curriculum.active_lod,
            "trained_lod": rep.active_lod,
        }
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
        if callback is not None:
            callback(state, rep)
        if state.step % 500 == 0:
            log.info("step %d loss %.5f lod %d conf %.3f", state.step, rep.total, state.curriculum.active_lod, rep.confidence)
    return state


# ---------------------------------------------------------------------------
# latent-only fitting


@dataclass
class FitResult:
    latent: np.ndarray
    losses: list[float]


def perturb_sdf(labels: VoxelLabelSet, lod: int, noise_scale: float, seed: int) -> np.ndarray:
    """SDF targets at ``lod`` plus uniform metric noise of +-noise_scale voxel sizes."""
    lvl = labels.levels[lod]
    rng = np.random.default_rng(seed)
    metric = rng.uniform(-noise_scale, noise_scale, size=len(lvl)) * voxel_size(lod)
    return (lvl.sdf + metric / voxel_size(lod)).astype(np.float32)


def fit_latent(model: RoadModel, labels: VoxelLabelSet, max_lod: int, iters: int = 500, lr: float = 5e-3,
               sdf_noise_scale: float = 0.0, cap: int = 512, seed: int = 0, w_occ: float = 1.0,
               w_normal: float = 0.1, init=None) -> FitResult:
    """Optimize a fresh root latent against ``labels`` with the network frozen.

    With ``sdf_noise_scale > 0`` the SDF targets at ``max_lod`` are perturbed
    and coarser levels are supervised on occupancy only.
    """
    if max_lod > model.max_lod:
        raise ConfigError(f"max_lod {max_lod} exceeds model max_lod {model.max_lod}")
    if labels.max_lod < max_lod:
        raise ConfigError(f"labels stop at lod {labels.max_lod}, need {max_lod}")
    z0 = np.zeros(model.latent_dim, dtype=model.dtype) if init is None else np.asarray(init, model.dtype)
    latent = Tensor(z0.copy(), requires_grad=True, name="latent/fit")
    store = ParamStore()
    store.params["latent/fit"] = latent
    override = None
    surface_lods = None
    if sdf_noise_scale > 0:
        override = {(0, max_lod): perturb_sdf(labels, max_lod, sdf_noise_scale, seed)}
        surface_lods = {max_lod}
    losses = []
    with model.frozen():
        for it in range(iters):
            tape = Tape()
            roots = tape.stack_rows([latent])
            total, rep, _ = teacher_forced_loss(
                tape, model, roots, [labels], max_lod, step_rng(seed, it), cap, w_occ, w_normal,
                surface_lods=surface_lods, sdf_override=override,
            )
            latent.grad = None
            tape.backward(total)
            adam_step(store, {"latent/fit": latent.grad}, lr)
            losses.append(rep.total)
    return FitResult(latent.data.copy(), losses)
