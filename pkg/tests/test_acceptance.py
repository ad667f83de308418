"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Tolerances and seeds are pinned below. Trained models are cached under
``tests/.acceptance_cache`` keyed by their configuration and by a hash of the
package sources, so a rerun with unchanged code reuses the identical,
deterministic training result. Set ``ROAD_RETRAIN=1`` to ignore the cache.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import road
from road import shapes
from road.diffcore import Tape, Tensor
from road.evaluation import chamfer, chamfer_x1000, compression_ratio, giou
from road.extraction import extract, extract_recursive
from road.formats import load_model, save_model
from road.geometry import OrientedPointCloud, build_labels, morton_decode, normalize, sample_surface, voxel_size
from road.model import RoadModel, storage_bytes
from road.training import CurriculumConfig, TrainConfig, TrainState, evaluate_loss, fit_latent, new_model, train

from conftest import numeric_grad, record_criterion, rel_err

# -- pinned settings --------------------------------------------------------

SEED = 0
SAMPLES = 1 << 17
TOY = ["sphere", "torus", "box", "capsule"]
TOY_CFG = dict(latent_dim=32, max_lod=6, hidden=128, fusion="direct", lr=6e-5, batch_shapes=4,
               nodes_per_level_cap=128, seed=SEED)
C3_STEPS = 24000
C3_CHAMFER_MAX = 0.5
C3_GIOU_MIN = 90.0
C4_STEPS = 12000  # the target loss is reached well before this
C4_EVAL_EVERY = 250
C4_EVAL_CAP = 512
C4_LOSS_X = 2.0  # full-depth evaluation loss target, from the pilot
C4_MIN_SAVING = 0.10
C8_CFG = dict(latent_dim=32, max_lod=5, hidden=128, lr=6e-5, batch_shapes=4, nodes_per_level_cap=128, seed=SEED)
C8_STEPS = 8000
C8_FIT = dict(iters=400, lr=5e-3, cap=256, seed=SEED)
C9_STEPS = 8000
C9_GIOU_MIN = 80.0
C7_LOD8_SECONDS = 1.0

CACHE = Path(__file__).parent / ".acceptance_cache"


def _source_hash() -> str:
    """Hash of the library code (not the CLI), ignoring comments and docstrings."""
    h = hashlib.sha256()
    for p in sorted(Path(road.__file__).parent.glob("*.py")):
        if p.name == "cli.py":
            continue
        tree = ast.parse(p.read_text())
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                    and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
                node.body = body[1:] or [ast.Pass()]
        h.update(p.name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


# -- data -------------------------------------------------------------------


def _cloud(mesh, name, count=SAMPLES, seed=SEED):
    mesh, _ = normalize(mesh)
    return sample_surface(mesh, count, seed=seed, shape_id=name)


@pytest.fixture(scope="session")
def toy():
    """name -> (ground-truth cloud, labels up to LoD 6) for the four toy shapes."""
    out = {}
    for name in TOY:
        cloud = _cloud(shapes.TOY_SHAPES[name](), name)
        out[name] = (cloud, build_labels(cloud, 6))
    return out


@pytest.fixture(scope="session")
def extended():
    out = {}
    for name, mesh in shapes.extended_suite(8).items():
        cloud = _cloud(mesh, name)
        out[name] = (cloud, build_labels(cloud, C8_CFG["max_lod"]))
    return out


# -- cached training -----------------------------------------------------------


def train_cached(tag: str, cfg: TrainConfig, labels: dict, *, eval_labels=None, snapshots=()):
    """Train (or reuse) a model; returns (model, info).

    ``info`` holds training wall time (evaluation excluded), the full-depth evaluation loss every
    ``C4_EVAL_EVERY`` steps (when ``eval_labels`` is given) and the logged
    curriculum levels.
    """
    key_src = json.dumps({"tag": tag, "cfg": cfg.to_dict(), "ids": list(labels), "snap": list(snapshots),
                          "eval": eval_labels is not None, "src": _source_hash()},
                         sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:20]
    path, meta_path = CACHE / f"{tag}-{key}.road", CACHE / f"{tag}-{key}.json"
    if path.exists() and meta_path.exists() and os.environ.get("ROAD_RETRAIN") != "1":
        model, _ = load_model(path)
        info = json.loads(meta_path.read_text())
        info["cached"] = True
        return model, info
    CACHE.mkdir(exist_ok=True)
    model = new_model(cfg, list(labels))
    state = TrainState.fresh(model, cfg)
    info = {"eval": [], "lods": [], "snapshots": {}, "cached": False}
    eval_seconds = 0.0

    def callback(st, rep):
        nonlocal eval_seconds
        info["lods"].append(st.curriculum.active_lod)
        if st.step in snapshots:
            snap = CACHE / f"{tag}-{key}-step{st.step}.road"
            save_model(model, snap)
            info["snapshots"][str(st.step)] = snap.name
        if eval_labels is not None and st.step % C4_EVAL_EVERY == 0:
            t = time.perf_counter()
            loss = evaluate_loss(model, eval_labels, cfg.max_lod, C4_EVAL_CAP, seed=SEED).total
            info["eval"].append([st.step, loss])
            eval_seconds += time.perf_counter() - t

    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        train(model, labels, cfg, state, callback=callback)
    info["seconds"] = time.perf_counter() - t0 - eval_seconds
    info["steps"] = state.step
    save_model(model, path)
    meta_path.write_text(json.dumps(info))
    return model, info


def toy_config(**kw) -> TrainConfig:
    base = dict(TOY_CFG, steps=C3_STEPS, curriculum=CurriculumConfig(enabled=False))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_model(toy):
    labels = {n: toy[n][1] for n in TOY}
    return train_cached("toy-direct", toy_config(), labels, eval_labels=labels, snapshots=(C9_STEPS,))


def surface_metrics(model, sid, gt, lod):
    s, _ = extract(model, model.latent(sid), lod)
    if len(s) == 0:
        return float("inf"), 0.0, 0
    pc = OrientedPointCloud(s.positions, s.normals, sid)
    return chamfer_x1000(pc, gt), giou(gt, pc, seed=SEED), len(s)


# -- criterion 1 ----------------------------------------------------------------


def _primitive_errors(seed):
    """Max relative error of analytic vs central-difference gradients over every primitive."""
    rng = np.random.default_rng(seed)

    def p(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def c(*shape):
        return Tensor(rng.normal(size=shape))

    x, W, b, lg = p(5, 4), p(4, 3), p(3), p(5, 2)
    labels = rng.integers(0, 2, 5)
    target = rng.normal(size=(5, 4))
    w = {k: c(*s) for k, s in {"lin": (5, 3), "x": (5, 4), "sm": (5, 2), "g": (4, 4), "rep": (15, 4),
                                "cat": (5, 6), "rs": (10, 2)}.items()}
    cases = [
        (lambda t: t.sum(t.mul(t.linear(x, W, b), w["lin"])), [x, W, b]),
        (lambda t: t.sum(t.mul(t.sine(x, 30.0), w["x"])), [x]),
        (lambda t: t.sum(t.mul(t.tanh(x), w["x"])), [x]),
        (lambda t: t.sum(t.mul(t.normalize(x), w["x"])), [x]),
        (lambda t: t.sum(t.mul(t.softmax2(lg), w["sm"])), [lg]),
        (lambda t: t.cross_entropy2(lg, labels), [lg]),
        (lambda t: t.l2_loss(x, target), [x]),
        (lambda t: t.sum(t.mul(t.gather_rows(x, np.array([4, 0, 0, 2])), w["g"])), [x]),
        (lambda t: t.sum(t.mul(t.repeat_rows(x, 3), w["rep"])), [x]),
        (lambda t: t.sum(t.mul(t.concat(x, t.slice_cols(x, 1, 3)), w["cat"])), [x]),
        (lambda t: t.sum(t.mul(t.reshape(x, (10, 2)), w["rs"])), [x]),
        (lambda t: t.sum(t.mul(t.sub(t.add(x, t.scale(x, 0.5)), t.mul(x, x)), w["x"])), [x]),
        (lambda t: t.weighted_sum([t.sum(t.stack_rows([b, b])), t.l2_loss(x, target)], [0.3, 2.0]), [x, b]),
    ]
    errs = []
    for build, params in cases:
        for q in params:
            q.grad = None
        tape = Tape()
        tape.backward(build(tape))
        for q in params:
            ana = q.grad.copy()
            num = numeric_grad(lambda: float(build(Tape(record=False)).data), q.data)
            errs.append(rel_err(ana, num))
    return max(errs), len(cases)


def _forward_error(seed, layout, labels):
    from test_model import full_loss_gradcheck

    model = RoadModel(16, labels.max_lod, hidden=64, head_layout=layout, seed=seed, dtype=np.float64)
    return full_loss_gradcheck(model, labels, seed=seed)


def test_c1_autodiff_soundness():
    t0 = time.perf_counter()
    cloud = _cloud(shapes.torus(), "torus", count=4000)
    labels = build_labels(cloud, 3)
    prim_runs = [_primitive_errors(s) for s in range(20)]
    prim = [e for e, _ in prim_runs]
    fwd = [_forward_error(s, layout, labels) for s in range(20) for layout in ("split", "shared")]
    secs = time.perf_counter() - t0
    worst = max(prim + fwd)
    ok = worst < 1e-4 and secs < 60
    record_criterion(1, ok, f"max rel err {worst:.2e} (< 1e-4) over 20 seeds x ({prim_runs[0][1]} primitive cases, full forward "
                            f"split 4-head + shared), {secs:.1f}s (< 60s)")
    assert ok


# -- criterion 2 ----------------------------------------------------------------


def _brute_force_labels(cloud, lod):
    """Cell -> (s, n) by comparing coordinates with every grid plane and scanning all points."""
    alpha = voxel_size(lod)
    planes = -1.0 + alpha * np.arange(1, 1 << lod)
    ijk = (cloud.points[:, :, None] >= planes[None, None, :]).sum(axis=2)
    cells = np.unique(ijk, axis=0)
    centers = -1.0 + (cells + 0.5) * alpha
    out = {}
    for a in range(0, len(cells), 16):
        c = centers[a:a + 16]
        diff_all = c[:, None, :] - cloud.points[None]
        idx = (diff_all * diff_all).sum(-1).argmin(axis=1)
        diff = c - cloud.points[idx]
        dist = np.sqrt((diff * diff).sum(1))
        sign = np.sign((cloud.normals[idx] * diff).sum(1))
        sdf = (sign * dist / alpha).astype(np.float32)
        for k, cell in enumerate(cells[a:a + 16]):
            out[tuple(cell.tolist())] = (sdf[k], cloud.normals[idx[k]].astype(np.float32))
    return out


def test_c2_label_oracle():
    t0 = time.perf_counter()
    problems, cells = [], 0
    for name, mesh in (("sphere", shapes.sphere()), ("torus", shapes.torus()), ("cube", shapes.box((1, 1, 1)))):
        cloud = _cloud(mesh, name, count=1 << 14)
        labels = build_labels(cloud, 5)
        for m in range(6):
            lv = labels.levels[m]
            oracle = _brute_force_labels(cloud, m)
            got = [tuple(c) for c in morton_decode(lv.keys).tolist()]
            cells += len(got)
            if set(got) != set(oracle):
                problems.append(f"{name} lod {m}: occupancy differs")
                continue
            for k, cell in enumerate(got):
                s, n = oracle[cell]
                if lv.sdf[k] != s or not np.array_equal(lv.normals[k], n):
                    problems.append(f"{name} lod {m} cell {cell}: s/n differ")
                    break
        if not labels.check_parent_closure():
            problems.append(f"{name}: parent closure")
    secs = time.perf_counter() - t0
    ok = not problems and secs < 60
    record_criterion(2, ok, f"sphere/torus/cube, LoD 0..5, {cells} cells, exact occupancy and bitwise s, n equality "
                            f"vs brute force; {secs:.1f}s (< 60s) {'; '.join(problems)}")
    assert ok


# -- criterion 3 ----------------------------------------------------------------


def test_c3_toy_reconstruction(toy, toy_model):
    model, info = toy_model
    rows, ok = [], True
    for name in TOY:
        cd, gi, n = surface_metrics(model, name, toy[name][0], 6)
        ok &= cd < C3_CHAMFER_MAX and gi > C3_GIOU_MIN
        rows.append(f"{name} cd {cd:.3f} giou {gi:.1f}")
    minutes = info["seconds"] / 60
    record_criterion(3, ok, f"{info['steps']} steps, {minutes:.1f} min train "
                            f"({'within' if minutes < 30 else 'over'} 30 min target); "
                            + "; ".join(rows) + f" (cd < {C3_CHAMFER_MAX}, giou > {C3_GIOU_MIN})")
    assert ok


# -- criterion 4 ----------------------------------------------------------------


def _steps_to(curve, x):
    for step, loss in curve:
        if loss <= x:
            return step
    return None


def test_c4_curriculum(toy, toy_model):
    labels = {n: toy[n][1] for n in TOY}
    _, base = toy_model
    cfg = toy_config(steps=C4_STEPS, curriculum=CurriculumConfig(enabled=True, start_lod=3, confidence_threshold=0.95))
    _, cur = train_cached("toy-curriculum", cfg, labels, eval_labels=labels)
    lods = cur["lods"]
    monotone = all(b - a in (0, 1) for a, b in zip(lods, lods[1:]))
    reached = lods[-1] == 6 if lods else False
    firsts = {m: lods.index(m) + 1 for m in range(3, 7) if m in lods}
    s_base, s_cur = _steps_to(base["eval"], C4_LOSS_X), _steps_to(cur["eval"], C4_LOSS_X)
    faster = s_base is not None and s_cur is not None and s_cur <= (1 - C4_MIN_SAVING) * s_base
    ok = monotone and reached and faster
    record_criterion(4, ok, f"active LoD first reached at steps {firsts} (monotone {monotone}, reaches 6 {reached}); "
                            f"steps to eval loss <= {C4_LOSS_X}: curriculum {s_cur} vs none {s_base} "
                            f"(needs >= {C4_MIN_SAVING:.0%} fewer)")
    assert ok


# -- criterion 5 ----------------------------------------------------------------


def test_c5_lod_monotonicity(toy, toy_model):
    model, _ = toy_model
    rows, ok = [], True
    for name in TOY:
        cds, gis = [], []
        for lod in (4, 5, 6):
            cd, gi, _ = surface_metrics(model, name, toy[name][0], lod)
            cds.append(cd)
            gis.append(gi)
        good = cds[0] >= cds[1] >= cds[2] and gis[0] <= gis[1] <= gis[2]
        ok &= good
        rows.append(f"{name} cd {'/'.join(f'{c:.3f}' for c in cds)} giou {'/'.join(f'{g:.1f}' for g in gis)}")
    record_criterion(5, ok, "LoD 4/5/6: " + "; ".join(rows))
    assert ok


# -- criterion 6 ----------------------------------------------------------------


def _paper_scale_bytes(D, count):
    model = RoadModel(D, 6, hidden=512)
    for i in range(count):
        model.set_latent(f"shape_{i:03d}", np.zeros(D, np.float32))
    return storage_bytes(model)


def test_c6_compression_accounting():
    small, large = _paper_scale_bytes(64, 32), _paper_scale_bytes(96, 150)
    within = [abs(small / 1e6 - 3.2) <= 0.32, abs(large / 1e6 - 3.8) <= 0.38]
    ratios = [
        (compression_ratio(3_800_000, [630_000_000]), 0.994),
        (compression_ratio(3_200_000, [473_000_000]), 0.993),
        (compression_ratio(1000, [1000]), 0.0),
        (compression_ratio(250, [400, 600]), 0.75),
    ]
    ratio_ok = all(abs(got - want) < 5e-4 for got, want in ratios)
    ok = all(within) and ratio_ok
    record_criterion(6, ok, f"D=64/H=512/32 shapes: {small} B = {small / 1e6:.3f} MB ({small / 2**20:.3f} MiB) "
                            f"vs 3.2 +-10%; D=96/150 shapes: {large} B = {large / 1e6:.3f} MB "
                            f"({large / 2**20:.3f} MiB) vs 3.8 +-10%; ratio examples "
                            + ", ".join(f"{g:.4f}~{w}" for g, w in ratios))
    assert ok


# -- criterion 7 ----------------------------------------------------------------

C7_CFG = dict(latent_dim=32, max_lod=8, hidden=64, lr=6e-5, batch_shapes=1, nodes_per_level_cap=128, seed=SEED)
C7_STEPS = 12000
C7_SAMPLES = 1 << 20


@pytest.fixture(scope="session")
def deep_sphere():
    cloud = _cloud(shapes.sphere(), "sphere", count=C7_SAMPLES)
    labels = {"sphere": build_labels(cloud, 8)}
    cfg = TrainConfig(**C7_CFG, steps=C7_STEPS, curriculum=CurriculumConfig(enabled=False))
    model, info = train_cached("sphere-lod8", cfg, labels)
    return model, cloud, labels["sphere"]


def test_c7_extraction(toy_model, deep_sphere):
    model, _ = toy_model
    equal = []
    for name in TOY:
        fast, _ = extract(model, model.latent(name), 6)
        slow = extract_recursive(model, model.latent(name), 6)
        equal.append(set(fast.keys.tolist()) == set(slow.keys.tolist()) and len(fast) > 0)
    deep, _, deep_labels = deep_sphere
    z = deep.latent("sphere")
    with threadpool_limits(limits=1):
        extract(deep, z, 8)  # warm-up
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            s, stats = extract(deep, z, 8)
            times.append(time.perf_counter() - t0)
    best = min(times)
    growth = stats.growth()
    ok = all(equal) and best < C7_LOD8_SECONDS
    record_criterion(7, ok, f"batched == recursive keys at LoD 6 for {sum(equal)}/{len(TOY)} toy shapes; "
                            f"LoD-8 sphere extraction {best * 1000:.0f} ms single thread (< 1 s), "
                            f"{len(s)} samples (labels {len(deep_labels.levels[8])}); node growth per LoD "
                            + "/".join(f"{g:.2f}" for g in growth))
    assert ok


# -- criterion 8 ----------------------------------------------------------------

C8_TWO = ["sphere", "torus"]


def _fit_chamfer(model, target_labels, target_cloud):
    init = np.mean([t.data for t in model.codebook.values()], axis=0)
    res = fit_latent(model, target_labels, C8_CFG["max_lod"], init=init, **C8_FIT)
    s, _ = extract(model, res.latent, C8_CFG["max_lod"])
    if len(s) == 0:
        return float("inf")
    return chamfer_x1000(OrientedPointCloud(s.positions, s.normals), target_cloud)


def test_c8_generalization(extended):
    target = _cloud(shapes.superellipsoid(), "superellipsoid")
    target_labels = build_labels(target, C8_CFG["max_lod"])
    results = {}
    for ids in (C8_TWO, list(extended)):
        cfg = TrainConfig(**C8_CFG, steps=C8_STEPS, curriculum=CurriculumConfig(enabled=False))
        labels = {n: extended[n][1] for n in ids}
        model, _ = train_cached(f"gen-{len(ids)}", cfg, labels)
        results[len(ids)] = _fit_chamfer(model, target_labels, target)
    ok = results[8] < results[2]
    record_criterion(8, ok, f"held-out superellipsoid fitted chamfer x1e3 at LoD {C8_CFG['max_lod']}: "
                            f"8-shape model {results[8]:.3f} vs 2-shape model {results[2]:.3f} (8 must be lower)")
    assert ok


# -- criterion 9 ----------------------------------------------------------------


def test_c9_fusion_ablation(toy, toy_model, tmp_path_factory):
    labels = {n: toy[n][1] for n in TOY}
    _, direct_info = toy_model
    direct, _ = load_model(CACHE / direct_info["snapshots"][str(C9_STEPS)])
    models = {"direct": direct}
    for fusion in ("add", "concat"):
        models[fusion], _ = train_cached(f"toy-{fusion}", toy_config(fusion=fusion, steps=C9_STEPS), labels)
    report = {}
    for fusion, model in models.items():
        rows = [surface_metrics(model, n, toy[n][0], 6) for n in TOY]
        report[fusion] = {"storage_bytes": storage_bytes(model),
                          "chamfer_x1000": float(np.mean([r[0] for r in rows])),
                          "giou_min": float(min(r[1] for r in rows)),
                          "giou_mean": float(np.mean([r[1] for r in rows]))}
    out = tmp_path_factory.mktemp("c9") / "fusion_report.json"
    out.write_text(json.dumps(report, indent=2))
    ordering = report["concat"]["chamfer_x1000"] <= report["direct"]["chamfer_x1000"] <= report["add"]["chamfer_x1000"]
    ok = (report["concat"]["storage_bytes"] > report["direct"]["storage_bytes"]
          and all(r["giou_min"] > C9_GIOU_MIN for r in report.values()))
    record_criterion(9, ok, f"{C9_STEPS} steps each; " + "; ".join(
        f"{k}: {v['storage_bytes']} B, cd {v['chamfer_x1000']:.3f}, min giou {v['giou_min']:.1f}"
        for k, v in report.items()) + f"; ordering concat<=direct<=add {'holds' if ordering else 'does not hold'} "
        "(reported only)")
    assert ok


# -- criterion 10 ---------------------------------------------------------------


def test_c10_metric_oracles():
    checks = {}
    a0 = np.zeros((1, 3))
    checks["identical"] = chamfer(a0, a0) == 0
    checks["unit pair"] = chamfer(a0, [[1.0, 0, 0]]) == 2 and chamfer_x1000(a0, [[1.0, 0, 0]]) == 2000
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(10):
        a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
        d = ((a[:, None] - b[None]) ** 2).sum(-1)
        worst = max(worst, abs(chamfer(a, b) - (d.min(1).mean() + d.min(0).mean())))
    checks["exhaustive"] = worst < 1e-9
    outer = sample_surface(shapes.sphere(0.5), SAMPLES, seed=SEED)
    inner = sample_surface(shapes.sphere(0.4), SAMPLES, seed=SEED + 1)
    nested = giou(outer, inner, seed=SEED)
    checks["nested"] = abs(nested - 51.2) <= 2
    checks["self giou"] = giou(outer, outer, 1 << 15) == 100
    ok = all(checks.values())
    record_criterion(10, ok, f"chamfer examples ok, exhaustive max abs err {worst:.1e} (< 1e-9); "
                             f"nested spheres r 0.5/0.4 gIoU {nested:.2f} (51.2 +-2); "
                             + ", ".join(k for k, v in checks.items() if not v))
    assert ok
