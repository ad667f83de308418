"""``road`` command-line tool: preprocess, train, extract, eval, fit, bench, inspect.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from road import __version__
from road.errors import ConfigError, FormatError, GeometryError, InferenceError, RoadError, TrainingError
from road.evaluation import chamfer_x1000, compression_ratio, giou, GIOU_SAMPLES
from road.extraction import export_ply, extract
from road.formats import deserialize_model, load_labels, load_model, save_labels, save_model, serialize_model
from road.geometry import OrientedPointCloud, build_labels, normalize, to_oriented_cloud
from road.meshio import load_shape, write_ply
from road.diffcore import AdamState
from road.training import (
    CurriculumState,
    TrainConfig,
    TrainState,
    build_store,
    fit_latent,
    new_model,
    train,
)

log = logging.getLogger("road")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
SHAPE_SUFFIXES = (".obj", ".ply")
MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# helpers


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_manifest(cache: Path) -> dict:
    path = cache / MANIFEST
    if not path.exists():
        raise FormatError(f"no {MANIFEST} in {cache}; run 'road preprocess' first")
    return json.loads(path.read_text())


def _shape_entry(manifest: dict, sid: str) -> dict:
    for entry in manifest["shapes"]:
        if entry["id"] == sid:
            return entry
    known = ", ".join(e["id"] for e in manifest["shapes"])
    raise ConfigError(f"shape {sid!r} is not in the cache; known ids: {known}")


def _load_cloud(path: Path, sid: str) -> OrientedPointCloud:
    pc = load_shape(path)
    return OrientedPointCloud(pc.points, pc.normals, sid)


def _shape_seed(seed: int, sid: str) -> list[int]:
    # independent of file order and of the thread that handles the shape
    return [seed, zlib.crc32(sid.encode("utf-8"))]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# preprocess


def _preprocess_one(src: Path, out: Path, max_lod: int, samples: int, seed: int) -> dict:
    sid = src.stem
    shape = load_shape(src)
    shape, tf = normalize(shape)
    cloud = to_oriented_cloud(shape, samples, np.random.default_rng(_shape_seed(seed, sid)).integers(1 << 63), sid)
    cloud.validate()
    labels = build_labels(cloud, max_lod, transform=tf)
    save_labels(labels, out / f"{sid}.rolb")
    write_ply(out / f"{sid}.cloud.ply", cloud.points, cloud.normals)
    return {
        "id": sid,
        "source": str(src),
        "source_bytes": src.stat().st_size,
        "labels": f"{sid}.rolb",
        "cloud": f"{sid}.cloud.ply",
        "points": len(cloud),
        "counts": [len(lv) for lv in labels.levels],
    }


def cmd_preprocess(args) -> int:
    src_dir, out = Path(args.input), Path(args.out)
    if not src_dir.is_dir():
        raise ConfigError(f"input directory {src_dir} does not exist")
    if args.samples <= 0:
        raise ConfigError("--samples must be positive")
    files = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in SHAPE_SUFFIXES)
    if not files:
        raise ConfigError(f"no .obj or .ply files in {src_dir}")
    stems = [p.stem for p in files]
    dup = sorted({s for s in stems if stems.count(s) > 1})
    if dup:
        raise ConfigError(f"several inputs map to the same shape id: {dup}")
    out.mkdir(parents=True, exist_ok=True)

    def job(p):
        try:
            return _preprocess_one(p, out, args.max_lod, args.samples, args.seed), None
        except (RoadError, ValueError, OSError) as exc:
            return None, {"source": str(p), "error": str(exc)}

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(job, files))
    shapes = [r for r, _ in results if r is not None]
    failed = [e for _, e in results if e is not None]
    for f in failed:
        print(f"error: {f['source']}: {f['error']}", file=sys.stderr)
    _write_json(out / MANIFEST, {
        "version": __version__, "max_lod": args.max_lod, "samples": args.samples, "seed": args.seed,
        "shapes": shapes, "failed": failed,
    })
    print(f"cached {len(shapes)} shape(s), {len(failed)} failure(s) -> {out}")
    return EXIT_INVALID if failed else EXIT_OK


# ---------------------------------------------------------------------------
# train and checkpoints


def load_config(path: str | None, overrides: dict) -> TrainConfig:
    raw: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(raw)


def save_checkpoint(path, model, state: TrainState, cfg: TrainConfig) -> None:
    """Archive, Adam moments, step and curriculum state in one ``.npz``."""
    arrays = {"archive": np.frombuffer(serialize_model(model, {"config": cfg.to_dict()}), dtype=np.uint8)}
    adam_steps = {}
    for name, st in state.store.state.items():
        arrays[f"m/{name}"] = st.m
        arrays[f"v/{name}"] = st.v
        adam_steps[name] = st.step
    meta = {
        "step": state.step,
        "curriculum": {"active_lod": state.curriculum.active_lod, "ema_confidence": state.curriculum.ema_confidence},
        "config": cfg.to_dict(),
        "adam_steps": adam_steps,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, TrainState, saved config dict)."""
    try:
        with np.load(path) as npz:
            meta = json.loads(npz["meta"].tobytes().decode())
            model, _ = deserialize_model(npz["archive"].tobytes())
            moments = {k: npz[k] for k in npz.files if k.startswith(("m/", "v/"))}
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    store = build_store(model)
    for name, step in meta["adam_steps"].items():
        if name not in store.params:
            raise FormatError(f"checkpoint has optimizer state for unknown parameter {name!r}")
        store.state[name] = AdamState(moments[f"m/{name}"], moments[f"v/{name}"], step)
    cur = CurriculumState(meta["curriculum"]["active_lod"], meta["curriculum"]["ema_confidence"])
    return model, TrainState(meta["step"], cur, store), meta["config"]


_ARCH_KEYS = ("latent_dim", "max_lod", "hidden", "fusion", "head_layout")


def cmd_train(args) -> int:
    cache = Path(args.cache)
    cfg = load_config(args.config, {"steps": args.steps, "seed": args.seed})
    manifest = _read_manifest(cache)
    ids = args.shapes or [e["id"] for e in manifest["shapes"]]
    labels = {}
    for sid in ids:
        lab = load_labels(cache / _shape_entry(manifest, sid)["labels"])
        if lab.max_lod < cfg.max_lod:
            raise ConfigError(f"cache for {sid!r} stops at lod {lab.max_lod}, config needs {cfg.max_lod}")
        labels[sid] = lab
    ckpt_path = Path(args.checkpoint or str(args.out) + ".ckpt")
    log_path = Path(args.log or str(args.out) + ".log.jsonl")
    if args.resume:
        model, state, saved = load_checkpoint(args.resume)
        changed = [k for k in _ARCH_KEYS if saved[k] != getattr(cfg, k)]
        if changed:
            raise ConfigError(f"config differs from checkpoint in {changed}; cannot resume")
        if sorted(model.codebook) != sorted(ids):
            raise ConfigError("checkpoint was trained on a different set of shapes")
        mode = "a"
    else:
        model = new_model(cfg, ids)
        state = TrainState.fresh(model, cfg)
        mode = "w"
    every = args.checkpoint_every

    def on_step(st, _rep):
        if every and st.step % every == 0:
            save_checkpoint(ckpt_path, model, st, cfg)

    t0 = time.perf_counter()
    with open(log_path, mode) as fh:
        state = train(model, labels, cfg, state, log_file=fh, callback=on_step)
    save_checkpoint(ckpt_path, model, state, cfg)
    size = save_model(model, args.out, {"config": cfg.to_dict(), "step": state.step})
    print(f"trained {state.step} steps in {time.perf_counter() - t0:.1f}s; "
          f"active lod {state.curriculum.active_lod}; archive {size} bytes -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract, eval, fit, bench, inspect


def cmd_extract(args) -> int:
    model, _ = load_model(args.model)
    z = model.latent(args.shape)
    samples, stats = extract(model, z, args.lod, args.threshold)
    if len(samples) == 0:
        raise InferenceError(f"no occupied cells at lod {args.lod} for {args.shape!r}")
    export_ply(samples, args.out)
    stats_path = args.stats or str(Path(args.out).with_suffix(".json"))
    _write_json(stats_path, {"shape": args.shape, "lod": args.lod, "threshold": args.threshold,
                             "model": model.config(), **stats.to_dict(), "growth": stats.growth()})
    print(f"{len(samples)} samples -> {args.out}")
    return EXIT_OK


def _eval_shape(model, cache: Path, entry: dict, lod: int, threshold: float, samples: int, seed: int) -> dict:
    sid = entry["id"]
    gt = _load_cloud(cache / entry["cloud"], sid)
    pred, _ = extract(model, model.latent(sid), lod, threshold)
    if len(pred) == 0:
        return {"shape_id": sid, "chamfer_x1000": None, "giou_percent": 0.0, "samples": 0}
    pc = OrientedPointCloud(pred.positions, pred.normals, sid)
    return {"shape_id": sid, "chamfer_x1000": chamfer_x1000(pc, gt),
            "giou_percent": giou(gt, pc, samples, seed), "samples": len(pred)}


def cmd_eval(args) -> int:
    model, meta = load_model(args.model)
    cache = Path(args.cache)
    manifest = _read_manifest(cache)
    ids = args.shapes or list(model.codebook)
    entries = [_shape_entry(manifest, sid) for sid in ids]
    for sid in ids:
        model.latent(sid)
    lod = model.max_lod if args.lod is None else args.lod
    per_shape = [_eval_shape(model, cache, e, lod, args.threshold, args.samples, args.seed) for e in entries]
    storage = len(serialize_model(model, meta))
    src = [_shape_entry(manifest, sid)["source_bytes"] for sid in model.codebook]
    cds = [r["chamfer_x1000"] for r in per_shape if r["chamfer_x1000"] is not None]
    report = {
        "model": model.config(),
        "lod": lod,
        "seed": args.seed,
        "giou_samples": args.samples,
        "shapes": per_shape,
        "aggregate": {
            "chamfer_x1000": float(np.mean(cds)) if cds else None,
            "giou_percent": float(np.mean([r["giou_percent"] for r in per_shape])),
            "storage_bytes": storage,
            "source_bytes": int(sum(src)),
            "compression_ratio": compression_ratio(storage, src),
        },
    }
    _write_json(args.out, report)
    agg = report["aggregate"]
    print(f"chamfer x1e3 {agg['chamfer_x1000']}, gIoU {agg['giou_percent']:.2f}, "
          f"compression {agg['compression_ratio']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    model, _ = load_model(args.model)
    before = _sha256(args.model)
    target = Path(args.target)
    labels = load_labels(target)
    if args.init == "mean" and model.codebook:
        init = np.mean([t.data for t in model.codebook.values()], axis=0)
    else:
        init = np.zeros(model.latent_dim, dtype=model.dtype)
    res = fit_latent(model, labels, args.max_lod, iters=args.iters, lr=args.lr, sdf_noise_scale=args.noise,
                     cap=args.cap, seed=args.seed, init=init)
    out = {"shape_id": labels.shape_id, "latent": res.latent.astype(float).tolist(), "max_lod": args.max_lod,
           "noise": args.noise, "iters": args.iters, "lr": args.lr, "seed": args.seed, "init": args.init,
           "loss_initial": res.losses[0], "loss_final": res.losses[-1]}
    if args.extract_lod is not None:
        cloud_path = target.with_name(target.name.removesuffix(".rolb") + ".cloud.ply")
        gt = _load_cloud(cloud_path, labels.shape_id)
        for tag, z in (("initial", init), ("final", res.latent)):
            s, _ = extract(model, z, args.extract_lod)
            pc = OrientedPointCloud(s.positions, s.normals)
            out[f"chamfer_x1000_{tag}"] = chamfer_x1000(pc, gt) if len(s) else None
            out[f"giou_{tag}"] = giou(gt, pc, args.samples, args.seed) if len(s) else 0.0
            if tag == "final" and args.ply:
                export_ply(s, args.ply)
    if _sha256(args.model) != before:
        raise TrainingError("model file changed during latent fitting")
    _write_json(args.out, out)
    print(f"fitted latent for {labels.shape_id!r}: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = load_model(args.model)
    try:
        lods = [int(x) for x in args.lods.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--lods must be comma-separated integers, got {args.lods!r}") from None
    if args.repeat <= 0:
        raise ConfigError("--repeat must be positive")
    sid = args.shape or next(iter(model.codebook), None)
    if sid is None:
        raise ConfigError("model has no shapes to benchmark")
    z = model.latent(sid)
    entries = []
    for lod in lods:
        times, counts = [], []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            s, _ = extract(model, z, lod)
            times.append(time.perf_counter() - t0)
            counts.append(len(s))
        entries.append({"lod": lod, "samples": counts[0], "median_s": float(np.median(times)),
                        "p10_s": float(np.percentile(times, 10)), "p90_s": float(np.percentile(times, 90)),
                        "times_s": times})
    report = {"shape": sid, "repeat": args.repeat, "threads": args.threads, "lods": entries}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    data = Path(args.model).read_bytes()
    model, meta = deserialize_model(data)
    print(json.dumps({"config": model.config(), "shapes": list(model.codebook), "storage_bytes": len(data),
                      "weights_sha256": model.weights_hash(), "meta": meta}, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="road", description="Neural octree codec for 3D shape collections.")
    p.add_argument("--version", action="version", version=f"road {__version__}")
    p.add_argument("--threads", type=int, default=1, help="worker/BLAS threads; 1 is bitwise deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="sample shapes and cache per-LoD labels")
    s.add_argument("--input", required=True, help="directory of .obj/.ply files")
    s.add_argument("--out", required=True, help="cache directory")
    s.add_argument("--max-lod", type=int, default=6)
    s.add_argument("--samples", type=int, default=1 << 17)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on a label cache")
    s.add_argument("--cache", required=True)
    s.add_argument("--out", required=True, help="model archive path")
    s.add_argument("--config", help="TOML training config")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint", help="checkpoint path (default: <out>.ckpt)")
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--log", help="JSON-lines log (default: <out>.log.jsonl)")
    s.add_argument("--steps", type=int, help="total step count (overrides config)")
    s.add_argument("--seed", type=int, help="overrides config")
    s.add_argument("--shapes", nargs="+", help="subset of cached shape ids")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="extract surface samples of one shape")
    s.add_argument("--model", required=True)
    s.add_argument("--shape", required=True)
    s.add_argument("--lod", type=int, required=True)
    s.add_argument("--out", required=True, help="output .ply")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--stats", help="stats JSON (default: next to --out)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", help="Chamfer, gIoU and compression report")
    s.add_argument("--model", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--shapes", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--lod", type=int)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--samples", type=int, default=GIOU_SAMPLES, help="gIoU Monte-Carlo samples")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fit", help="fit a latent for a new shape with frozen weights")
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True, help="label cache (.rolb) of the target shape")
    s.add_argument("--max-lod", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0, help="uniform SDF noise in voxel sizes")
    s.add_argument("--out", required=True, help="latent JSON")
    s.add_argument("--extract-lod", type=int)
    s.add_argument("--ply", help="write the fitted surface here (needs --extract-lod)")
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--lr", type=float, default=5e-3)
    s.add_argument("--cap", type=int, default=512)
    s.add_argument("--init", choices=("mean", "zero"), default="mean")
    s.add_argument("--samples", type=int, default=GIOU_SAMPLES)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("bench", help="time extraction per LoD")
    s.add_argument("--model", required=True)
    s.add_argument("--lods", default="6,7,8")
    s.add_argument("--repeat", type=int, default=5)
    s.add_argument("--shape")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("inspect", help="print an archive's header")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads <= 0:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, FormatError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, InferenceError, FloatingPointError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
