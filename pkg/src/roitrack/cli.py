"""Command-line entry point: ``roitrack <subcommand> ...``.

Exit codes: 0 success, 1 domain error (bad file, empty ROI, ...), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from pathlib import Path

import numpy as np

from . import hsfa, metrics, tom
from .errors import EmptyRoiError, InvalidStateError, RegistrationFailed
from .fmap import FileBackedProvider, SyntheticProvider, read_fmap
from .geometry import render_views
from .optim import Diverged, TrainConfig
from .pipeline import ScenarioScript, run_scenario
from .prompts import binarize, extract_prompts
from .synthetic import SyntheticWorld, WorldConfig, as_feature_map, segmentation_sample
from .trackdata import TrackDatasetConfig, generate_tracking_dataset, read_dataset, write_dataset
from .training import cosine_accuracy, evaluate_hsfa, fit_cosine_threshold, tom_accuracy, train_hsfa, train_tom

log = logging.getLogger("roitrack")

DEFAULT_WORLD_SEED = 7
DOMAIN_ERRORS = (ValueError, OSError, KeyError, RegistrationFailed, InvalidStateError, Diverged)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _world(args, n_objects: int = 2) -> SyntheticWorld:
    return SyntheticWorld(WorldConfig(seed=args.world_seed, n_objects=n_objects))


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def write_pgm16(heat: np.ndarray, path) -> None:
    """Binary 16-bit PGM (big-endian samples, maxval 65535)."""
    h, w = heat.shape
    vals = np.floor(np.clip(heat, 0.0, 1.0) * 65535.0 + 0.5).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + vals.tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w).astype(np.float64) / 65535.0


# ------------------------------------------------------------------ commands


def cmd_render_views(args) -> int:
    _write_json(render_views(args.n), args.out)
    return 0


def cmd_segment(args) -> int:
    model = hsfa.load_checkpoint(args.model)
    if args.query:
        query = read_fmap(args.query)
        refs = [read_fmap(p) for p in args.refs]
        truth = None
    else:
        world = _world(args)
        rng = np.random.default_rng([args.seed, 0x5E])
        s = segmentation_sample(world, rng, args.grid, model.config.view_count, absent_prob=0.0)
        query = as_feature_map(s.query, args.grid, args.grid)
        refs = [as_feature_map(r, 7, 7) for r in s.refs]
        truth = s.mask
    text = np.asarray(json.loads(Path(args.text).read_text()), dtype=np.float64) if args.text else None
    heat = hsfa.hsfa_forward(model, query, refs, text)
    if args.heatmap:
        write_pgm16(heat, args.heatmap)
    mask = binarize(heat, args.threshold)
    prompts = extract_prompts(mask)  # EmptyRoiError -> exit 1 after the heatmap is written
    out = prompts.to_json()
    if truth is not None:
        gt = np.kron(truth.astype(np.uint8), np.ones((model.config.scale,) * 2, np.uint8)).astype(bool)
        union = np.logical_or(mask, gt).sum()
        out["roi_iou"] = float(np.logical_and(mask, gt).sum() / union) if union else 1.0
    _write_json(out, args.prompts)
    return 0


def _train_config(args, defaults: dict) -> TrainConfig:
    d = dict(defaults)
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    for key in ("eta0", "warmup", "total_steps", "batch", "optimizer", "loss_preset"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed
    if "warmup" not in d:  # default warm-up: a tenth of the run, at most 100 steps
        d["warmup"] = min(100, d.get("total_steps", 1000) // 10)
    return TrainConfig.from_dict(d)


def cmd_train_som(args) -> int:
    cfg = hsfa.HsfaConfig(channels=32, n_layers=args.layers, view_count=args.views, scale=args.scale)
    model = hsfa.HsfaModel.init(cfg, seed=args.seed)
    tc = _train_config(args, {"eta0": 3e-3, "total_steps": 800, "batch": 8})
    world = _world(args)
    trace = train_hsfa(model, world, tc, grid=args.grid, erase_prob=args.erase_prob)
    hsfa.save_checkpoint(model, args.out)
    if args.trace:
        trace.write_csv(args.trace)
    summary = {"steps": len(trace.losses), "ema_first": trace.emas[0], "ema_last": trace.emas[-1]}
    if args.eval:
        summary["heatmap_iou"] = evaluate_hsfa(model, world, n=args.eval, grid=args.grid)
    _write_json(summary, args.report)
    return 0


def cmd_gen_track_dataset(args) -> int:
    world = SyntheticWorld(WorldConfig(seed=args.world_seed, n_objects=args.objects))
    ds = generate_tracking_dataset(world, TrackDatasetConfig(n_pairs=args.n, seed=args.seed, max_shift=args.max_shift))
    write_dataset(ds, args.out)
    log.info("wrote %d pairs to %s", len(ds), args.out)
    return 0


def cmd_train_tom(args) -> int:
    ds = read_dataset(args.data)
    train_ds, test_ds = ds.split(args.holdout, seed=args.seed) if args.holdout > 0 else (ds, None)
    if len(train_ds) < args.batch:
        raise ValueError(f"training split has {len(train_ds)} pairs, fewer than one batch of {args.batch}")
    model = tom.TomModel.init(args.layers, ds.cand.shape[-1], seed=args.seed)
    steps = args.epochs * (len(train_ds) // args.batch)
    tc = _train_config(args, {"eta0": 3e-3, "warmup": 0, "total_steps": steps, "batch": args.batch, "clip": None})
    trace = train_tom(model, train_ds, tc)
    tom.save_checkpoint(model, args.out)
    if args.trace:
        trace.write_csv(args.trace)
    report = {"layers": args.layers, "steps": len(trace.losses), "train_accuracy": tom_accuracy(model, train_ds)}
    if test_ds is not None:
        th = fit_cosine_threshold(train_ds)
        report.update(test_accuracy=tom_accuracy(model, test_ds), cosine_threshold=th,
                      cosine_test_accuracy=cosine_accuracy(test_ds, th))
    _write_json(report, args.report)
    return 0


def cmd_track(args) -> int:
    scenario = ScenarioScript.load(args.scenario)
    som = hsfa.load_checkpoint(args.som)
    verifier = tom.load_checkpoint(args.tom)
    if args.frames:
        provider = FileBackedProvider(args.frames, args.refs)
    else:
        if not scenario.objects:
            raise ValueError("a synthetic scenario needs at least one object")
        provider = SyntheticProvider(_world(args), scenario.objects, scenario.grid, seed=args.seed,
                                     view_count=som.config.view_count)
    run = run_scenario(scenario, provider, som, verifier, threshold=args.threshold, capacity=args.capacity)
    if args.log:
        run.write_jsonl(args.log)
    else:
        sys.stdout.write("".join(json.dumps(r, sort_keys=True) + "\n" for r in run.log))
    return 0


def _read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _pose(rec: dict) -> metrics.Pose:
    return metrics.Pose(np.asarray(rec["R"], dtype=np.float64).reshape(3, 3), np.asarray(rec["t"], dtype=np.float64))


def evaluate_poses(est: list[dict], gt: list[dict], points: dict, fraction: float = 0.1) -> dict:
    """Pair records by ``(object_id, frame)`` (or by order per object) and score them."""
    def keyed(records):
        seen, out = {}, {}
        for r in records:
            oid = str(r["object_id"])
            idx = r.get("frame", seen.get(oid, 0))
            seen[oid] = seen.get(oid, 0) + 1
            key = (oid, idx)
            if key in out:
                raise ValueError(f"duplicate record for object {oid} frame {idx}")
            out[key] = r
        return out

    e, g = keyed(est), keyed(gt)
    if e.keys() != g.keys():
        raise ValueError("estimate and ground-truth records do not pair up")
    per_obj: dict[str, dict[str, list[float]]] = {}
    models = {}
    for key in sorted(e, key=lambda k: (k[0], str(k[1]))):
        oid = key[0]
        if oid not in points:
            raise KeyError(f"no model points for object {oid}")
        m = models.setdefault(oid, metrics.ModelPoints(np.asarray(points[oid], dtype=np.float64)))
        pe, pg = _pose(e[key]), _pose(g[key])
        acc = per_obj.setdefault(oid, {"add": [], "add_s": []})
        acc["add"].append(metrics.add(pe, pg, m))
        acc["add_s"].append(metrics.add_s(pe, pg, m))
    rows = {}
    for oid, acc in per_obj.items():
        d = models[oid].diameter
        rows[oid] = {
            "n": len(acc["add"]), "diameter": d,
            "add_mean": float(np.mean(acc["add"])), "add_s_mean": float(np.mean(acc["add_s"])),
            "add_recall": metrics.add_recall(acc["add"], fraction, d),
            "add_s_recall": metrics.add_recall(acc["add_s"], fraction, d),
        }
    overall = {k: float(np.mean([r[k] for r in rows.values()])) for k in
               ("add_mean", "add_s_mean", "add_recall", "add_s_recall")}
    overall["n"] = sum(r["n"] for r in rows.values())
    return {"threshold_fraction": fraction, "objects": rows, "overall": overall}


def format_table(report: dict) -> str:
    cols = ("n", "add_mean", "add_s_mean", "add_recall", "add_s_recall")
    rows = [("object", *cols)]
    for oid, r in report["objects"].items():
        rows.append((oid, str(r["n"]), *(f"{r[c]:.6f}" for c in cols[1:])))
    o = report["overall"]
    rows.append(("overall", str(o["n"]), *(f"{o[c]:.6f}" for c in cols[1:])))
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols) + 1)]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows) + "\n"


def cmd_eval(args) -> int:
    points = json.loads(Path(args.points).read_text())
    report = evaluate_poses(_read_jsonl(args.est), _read_jsonl(args.gt), points, args.fraction)
    if args.out:
        _write_json(report, args.out)
    sys.stdout.write(format_table(report))
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roitrack", description="ROI segmentation and tracking-verification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0, help="seed for sampling and initialization")
        p.set_defaults(func=fn)
        return p

    def add_world(p):
        p.add_argument("--world-seed", type=int, default=DEFAULT_WORLD_SEED, help="seed of the synthetic world")

    def add_training(p):
        p.add_argument("--config", help="training config JSON (TrainConfig fields)")
        p.add_argument("--steps", dest="total_steps", type=int)
        p.add_argument("--lr", dest="eta0", type=float)
        p.add_argument("--warmup", type=int)
        p.add_argument("--optimizer", choices=("adam", "sgd"))
        p.add_argument("--trace", help="write the loss trace CSV here")
        p.add_argument("--report", help="write a JSON summary here (default stdout)")

    p = add("render-views", cmd_render_views, "emit Fibonacci view directions and look-at rotations")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out")

    p = add("segment", cmd_segment, "ROI heatmap and prompts for one query frame")
    add_world(p)
    p.add_argument("--model", required=True, help="HSFA checkpoint")
    p.add_argument("--query", help="query FMAP file (default: a synthetic scene drawn with --seed)")
    p.add_argument("--refs", nargs="+", default=[], help="reference FMAP files")
    p.add_argument("--text", help="JSON array holding the text embedding")
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--heatmap", help="16-bit PGM output")
    p.add_argument("--prompts", help="prompt JSON output (default stdout)")

    p = add("train-som", cmd_train_som, "train the HSFA segmentation model on the synthetic task")
    add_world(p)
    add_training(p)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss-preset", dest="loss_preset", choices=("main", "appendix-training"))
    p.add_argument("--erase-prob", type=float, default=0.25)
    p.add_argument("--eval", type=int, default=0, help="number of held-out scenes to score")

    p = add("gen-track-dataset", cmd_gen_track_dataset, "write a labeled crop-pair dataset")
    add_world(p)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--max-shift", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("train-tom", cmd_train_tom, "train the tracking verifier on a pair dataset")
    add_training(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=1, choices=(0, 1, 2))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--holdout", type=float, default=0.2)

    p = add("track", cmd_track, "run register/track/verify over a scenario script")
    add_world(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--som", required=True, help="HSFA checkpoint")
    p.add_argument("--tom", required=True, help="verifier checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--capacity", type=int, default=8)
    p.add_argument("--frames", nargs="+", help="FMAP frames (file-backed run)")
    p.add_argument("--refs", nargs="+", help="FMAP reference views (file-backed run)")
    p.add_argument("--log", help="JSON-lines output (default stdout)")

    p = add("eval", cmd_eval, "ADD / ADD-S report for pose estimates")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--points", required=True, help="JSON object: object_id -> list of [x, y, z]")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--out")
    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command == "track" and bool(args.frames) != bool(args.refs):
        print("roitrack track: error: --frames and --refs go together", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmptyRoiError as exc:
        print(f"error: empty ROI: {exc}", file=sys.stderr)
        return 1
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except struct.error as exc:
        print(f"error: malformed file: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
