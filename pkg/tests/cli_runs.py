"""Runs every CLI subcommand into a directory so reruns can be compared byte for byte."""

from __future__ import annotations

import contextlib
import io
import json
from pathlib import Path

import numpy as np

from roitrack.cli import cli
from roitrack.geometry import look_at_rotation
from roitrack.pipeline import linear_scenario


def pose_fixture(root: Path) -> None:
    """Two objects, three frames each; estimates perturb the ground truth slightly."""
    rng = np.random.default_rng(0)
    points = {"a": rng.standard_normal((20, 3)).tolist(), "b": rng.standard_normal((15, 3)).tolist()}
    gt, est = [], []
    for oid in ("a", "b"):
        for frame in range(3):
            d = rng.standard_normal(3)
            r = look_at_rotation(d / np.linalg.norm(d))
            t = rng.standard_normal(3)
            gt.append({"object_id": oid, "frame": frame, "R": r.tolist(), "t": t.tolist()})
            est.append({"object_id": oid, "frame": frame, "R": r.tolist(), "t": (t + 0.01 * frame).tolist()})
    (root / "points.json").write_text(json.dumps(points))
    (root / "gt.jsonl").write_text("".join(json.dumps(r) + "\n" for r in gt))
    (root / "est.jsonl").write_text("".join(json.dumps(r) + "\n" for r in est))


def run(argv: list[str], stdout_path: Path | None = None) -> int:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli([str(a) for a in argv])
    if stdout_path is not None:
        stdout_path.write_text(buf.getvalue())
    if code != 0:
        raise AssertionError(f"{argv[0]} exited {code}")
    return code


def run_all(out: Path, som_ckpt: Path, tom_ckpt: Path, inputs: Path) -> list[Path]:
    """Every subcommand with small budgets; returns the artifacts written."""
    out.mkdir(parents=True, exist_ok=True)
    scenario = inputs / "scenario.json"
    if not scenario.exists():
        scenario.write_text(json.dumps(linear_scenario().to_json()))
        pose_fixture(inputs)
    run(["render-views", "--n", 16, "--out", out / "views.json"])
    run(["segment", "--model", som_ckpt, "--seed", 3, "--heatmap", out / "heat.pgm", "--prompts", out / "prompts.json"])
    run(["train-som", "--out", out / "som.ckpt", "--layers", 1, "--steps", 20, "--seed", 1,
         "--trace", out / "som_trace.csv", "--report", out / "som_report.json", "--eval", 4])
    run(["gen-track-dataset", "--n", 400, "--objects", 4, "--seed", 2, "--out", out / "pairs.tomd"])
    run(["train-tom", "--data", out / "pairs.tomd", "--out", out / "tom.ckpt", "--epochs", 2, "--seed", 2,
         "--trace", out / "tom_trace.csv", "--report", out / "tom_report.json"])
    run(["track", "--scenario", scenario, "--som", som_ckpt, "--tom", tom_ckpt, "--seed", 0,
         "--log", out / "track.jsonl"])
    run(["eval", "--est", inputs / "est.jsonl", "--gt", inputs / "gt.jsonl", "--points", inputs / "points.json",
         "--out", out / "eval.json"], out / "eval_table.txt")
    return sorted(p for p in out.iterdir())
