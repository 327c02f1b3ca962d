"""Pose and detection metrics: ADD, ADD-S, recall, mAP and AR aggregation."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# Exact twentieths so that e.g. IoU 0.6 passes the 0.6 threshold.
IOU_THRESHOLDS = tuple(k / 20 for k in range(10, 20))
VISIBILITY_MIN = 0.1
TOP_K = 100
AR_ERRORS = ("vsd", "mssd", "mspd")


@dataclass
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation is not in SO(3)")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


@dataclass
class ModelPoints:
    points: np.ndarray
    diameter: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("model point set is empty")
        d = model_diameter(self.points)
        if self.diameter is None:
            self.diameter = d
        elif abs(self.diameter - d) > 1e-6:
            raise ValueError(f"declared diameter {self.diameter} != max pairwise distance {d}")


def model_diameter(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    # Max pairwise distance is attained between convex hull vertices.
    if len(pts) > 64:
        try:
            from scipy.spatial import ConvexHull

            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # degenerate (planar/collinear) clouds
            pass
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def add(est: Pose, gt: Pose, m: ModelPoints) -> float:
    """Mean distance between corresponding model points under the two poses."""
    return float(np.linalg.norm(est.apply(m.points) - gt.apply(m.points), axis=1).mean())


def add_s(est: Pose, gt: Pose, m: ModelPoints) -> float:
    """Mean distance from each estimated point to the nearest ground-truth point."""
    dist, _ = cKDTree(gt.apply(m.points)).query(est.apply(m.points), k=1)
    return float(np.mean(dist))


def add_recall(values: Sequence[float], threshold_fraction: float, diameter: float) -> float:
    """Fraction of errors strictly below ``threshold_fraction * diameter``."""
    if threshold_fraction <= 0:
        raise ValueError("threshold_fraction must be positive")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    return float(np.count_nonzero(v < threshold_fraction * diameter) / v.size)


# ------------------------------------------------------------------------ mAP


@dataclass
class Detection:
    category: str
    score: float
    iou_with_gt: float
    visibility: float = 1.0
    image_id: str = "0"
    dataset: str = "default"

    def __post_init__(self):
        if not 0.0 <= self.iou_with_gt <= 1.0 or not 0.0 <= self.visibility <= 1.0:
            raise ValueError("iou_with_gt and visibility must lie in [0, 1]")


@dataclass
class MapReport:
    per_category: dict[tuple[str, str], float]
    per_dataset: dict[str, float]
    overall: float


def _retain(dets: Iterable[Detection]) -> list[Detection]:
    kept = [d for d in dets if d.visibility >= VISIBILITY_MIN]
    by_image: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in kept:
        by_image[(d.dataset, d.image_id)].append(d)
    out = []
    for group in by_image.values():
        # sorted() is stable, so equal scores keep input order
        out.extend(sorted(group, key=lambda d: -d.score)[:TOP_K])
    return out


def category_ap(dets: Sequence[Detection], thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    """Precision of the retained set, averaged over the IoU thresholds.

    With ``N`` detections the average is ``sum_t hits_t / (|T| N)``, which is
    computed from integer counts in a single division.
    """
    n = len(dets)
    if n == 0:
        raise ValueError("no detections")
    ious = np.array([d.iou_with_gt for d in dets])
    hits = sum(int(np.count_nonzero(ious >= t)) for t in thresholds)
    return hits / (len(thresholds) * n)


def mean_ap(detections: Iterable[Detection]) -> MapReport:
    """Per-category AP, per-dataset mean and overall mean.

    Categories left empty by the visibility filter or top-k cut are
    excluded with a warning rather than counted as zero.
    """
    detections = list(detections)
    retained = _retain(detections)
    groups: dict[str, dict[str, list[Detection]]] = defaultdict(lambda: defaultdict(list))
    for d in detections:
        groups[d.dataset][d.category]
    for d in retained:
        groups[d.dataset][d.category].append(d)
    per_category, per_dataset = {}, {}
    for ds, cats in groups.items():
        aps = []
        for cat, dets in cats.items():
            if not dets:
                log.warning("category %s/%s has no detections; excluded", ds, cat)
                continue
            ap = category_ap(dets)
            per_category[(ds, cat)] = ap
            aps.append(ap)
        if aps:
            per_dataset[ds] = float(np.mean(aps))
    if not per_dataset:
        raise ValueError("no detections survive visibility filtering")
    return MapReport(per_category, per_dataset, float(np.mean(list(per_dataset.values()))))


# ------------------------------------------------------------------------- AR


def recall_curve(errors: Sequence[float], thresholds: Sequence[float]) -> list[float]:
    """Recall of ``errors < theta`` for every threshold."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors")
    return [float(np.count_nonzero(e < th) / e.size) for th in thresholds]


def average_recall(tables: Mapping[str, Mapping[str, Sequence[float]]]) -> tuple[dict[str, float], float]:
    """Aggregate per-dataset recall curves.

    ``tables[dataset][error]`` is the recall at each threshold of that error's
    threshold set, for every error in :data:`AR_ERRORS`. Returns the
    per-dataset ``AR_d`` and the overall ``AR_C``.
    """
    if not tables:
        raise ValueError("no datasets")
    ar_d = {}
    for ds, curves in tables.items():
        missing = [e for e in AR_ERRORS if e not in curves or len(curves[e]) == 0]
        if missing:
            raise ValueError(f"dataset {ds!r} lacks recall tables for {missing}")
        ar_d[ds] = float(np.mean([np.mean(curves[e]) for e in AR_ERRORS]))
    return ar_d, float(np.mean(list(ar_d.values())))


ErrorFn = Callable[[Pose, Pose, ModelPoints], float]


def add_surrogate_error(est: Pose, gt: Pose, m: ModelPoints) -> float:
    """Diameter-normalized ADD, a stand-in for the BOP error functions."""
    return add(est, gt, m) / m.diameter


def recall_tables(pairs: Sequence[tuple[Pose, Pose, ModelPoints]],
                  error_fns: Mapping[str, ErrorFn],
                  thresholds: Mapping[str, Sequence[float]]) -> dict[str, list[float]]:
    """Recall curves for each pluggable error function over one dataset."""
    out = {}
    for name, fn in error_fns.items():
        errs = [fn(e, g, m) for e, g, m in pairs]
        out[name] = recall_curve(errs, thresholds[name])
    return out
