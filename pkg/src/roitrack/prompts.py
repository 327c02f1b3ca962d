"""Point and box prompts from a binarized region of interest.

Centroids are kept as exact rationals (:class:`fractions.Fraction`) because
they are sums of integer pixel coordinates over a count; that makes
translation equivariance and the cardinality-weighted mean identity hold
exactly instead of up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import EmptyRoiError

QUADRANTS = ("top", "bottom", "left", "right")
Point = tuple[Fraction, Fraction]


def binarize(h, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of entries ``>= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(h) >= threshold


@dataclass
class PromptSet:
    center: Point
    quadrants: dict[str, Point]
    bbox: tuple[int, int, int, int]  # min_row, min_col, max_row, max_col (inclusive)
    counts: dict[str, int] = field(default_factory=dict)
    fallbacks: list[str] = field(default_factory=list)

    def points(self) -> list[Point]:
        return [self.center] + [self.quadrants[q] for q in QUADRANTS]

    def to_json(self) -> dict:
        as_float = lambda pt: [float(pt[0]), float(pt[1])]  # noqa: E731
        return {
            "center": as_float(self.center),
            "quadrants": {q: as_float(self.quadrants[q]) for q in QUADRANTS},
            "bbox": list(self.bbox),
            "fallbacks": list(self.fallbacks),
        }


def _centroid(rows: np.ndarray, cols: np.ndarray) -> Point:
    n = len(rows)
    return Fraction(int(rows.sum()), n), Fraction(int(cols.sum()), n)


def extract_prompts(mask) -> PromptSet:
    """Overall centroid, four half-plane centroids and the tight bounding box.

    Top/bottom split on ``row < center_row``; left/right on
    ``col < center_col``. Pixels on a split line go bottom/right. An empty
    half-plane falls back to the center and is listed in ``fallbacks``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be two-dimensional")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyRoiError("mask has no foreground pixels")
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    n = rows.size
    center = _centroid(rows, cols)
    # row < sum_rows / n  <=>  row * n < sum_rows, kept in integers
    below = rows * n < rows.sum()
    before = cols * n < cols.sum()
    selections = {"top": below, "bottom": ~below, "left": before, "right": ~before}
    quadrants, counts, fallbacks = {}, {}, []
    for name in QUADRANTS:
        sel = selections[name]
        counts[name] = int(sel.sum())
        if counts[name]:
            quadrants[name] = _centroid(rows[sel], cols[sel])
        else:
            quadrants[name] = center
            fallbacks.append(name)
    bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    return PromptSet(center, quadrants, bbox, counts, fallbacks)
