"""Viewpoint sampling on the unit sphere and look-at camera rotations."""

from __future__ import annotations

import math

import numpy as np

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
FORWARD = np.array([0.0, 0.0, 1.0])
_UP = np.array([0.0, 1.0, 0.0])
_UP_FALLBACK = np.array([1.0, 0.0, 0.0])
_PARALLEL_TOL = 1e-6
UNIT_TOL = 1e-9


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` unit vectors on a golden-angle spiral, shape ``(n, 3)``.

    Heights are ``z_i = 1 - (2i + 1) / n`` so the points sit at the centres
    of ``n`` equal-area latitude bands.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = GOLDEN_ANGLE * i
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    # The band-centre construction is unit-norm up to rounding; renormalize anyway.
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def look_at_rotation(d) -> np.ndarray:
    """Rotation whose third column is ``d``, i.e. ``R @ (0, 0, 1) == d``.

    World +Y serves as the up hint; when ``d`` is (nearly) parallel to it,
    +X is used instead.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.shape != (3,) or not np.all(np.isfinite(d)):
        raise ValueError("direction must be a finite 3-vector")
    if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
        raise ValueError(f"direction must be unit length, got norm {np.linalg.norm(d)!r}")
    up = _UP if abs(d @ _UP) <= 1.0 - _PARALLEL_TOL else _UP_FALLBACK
    x = np.cross(up, d)
    x /= np.linalg.norm(x)
    y = np.cross(d, x)
    y /= np.linalg.norm(y)
    return np.stack([x, y, d], axis=1)


def render_views(n: int) -> list[dict]:
    """(direction, rotation) pairs standing in for rendered reference views."""
    views = []
    for k, d in enumerate(fibonacci_directions(n)):
        r = look_at_rotation(d)
        views.append({"index": k, "direction": d.tolist(), "rotation": r.reshape(-1).tolist()})
    return views


def min_angular_separation(dirs: np.ndarray) -> float:
    """Smallest pairwise angle in radians."""
    g = np.clip(dirs @ dirs.T, -1.0, 1.0)
    np.fill_diagonal(g, -1.0)
    return float(np.arccos(g.max()))
