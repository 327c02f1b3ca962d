"""Segmentation and classification losses with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the prediction argument, shaped like it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import sigmoid_array

CLIP_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3  # Tversky false-negative weight
    beta: float = 0.7  # Tversky false-positive weight
    gamma: float = 2.0
    lambda_t: float = 1.0
    lambda_f: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("alpha, beta and gamma must be nonnegative")


@dataclass(frozen=True)
class AppendixPreset:
    """Alternative five-term mix: focal (alpha-balanced), Dice, IoU and a symmetric Tversky."""

    focal_weight: float = 20.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_weight: float = 1.0
    iou_weight: float = 1.0
    tversky_weight: float = 0.2
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5


PRESETS = {"main": LossWeights(), "appendix-training": AppendixPreset()}


def _check(p, t):
    p = np.asarray(p, dtype=np.float64) if np.asarray(p).dtype.kind != "f" else np.asarray(p)
    t = np.asarray(t, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    return p, t


def tversky_loss(p, t, w: LossWeights = LossWeights()):
    """``1 - TP / (TP + alpha FN + beta FP)`` on soft counts.

    When every count is zero (empty target, all-zero prediction) the loss is
    0 with zero gradient.
    """
    p, t = _check(p, t)
    tp = float(np.sum(p * t))
    fn = float(np.sum((1.0 - p) * t))
    fp = float(np.sum(p * (1.0 - t)))
    denom = tp + w.alpha * fn + w.beta * fp
    if denom == 0.0:
        return 0.0, np.zeros_like(p)
    value = 1.0 - tp / denom
    # d denom / dp = t - alpha t + beta (1 - t)
    d_denom = t * (1.0 - w.alpha) + w.beta * (1.0 - t)
    grad = -(t * denom - tp * d_denom) / (denom * denom)
    return value, grad


def focal_loss(p, t, gamma: float = 2.0, alpha: float | None = None):
    """Mean per-pixel focal loss on probabilities.

    Without ``alpha`` both classes are weighted equally; with it, positives
    get ``alpha`` and negatives ``1 - alpha``. ``p`` is clamped to
    ``[CLIP_EPS, 1 - CLIP_EPS]`` and the gradient is zero where the clamp is
    active.
    """
    p, t = _check(p, t)
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    a_pos, a_neg = (1.0, 1.0) if alpha is None else (alpha, 1.0 - alpha)
    q = np.clip(p, CLIP_EPS, 1.0 - CLIP_EPS)
    log_q, log_1q = np.log(q), np.log1p(-q)
    pos = (1.0 - q) ** gamma
    neg = q ** gamma
    per_pixel = -a_pos * pos * t * log_q - a_neg * neg * (1.0 - t) * log_1q
    n = p.size
    # gamma * x**(gamma - 1) with the gamma = 0 case kept finite
    d_pos = -gamma * (1.0 - q) ** (gamma - 1.0) if gamma > 0 else np.zeros_like(q)
    d_neg = gamma * q ** (gamma - 1.0) if gamma > 0 else np.zeros_like(q)
    grad = -a_pos * t * (d_pos * log_q + pos / q) - a_neg * (1.0 - t) * (d_neg * log_1q - neg / (1.0 - q))
    grad = np.where((p > CLIP_EPS) & (p < 1.0 - CLIP_EPS), grad, 0.0) / n
    return float(per_pixel.mean()), grad


def bce(p, t):
    """Plain binary cross-entropy on probabilities, mean over pixels."""
    p, t = _check(p, t)
    q = np.clip(p, CLIP_EPS, 1.0 - CLIP_EPS)
    return float(np.mean(-(t * np.log(q) + (1.0 - t) * np.log1p(-q))))


def dice_loss(p, t):
    """Soft Dice ``1 - 2 sum(pt) / (sum p + sum t)``."""
    p, t = _check(p, t)
    inter, total = float(np.sum(p * t)), float(np.sum(p) + np.sum(t))
    if total == 0.0:
        return 0.0, np.zeros_like(p)
    value = 1.0 - 2.0 * inter / total
    grad = -2.0 * (t * total - inter) / (total * total)
    return value, grad


def iou_loss(p, t):
    """Soft IoU ``1 - sum(pt) / (sum p + sum t - sum pt)``."""
    p, t = _check(p, t)
    inter = float(np.sum(p * t))
    union = float(np.sum(p) + np.sum(t)) - inter
    if union == 0.0:
        return 0.0, np.zeros_like(p)
    value = 1.0 - inter / union
    grad = -(t * union - inter * (1.0 - t)) / (union * union)
    return value, grad


def _items(p, t):
    p, t = _check(p, t)
    if p.ndim == 2:
        return p[None], t[None]
    return p.reshape(-1, *p.shape[-2:]), t.reshape(-1, *t.shape[-2:])


def composite_roi_loss(p, t, w: LossWeights = LossWeights()):
    """``lambda_t * tversky + lambda_f * focal`` per item, summed over the batch.

    ``p`` is one ``H x W`` grid or a batch ``(..., H, W)``.
    """
    shape = np.shape(p)
    ps, ts = _items(p, t)
    total = 0.0
    grads = np.empty_like(ps)
    for i, (pi, ti) in enumerate(zip(ps, ts)):
        tv, tg = tversky_loss(pi, ti, w) if w.lambda_t else (0.0, 0.0)
        fv, fg = focal_loss(pi, ti, w.gamma) if w.lambda_f else (0.0, 0.0)
        total += w.lambda_t * tv + w.lambda_f * fv
        grads[i] = w.lambda_t * tg + w.lambda_f * fg
    return total, grads.reshape(shape)


def appendix_loss(p, t, preset: AppendixPreset = AppendixPreset()):
    """Weighted focal + Dice + IoU + Tversky mix, summed over the batch."""
    shape = np.shape(p)
    ps, ts = _items(p, t)
    tw = LossWeights(alpha=preset.tversky_alpha, beta=preset.tversky_beta)
    total = 0.0
    grads = np.empty_like(ps)
    for i, (pi, ti) in enumerate(zip(ps, ts)):
        terms = [
            (preset.focal_weight, focal_loss(pi, ti, preset.focal_gamma, preset.focal_alpha)),
            (preset.dice_weight, dice_loss(pi, ti)),
            (preset.iou_weight, iou_loss(pi, ti)),
            (preset.tversky_weight, tversky_loss(pi, ti, tw)),
        ]
        total += sum(weight * v for weight, (v, _) in terms)
        grads[i] = sum(weight * g for weight, (_, g) in terms)
    return total, grads.reshape(shape)


def roi_loss(p, t, preset: str = "main"):
    """Dispatch on a named loss preset."""
    if preset == "main":
        return composite_roi_loss(p, t, PRESETS["main"])
    if preset == "appendix-training":
        return appendix_loss(p, t, PRESETS["appendix-training"])
    raise ValueError(f"unknown loss preset {preset!r}")


def bce_with_logits(z, y):
    """Mean of ``max(z, 0) - z y + log(1 + exp(-|z|))``; gradient ``(sigmoid(z) - y) / N``."""
    z = np.asarray(z, dtype=np.float64) if np.asarray(z).dtype.kind != "f" else np.asarray(z)
    y = np.asarray(y, dtype=z.dtype)
    if z.shape != y.shape:
        raise ValueError(f"logit shape {z.shape} != label shape {y.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    n = z.size
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean()), (sigmoid_array(z) - y) / n
