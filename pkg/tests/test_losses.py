from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bce_logits_naive, bce_naive, central_diff, max_rel_err
from roitrack.losses import (CLIP_EPS, PRESETS, AppendixPreset, LossWeights, appendix_loss, bce_with_logits,
                             composite_roi_loss, dice_loss, focal_loss, iou_loss, roi_loss, tversky_loss)


def counts_mask(tp, fn, fp, tn=0):
    """Hard prediction/target pair with the requested confusion counts."""
    p = np.array([1] * tp + [0] * fn + [1] * fp + [0] * tn, dtype=np.float64)
    t = np.array([1] * tp + [1] * fn + [0] * fp + [0] * tn, dtype=np.float64)
    return p, t


def hard_pair(seed, shape=(6, 6)):
    rng = np.random.default_rng(seed)
    t = (rng.random(shape) < 0.4).astype(float)
    t.flat[0] = 1.0
    return t


# ------------------------------------------------------------------ Tversky

def test_tversky_perfect():
    t = hard_pair(0)
    assert tversky_loss(t, t)[0] == 0.0


def test_tversky_inverted():
    t = hard_pair(1)
    assert tversky_loss(1 - t, t)[0] == 1.0


def test_tversky_confusion_counts():
    p, t = counts_mask(8, 2, 4, tn=2)
    assert p.size == 16
    value, _ = tversky_loss(p.reshape(4, 4), t.reshape(4, 4))
    assert abs(value - (1 - 8 / 11.4)) < 1e-12


def test_tversky_empty_everything():
    z = np.zeros((3, 3))
    value, grad = tversky_loss(z, z)
    assert value == 0.0 and not grad.any()


def test_tversky_shape_mismatch():
    with pytest.raises(ValueError):
        tversky_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 29))
def test_tversky_fp_monotone(tp, fn, fp):
    lo = tversky_loss(*counts_mask(tp, fn, fp))[0]
    hi = tversky_loss(*counts_mask(tp, fn, fp + 1))[0]
    assert hi > lo


@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 30), st.integers(1, 10))
def test_tversky_penalizes_fp_more(tp, fn, fp, delta):
    more_fp = tversky_loss(*counts_mask(tp, fn, fp + delta))[0]
    more_fn = tversky_loss(*counts_mask(tp, fn + delta, fp))[0]
    assert more_fp >= more_fn


# -------------------------------------------------------------------- focal

def test_focal_half_probability():
    value, _ = focal_loss(np.full((1, 1), 0.5), np.ones((1, 1)), 2.0)
    assert value == pytest.approx(0.25 * math.log(2), abs=1e-15)


def test_focal_perfect_floor():
    t = hard_pair(2)
    value, grad = focal_loss(t, t, 2.0)
    floor = -(CLIP_EPS**2) * math.log(1 - CLIP_EPS)
    assert 0.0 <= value <= floor * 1.0001
    assert not grad.any()


def test_focal_gamma_zero_is_bce():
    rng = np.random.default_rng(3)
    p, t = rng.random((8, 8)), (rng.random((8, 8)) < 0.5).astype(float)
    assert abs(focal_loss(p, t, 0.0)[0] - bce_naive(p, t)) < 1e-12


def test_focal_alpha_balancing():
    p, t = np.array([[0.3, 0.8]]), np.array([[1.0, 0.0]])
    a = 0.25
    want = (-a * 0.7**2 * math.log(0.3) - (1 - a) * 0.8**2 * math.log(0.2)) / 2
    assert focal_loss(p, t, 2.0, alpha=a)[0] == pytest.approx(want, abs=1e-14)


def test_focal_negative_gamma():
    with pytest.raises(ValueError):
        focal_loss(np.zeros(2), np.zeros(2), -1.0)


# ---------------------------------------------------------------- composite

def test_composite_perfect():
    t = np.stack([hard_pair(4), hard_pair(5)])
    value, _ = composite_roi_loss(t, t)
    assert 0.0 <= value < 1e-12


def test_composite_without_focal():
    rng = np.random.default_rng(6)
    p, t = rng.random((8, 8)), hard_pair(6, (8, 8))
    w = LossWeights(lambda_f=0.0)
    assert composite_roi_loss(p, t, w)[0] == w.lambda_t * tversky_loss(p, t, w)[0]


def test_composite_component_sum():
    rng = np.random.default_rng(7)
    p, t = rng.random((3, 8, 8)), np.stack([hard_pair(s, (8, 8)) for s in range(3)])
    w = LossWeights()
    want = sum(w.lambda_t * tversky_loss(p[i], t[i], w)[0] + w.lambda_f * focal_loss(p[i], t[i], w.gamma)[0]
               for i in range(3))
    assert abs(composite_roi_loss(p, t, w)[0] - want) < 1e-12


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)
    assert LossWeights() == LossWeights(0.3, 0.7, 2.0, 1.0, 0.2)


def test_presets():
    assert set(PRESETS) == {"main", "appendix-training"}
    preset = PRESETS["appendix-training"]
    assert (preset.focal_weight, preset.focal_alpha, preset.tversky_weight) == (20.0, 0.25, 0.2)
    assert preset.tversky_alpha == preset.tversky_beta == 0.5
    with pytest.raises(ValueError):
        roi_loss(np.zeros((2, 2)), np.zeros((2, 2)), "other")


def test_appendix_mix_component_sum():
    rng = np.random.default_rng(8)
    p, t = rng.random((6, 6)), hard_pair(8)
    pr = AppendixPreset()
    want = (20 * focal_loss(p, t, 2.0, 0.25)[0] + dice_loss(p, t)[0] + iou_loss(p, t)[0]
            + 0.2 * tversky_loss(p, t, LossWeights(alpha=0.5, beta=0.5))[0])
    assert appendix_loss(p, t, pr)[0] == pytest.approx(want, abs=1e-12)


def test_dice_and_iou_forms():
    p, t = np.array([0.2, 0.9, 0.5]), np.array([0.0, 1.0, 1.0])
    inter, sp, st_ = 0.9 + 0.5, 1.6, 2.0
    assert dice_loss(p, t)[0] == pytest.approx(1 - 2 * inter / (sp + st_), abs=1e-15)
    assert iou_loss(p, t)[0] == pytest.approx(1 - inter / (sp + st_ - inter), abs=1e-15)


# ---------------------------------------------------------------- gradients

LOSSES = {
    "tversky": lambda p, t: tversky_loss(p, t),
    "focal": lambda p, t: focal_loss(p, t, 2.0),
    "focal_alpha": lambda p, t: focal_loss(p, t, 2.0, 0.25),
    "dice": dice_loss,
    "iou": iou_loss,
    "composite": composite_roi_loss,
    "appendix": appendix_loss,
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("seed", [0, 1])
def test_loss_gradients(name, seed):
    rng = np.random.default_rng(seed)
    p = 0.05 + 0.9 * rng.random((6, 6))
    t = hard_pair(seed + 10)
    fn = LOSSES[name]
    _, grad = fn(p, t)
    fd = central_diff(lambda: fn(p, t)[0], p, h=1e-6)
    assert max_rel_err(grad, fd, floor=1e-4) < 1e-6


@given(st.integers(0, 1000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random((5, 5)), (rng.random((5, 5)) < 0.5).astype(float)
    for fn in LOSSES.values():
        assert fn(p, t)[0] >= 0.0


# ---------------------------------------------------------- BCE with logits

def test_bce_logits_zero():
    assert bce_with_logits(np.zeros(1), np.ones(1))[0] == pytest.approx(math.log(2), abs=1e-15)


def test_bce_logits_large():
    value, grad = bce_with_logits(np.array([50.0, -800.0]), np.array([1.0, 0.0]))
    assert 0.0 <= value < 1e-20
    assert np.all(np.isfinite(grad))


def test_bce_logits_naive_oracle():
    rng = np.random.default_rng(4)
    z, y = 3 * rng.standard_normal(16), (rng.random(16) < 0.5).astype(float)
    value, grad = bce_with_logits(z, y)
    assert abs(value - bce_logits_naive(z, y)) < 1e-9
    np.testing.assert_allclose(grad, (1 / (1 + np.exp(-z)) - y) / 16, atol=1e-15)


def test_bce_logits_rejects_non_finite():
    with pytest.raises(ValueError):
        bce_with_logits(np.array([np.inf]), np.array([1.0]))
