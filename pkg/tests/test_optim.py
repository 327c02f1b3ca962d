from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import adam_transcription
from roitrack.optim import (AdamState, Diverged, LossTrace, LrSchedule, NonFiniteGradient, SgdState, TrainConfig,
                            adam_step, clip_grad_norm, global_norm, lr_at, sgd_step, train)

# --------------------------------------------------------------- schedule

def test_schedule_anchor_points():
    s = LrSchedule(0.01, 5000, 80000)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5000) == 0.01
    assert lr_at(s, 80000) == 0.0
    assert lr_at(s, 2500) == pytest.approx(0.005, abs=1e-15)
    assert lr_at(s, 5000 + 37500) == pytest.approx(0.005, abs=1e-15)


def test_schedule_past_end_warns(caplog):
    s = LrSchedule(0.01, 10, 100)
    with caplog.at_level(logging.WARNING):
        assert lr_at(s, 150) == 0.0
    assert "beyond schedule end" in caplog.text


def test_schedule_validation():
    for w, t in [(0, 100), (100, 100), (200, 100)]:
        with pytest.raises(ValueError):
            LrSchedule(0.01, w, t)
    with pytest.raises(ValueError):
        lr_at(LrSchedule(0.01, 10, 100), -1)


@given(st.integers(1, 50), st.integers(1, 200))
def test_schedule_shape(warmup, extra):
    s = LrSchedule(0.3, warmup, warmup + extra)
    values = [s(t) for t in range(warmup + extra + 1)]
    assert all(0.0 <= v <= 0.3 for v in values)
    assert all(a <= b for a, b in zip(values[:warmup], values[1 : warmup + 1]))
    assert all(a >= b for a, b in zip(values[warmup:], values[warmup + 1 :]))


# ------------------------------------------------------------------- Adam

def test_adam_first_step_closed_form():
    theta = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    params = {"w": theta.copy()}
    adam_step(AdamState(), params, {"w": g.copy()}, 0.01)
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    np.testing.assert_allclose(params["w"], theta - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adam_transcription_100_steps():
    rng = np.random.default_rng(21)
    grads = rng.standard_normal(100).tolist()
    want = adam_transcription(0.7, grads, 0.05)
    params, state = {"x": np.array(0.7)}, AdamState()
    for g, w in zip(grads, want):
        adam_step(state, params, {"x": np.array(g)}, 0.05)
        assert abs(float(params["x"]) - w) < 1e-12


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, 2.0])}
    adam_step(AdamState(), params, {"w": np.zeros(2)}, 0.1)
    assert params["w"].tolist() == [1.0, 2.0]


@given(st.integers(0, 10**6), st.sampled_from([0.5, 2.0, 4.0]))
def test_adam_eta_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    theta, grads = rng.standard_normal(4), rng.standard_normal((5, 4))
    steps = []
    for eta in (0.01, 0.01 * k):
        params, state = {"w": theta.copy()}, AdamState()
        for g in grads:
            adam_step(state, params, {"w": g}, eta)
        steps.append(params["w"] - theta)
    np.testing.assert_allclose(steps[1], k * steps[0], rtol=1e-12, atol=1e-15)


def test_adam_non_finite_leaves_everything():
    params, state = {"a": np.ones(2), "b": np.ones(2)}, AdamState()
    adam_step(state, params, {"a": np.ones(2), "b": np.ones(2)}, 0.1)
    before = {k: v.copy() for k, v in params.items()}
    m_before = {k: v.copy() for k, v in state.m.items()}
    with pytest.raises(NonFiniteGradient):
        adam_step(state, params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, 0.1)
    assert state.t == 1
    for k in params:
        assert np.array_equal(params[k], before[k])
        assert np.array_equal(state.m[k], m_before[k])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"a": np.ones(2)}, {"a": np.ones(3)}, 0.1)
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"a": np.ones(2)}, {"b": np.ones(2)}, 0.1)


def test_sgd_momentum():
    params, state = {"w": np.array([1.0])}, SgdState(momentum=0.5)
    sgd_step(state, params, {"w": np.array([2.0])}, 0.1)
    sgd_step(state, params, {"w": np.array([2.0])}, 0.1)
    assert params["w"][0] == pytest.approx(1.0 - 0.2 - 0.3, abs=1e-15)


# --------------------------------------------------------------- clipping

@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_clip_norm(seed, scale):
    rng = np.random.default_rng(seed)
    grads = {"a": scale * rng.standard_normal((3, 2)), "b": scale * rng.standard_normal(4)}
    norm = global_norm(grads)
    clipped, reported = clip_grad_norm(grads, 0.1)
    assert reported == norm
    assert abs(global_norm(clipped) - min(norm, 0.1)) < 1e-12
    if norm <= 0.1:
        assert clipped is grads


def test_clip_direction_preserved():
    grads = {"a": np.array([3.0, 4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8], atol=1e-15)
    with pytest.raises(ValueError):
        clip_grad_norm(grads, 0.0)


# ------------------------------------------------------------- train loop

def quadratic_loss(params, target):
    d = params["w"] - target
    return float(np.sum(d * d)), {"w": 2 * d}


def constant_batches(value):
    while True:
        yield value


def test_ema_recurrence():
    trace = LossTrace()
    for i, loss in enumerate([4.0, 2.0, 1.0]):
        trace.append(i, loss)
    assert trace.emas[0] == 4.0
    assert trace.emas[1] == pytest.approx(0.99 * 4.0 + 0.01 * 2.0, abs=1e-15)
    assert trace.emas[2] == pytest.approx(0.99 * trace.emas[1] + 0.01 * 1.0, abs=1e-15)


def test_zero_lr_leaves_params_bit_identical():
    params = {"w": np.array([0.3, -1.2])}
    before = params["w"].copy()
    train(params, constant_batches(np.zeros(2)), quadratic_loss, TrainConfig(eta0=0.0, warmup=0, total_steps=5))
    assert params["w"].tobytes() == before.tobytes()


def test_train_converges_and_is_deterministic():
    results = []
    for _ in range(2):
        params = {"w": np.array([3.0, -2.0])}
        cfg = TrainConfig(eta0=0.1, warmup=10, total_steps=300, clip=None)
        trace = train(params, constant_batches(np.array([1.0, 1.0])), quadratic_loss, cfg)
        results.append((params["w"].tobytes(), trace.losses))
    assert results[0] == results[1]
    assert results[0][1][-1] < 1e-3 * results[0][1][0]


def test_train_divergence():
    def bad(params, batch):
        return math.nan, {"w": np.zeros(1)}

    with pytest.raises(Diverged) as info:
        train({"w": np.zeros(1)}, constant_batches(None), bad, TrainConfig(warmup=1, total_steps=3))
    assert info.value.trace.losses == []


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        train({"w": np.zeros(1)}, constant_batches(0.0), quadratic_loss, TrainConfig(optimizer="lbfgs"))


def test_train_config_dict():
    cfg = TrainConfig.from_dict({"eta0": 0.01, "warmup": 5000, "total_steps": 80000, "clip": 0.1})
    assert isinstance(cfg.schedule(), LrSchedule)
    assert TrainConfig.from_dict({"warmup": 0}).schedule()(123) == TrainConfig().eta0
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_trace_csv(tmp_path):
    trace = LossTrace()
    trace.append(0, 0.1)
    trace.append(1, 0.05)
    trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss,ema" and lines[1] == "0,0.1,0.1"
