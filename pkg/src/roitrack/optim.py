"""Optimizers, learning-rate schedule, gradient clipping and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]
EMA_DECAY = 0.99


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or inf; the step was not applied."""


class Diverged(RuntimeError):
    def __init__(self, message: str, trace: "LossTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class LrSchedule:
    """Linear warm-up to ``eta0`` then cosine annealing to zero at ``total_steps``."""

    eta0: float = 0.01
    warmup_steps: int = 5000
    total_steps: int = 80000

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("0 < warmup_steps < total_steps is required")

    def __call__(self, t: int) -> float:
        return lr_at(self, t)


def lr_at(s: LrSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be nonnegative")
    if t > s.total_steps:
        log.warning("step %d beyond schedule end %d; clamping", t, s.total_steps)
        t = s.total_steps
    if t < s.warmup_steps:
        return s.eta0 * t / s.warmup_steps
    if t == s.total_steps:
        return 0.0
    frac = (t - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return 0.5 * s.eta0 * (1.0 + math.cos(frac * math.pi))


def constant_lr(eta: float) -> Callable[[int], float]:
    return lambda t: eta


def _check_finite(grads: Params) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params, eta: float) -> None:
    """One bias-corrected Adam update, in place.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient
    is not finite.
    """
    if grads.keys() != params.keys():
        raise ValueError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    _check_finite(grads)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / c1
        v_hat = v / c2
        theta -= (eta * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)


@dataclass
class SgdState:
    momentum: float = 0.0
    t: int = 0
    velocity: Params = field(default_factory=dict)


def sgd_step(state: SgdState, params: Params, grads: Params, eta: float) -> None:
    _check_finite(grads)
    state.t += 1
    for name, theta in params.items():
        g = grads[name]
        if state.momentum:
            vel = state.velocity.get(name, np.zeros_like(g))
            vel = state.momentum * vel + g
            state.velocity[name] = vel
            g = vel
        theta -= (eta * g).astype(theta.dtype)


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    emas: list[float] = field(default_factory=list)
    decay: float = EMA_DECAY

    def append(self, step: int, loss: float) -> None:
        ema = loss if not self.emas else self.decay * self.emas[-1] + (1.0 - self.decay) * loss
        self.steps.append(step)
        self.losses.append(loss)
        self.emas.append(ema)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "ema"])
            for row in zip(self.steps, self.losses, self.emas):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    eta0: float = 1e-3
    warmup: int = 100
    total_steps: int = 1000
    batch: int = 8
    seed: int = 0
    loss_preset: str = "main"
    clip: float | None = 0.1
    momentum: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**known)

    def schedule(self) -> Callable[[int], float]:
        if self.warmup <= 0:
            return constant_lr(self.eta0)
        return LrSchedule(self.eta0, self.warmup, self.total_steps)


LossFn = Callable[[Params, object], tuple[float, Params]]


def train(params: Params, batches: Iterator, loss_fn: LossFn, config: TrainConfig,
          on_step: Callable[[int, float], None] | None = None) -> LossTrace:
    """forward/backward -> clip -> optimizer step, for ``config.total_steps`` steps.

    ``loss_fn(params, batch)`` returns the loss and its gradient per
    parameter. Parameters are updated in place.
    """
    schedule = config.schedule()
    if config.optimizer == "adam":
        state, step_fn = AdamState(), adam_step
    elif config.optimizer == "sgd":
        state, step_fn = SgdState(momentum=config.momentum), sgd_step
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    trace = LossTrace()
    for step in range(config.total_steps):
        batch = next(batches)
        loss, grads = loss_fn(params, batch)
        if not math.isfinite(loss):
            raise Diverged(f"loss became {loss} at step {step}", trace)
        if config.clip is not None:
            grads, _ = clip_grad_norm(grads, config.clip)
        eta = schedule(step + 1)
        if eta != 0.0:
            step_fn(state, params, grads, eta)
        trace.append(step, loss)
        if on_step is not None:
            on_step(step, loss)
    return trace
