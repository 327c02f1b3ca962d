"""Dense attention blocks on patch-embedding grids.

Blocks are residual: ``x + (softmax(Q K^T / sqrt(c_head)) V) W_o + b_o``.
Everything is evaluated on a :class:`~roitrack.tape.Tape` so the same code
path serves inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .errors import NumericError
from .tape import Tape, Var

ATTN_KEYS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")


@dataclass
class FeatureMap:
    """A ``P x C`` grid of patch embeddings laid out row-major over ``grid_h x grid_w``."""

    data: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"feature map must be P x C, got shape {self.data.shape}")
        if self.grid_h <= 0 or self.grid_w <= 0 or self.grid_h * self.grid_w != self.data.shape[0]:
            raise ValueError(
                f"grid {self.grid_h}x{self.grid_w} does not match {self.data.shape[0]} patches"
            )
        if not np.all(np.isfinite(self.data)):
            raise NumericError("feature map contains non-finite entries")

    @property
    def patches(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @classmethod
    def square(cls, data) -> "FeatureMap":
        data = np.asarray(data)
        side = int(round(np.sqrt(data.shape[0])))
        return cls(data, side, side)


@dataclass
class AttentionParams:
    """Projection weights (laid out in x out) and biases of one attention block."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    head_count: int = 1

    def __post_init__(self):
        c = self.channels
        for key in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, key).shape != (c, c):
                raise ValueError(f"{key} must be {c}x{c}")
        for key in ("b_q", "b_k", "b_v", "b_o"):
            if getattr(self, key).shape != (c,):
                raise ValueError(f"{key} must have length {c}")
        if self.head_count <= 0 or c % self.head_count:
            raise ValueError(f"head_count {self.head_count} must divide channels {c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, head_count: int = 1, dtype=np.float64):
        bound = 1.0 / np.sqrt(channels)
        weights = {
            k: rng.uniform(-bound, bound, size=(channels, channels)).astype(dtype)
            for k in ("w_q", "w_k", "w_v", "w_o")
        }
        biases = {k: np.zeros(channels, dtype=dtype) for k in ("b_q", "b_k", "b_v", "b_o")}
        return cls(**weights, **biases, head_count=head_count)

    def to_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in ATTN_KEYS}

    @classmethod
    def from_dict(cls, params: dict[str, np.ndarray], prefix: str = "", head_count: int = 1):
        return cls(**{k: params[prefix + k] for k in ATTN_KEYS}, head_count=head_count)


def init_attention(params: dict, prefix: str, channels: int, rng: np.random.Generator, dtype) -> None:
    """Append a freshly initialised block to an ordered parameter dict."""
    params.update(AttentionParams.init(channels, rng, dtype=dtype).to_dict(prefix))


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax of a real matrix."""
    m = np.asarray(m)
    if m.dtype.kind != "f":
        m = m.astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError("softmax input contains non-finite entries")
    return T.softmax_array(m)


def attend(q_in: Var, kv_in: Var, p: dict[str, Var], head_count: int = 1) -> Var:
    """Residual attention of ``q_in`` over ``kv_in`` on a tape.

    ``q_in`` is ``(..., P, C)``, ``kv_in`` is ``(..., K, C)``; ``p`` maps the
    names in :data:`ATTN_KEYS` to tape variables.
    """
    c = q_in.data.shape[-1]
    if kv_in.data.shape[-1] != c or p["w_q"].data.shape[0] != c:
        raise ValueError(
            f"channel mismatch: query {c}, keys {kv_in.data.shape[-1]}, params {p['w_q'].data.shape[0]}"
        )
    dh = c // head_count
    q = T.linear(q_in, p["w_q"], p["b_q"])
    k = T.linear(kv_in, p["w_k"], p["b_k"])
    v = T.linear(kv_in, p["w_v"], p["b_v"])
    if head_count > 1:
        q, k, v = (_split_heads(t, head_count) for t in (q, k, v))
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(dh))
    ctx = T.matmul(T.softmax_rows(scores), v)
    if head_count > 1:
        ctx = _merge_heads(ctx)
    return T.add(q_in, T.linear(ctx, p["w_o"], p["b_o"]))


def _split_heads(x: Var, h: int) -> Var:
    *lead, n, c = x.data.shape
    x = T.reshape(x, (*lead, n, h, c // h))
    nd = len(lead)
    axes = list(range(nd)) + [nd + 1, nd, nd + 2]
    return T.transpose(x, axes)


def _merge_heads(x: Var) -> Var:
    *lead, h, n, dh = x.data.shape
    nd = len(lead)
    axes = list(range(nd)) + [nd + 1, nd, nd + 2]
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, n, h * dh))


def params_on_tape(tape: Tape, params: AttentionParams, prefix: str = "") -> dict[str, Var]:
    return {k: tape.leaf(v, prefix + k) for k, v in params.to_dict().items()}


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureMap) else np.asarray(x)


def self_attention(x, p: AttentionParams):
    """Residual self-attention; returns a FeatureMap when given one."""
    return cross_attention(x, x, p)


def cross_attention(q, kv, p: AttentionParams):
    """Residual attention with queries from ``q`` and keys/values from ``kv``."""
    qa, kva = _as_array(q), _as_array(kv)
    if qa.shape[-1] != p.channels or kva.shape[-1] != p.channels:
        raise ValueError(
            f"channel mismatch: query {qa.shape[-1]}, keys {kva.shape[-1]}, params {p.channels}"
        )
    tape = Tape(dtype=p.w_q.dtype)
    q_var = tape.leaf(qa, "q")
    kv_var = q_var if kv is q else tape.leaf(kva, "kv")
    out = attend(q_var, kv_var, params_on_tape(tape, p), p.head_count).data
    if isinstance(q, FeatureMap):
        return FeatureMap(out, q.grid_h, q.grid_w)
    return out
