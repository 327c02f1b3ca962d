"""Tracking verification: pair classifier, memory pool and the re-registration state machine."""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape as T
from .attention import ATTN_KEYS, attend, init_attention
from .errors import InvalidStateError, NumericError
from .tape import Tape, Var

CHECKPOINT_MAGIC = b"TOMM"
CHECKPOINT_VERSION = 1


@dataclass
class CropFeature:
    data: np.ndarray  # P x C
    source_frame: int = -1
    object_id: object = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("crop features must be P x C")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("crop features contain non-finite entries")


class TomModel:
    """Pair classifier over concatenated candidate/reference token sequences.

    Segment embeddings mark which sequence a token came from. After the
    attention layers each segment is mean-pooled separately and the head
    sees ``[m_c, m_r, m_c * m_r, (m_c - m_r)^2]``.
    """

    def __init__(self, attention_layers: int, channels: int, params: dict[str, np.ndarray]):
        if attention_layers not in (0, 1, 2):
            raise ValueError("attention_layers must be 0, 1 or 2")
        self.attention_layers = attention_layers
        self.channels = channels
        self.params = params

    @classmethod
    def init(cls, attention_layers: int = 1, channels: int = 32, seed: int = 0, dtype=np.float32) -> "TomModel":
        rng = np.random.default_rng([seed, 0x70])
        bound = 1.0 / np.sqrt(channels)
        params = {"seg": rng.uniform(-bound, bound, size=(2, channels)).astype(dtype)}
        for i in range(attention_layers):
            init_attention(params, f"a{i}.", channels, rng, dtype)
        params["head.w"] = rng.uniform(-bound, bound, size=(4 * channels, 1)).astype(dtype)
        params["head.b"] = np.zeros(1, dtype)
        return cls(attention_layers, channels, params)

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def logits_tape(self, tape: Tape, cand: np.ndarray, ref: np.ndarray) -> Var:
        """``cand`` and ``ref`` are ``(..., P, C)``; returns logits of shape ``(...)``."""
        if cand.shape != ref.shape:
            raise ValueError(f"candidate shape {cand.shape} != reference shape {ref.shape}")
        if cand.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {cand.shape[-1]}")
        p = {k: tape.leaf(v, k) for k, v in self.params.items()}
        n = cand.shape[-2]
        seg_c = T.take(p["seg"], 0, 1, axis=0)
        seg_r = T.take(p["seg"], 1, 2, axis=0)
        x = T.concat([T.add(tape.constant(cand), seg_c), T.add(tape.constant(ref), seg_r)], axis=-2)
        for i in range(self.attention_layers):
            x = attend(x, x, {k: p[f"a{i}.{k}"] for k in ATTN_KEYS})
        m_c = T.mean(T.take(x, 0, n, axis=-2), axis=-2)
        m_r = T.mean(T.take(x, n, 2 * n, axis=-2), axis=-2)
        diff = T.sub(m_c, m_r)
        feat = T.concat([m_c, m_r, T.mul(m_c, m_r), T.mul(diff, diff)], axis=-1)
        logit = T.linear(feat, p["head.w"], p["head.b"])
        return T.reshape(logit, logit.shape[:-1])

    def logits(self, cand: np.ndarray, ref: np.ndarray) -> np.ndarray:
        tape = Tape(dtype=self.dtype)
        return self.logits_tape(tape, np.asarray(cand, self.dtype), np.asarray(ref, self.dtype)).data


def verify(model: TomModel, candidate: CropFeature, reference: CropFeature) -> float:
    """Probability that ``candidate`` shows the same correctly tracked object as ``reference``."""
    if candidate.data.shape != reference.data.shape:
        raise ValueError(f"shape mismatch {candidate.data.shape} vs {reference.data.shape}")
    z = model.logits(candidate.data, reference.data)
    return float(T.sigmoid_array(np.atleast_1d(z))[0])


def cosine_verify(candidate, reference) -> float:
    """Cosine similarity of the mean-pooled token vectors."""
    a = np.asarray(getattr(candidate, "data", candidate), dtype=np.float64)
    b = np.asarray(getattr(reference, "data", reference), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    u, v = a.mean(axis=0), b.mean(axis=0)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cannot take the cosine of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_scores(cand: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Batched :func:`cosine_verify` over ``(N, P, C)`` arrays."""
    u, v = cand.mean(axis=-2), ref.mean(axis=-2)
    return (u * v).sum(-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))


# ------------------------------------------------------------ session state


class TrackState(enum.Enum):
    REGISTERED = "registered"
    TRACKING = "tracking"
    LOST = "lost"


class TrackDecision(enum.Enum):
    CONTINUE = "continue"
    REREGISTER = "reregister"


# (state, event) -> next state. Events: "register", "pass" (score >= threshold),
# "fail" (score < threshold). Anything missing is not a legal transition.
TRANSITIONS = {
    (None, "register"): TrackState.REGISTERED,
    (TrackState.REGISTERED, "pass"): TrackState.TRACKING,
    (TrackState.REGISTERED, "fail"): TrackState.LOST,
    (TrackState.TRACKING, "pass"): TrackState.TRACKING,
    (TrackState.TRACKING, "fail"): TrackState.LOST,
    (TrackState.LOST, "pass"): TrackState.TRACKING,
    (TrackState.LOST, "fail"): TrackState.LOST,
    (TrackState.LOST, "register"): TrackState.REGISTERED,
}


class MemoryPool:
    """Bounded FIFO of reference crops; the oldest entry is evicted first."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: deque[CropFeature] = deque(maxlen=capacity)

    def add(self, crop: CropFeature) -> None:
        self._entries.append(crop)

    @property
    def entries(self) -> list[CropFeature]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class TrackSession:
    threshold: float = 0.5
    pool: MemoryPool = field(default_factory=MemoryPool)
    state: TrackState | None = None
    score_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError("threshold must lie in [0, 1)")

    def _transition(self, event: str) -> None:
        nxt = TRANSITIONS.get((self.state, event))
        if nxt is None:
            raise InvalidStateError(f"no transition from {self.state} on {event!r}")
        self.state = nxt

    def register(self, crop: CropFeature) -> None:
        """Start the session or complete a re-registration with a fresh crop."""
        self._transition("register")
        self.pool.add(crop)


def step(session: TrackSession, model: TomModel, frame_crop: CropFeature) -> TrackDecision:
    """Score the crop against every pool entry and take the best match."""
    if len(session.pool) == 0 or session.state is None:
        raise InvalidStateError("session has no registered reference crop")
    entries = session.pool.entries
    cand = np.broadcast_to(frame_crop.data, (len(entries), *frame_crop.data.shape))
    refs = np.stack([e.data for e in entries])
    scores = T.sigmoid_array(np.asarray(model.logits(cand, refs), dtype=np.float64))
    score = float(scores.max())
    session.score_history.append(score)
    if score >= session.threshold:
        session._transition("pass")
        return TrackDecision.CONTINUE
    session._transition("fail")
    return TrackDecision.REREGISTER


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(model: TomModel, path) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<HII", CHECKPOINT_VERSION, model.attention_layers, model.channels)
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.params.values())
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> TomModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a TOM checkpoint")
    version, layers, channels = struct.unpack_from("<HII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    template = TomModel.init(layers, channels)
    offset, params = 14, {}
    for name, ref in template.params.items():
        params[name] = np.frombuffer(raw, "<f4", ref.size, offset).reshape(ref.shape).astype(np.float32)
        offset += ref.size * 4
    if offset != len(raw):
        raise ValueError(f"{path}: size mismatch")
    return TomModel(layers, channels, params)
