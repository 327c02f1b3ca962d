"""Hierarchical spatial fusion attention with text-conditioned normalization.

Per layer the query stream runs self-attention, cross-attention against the
reference concatenation, and AdaNorm-Zero injection of the text embedding;
the reference stream then runs per-view self-attention followed by joint
self-attention over all views. On the first layer the cross-attention sees
the raw encoder concatenation because the reference stream is only updated
after it. A bilinear upsampling head maps the final query grid to an ROI
heatmap.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tape as T
from .attention import ATTN_KEYS, FeatureMap, attend, init_attention
from .tape import Tape, Var

CHECKPOINT_MAGIC = b"HSFA"
CHECKPOINT_VERSION = 1
BLOCKS = ("qself", "cross", "view", "joint")


@dataclass
class SemanticInjectionParams:
    w_gamma: np.ndarray  # C x d
    w_beta: np.ndarray  # C x d
    base_gamma: np.ndarray
    base_beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        c, d = self.w_gamma.shape
        if self.w_beta.shape != (c, d) or self.base_gamma.shape != (c,) or self.base_beta.shape != (c,):
            raise ValueError("inconsistent injection parameter shapes")

    @classmethod
    def zero(cls, channels: int, text_dim: int, epsilon: float = 1e-5, dtype=np.float64):
        return cls(
            np.zeros((channels, text_dim), dtype),
            np.zeros((channels, text_dim), dtype),
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            epsilon,
        )


def ada_norm_on_tape(f: Var, e_t: Var, p: dict[str, Var], eps: float) -> Var:
    """Tape form of :func:`ada_norm_zero`; ``f`` is ``(..., P, C)``, ``e_t`` is ``(..., d)``."""
    normed = T.channel_norm(f, eps)
    # (..., d) @ (d, C) -> (..., C) -> (..., 1, C)
    d_gamma = T.matmul(T.reshape(e_t, (*e_t.shape[:-1], 1, e_t.shape[-1])), T.swap_last(p["inj.w_gamma"]))
    d_beta = T.matmul(T.reshape(e_t, (*e_t.shape[:-1], 1, e_t.shape[-1])), T.swap_last(p["inj.w_beta"]))
    gamma = T.add(p["inj.gamma"], d_gamma)
    beta = T.add(p["inj.beta"], d_beta)
    return T.add(T.mul(gamma, normed), beta)


def ada_norm_zero(f, e_t, p: SemanticInjectionParams):
    """Channel normalization over patches with text-driven scale and shift offsets."""
    fa = f.data if isinstance(f, FeatureMap) else np.asarray(f)
    e = np.asarray(e_t)
    c, d = p.w_gamma.shape
    if fa.shape[-1] != c or e.shape[-1] != d:
        raise ValueError(f"expected {c} channels and a length-{d} embedding, got {fa.shape[-1]} and {e.shape[-1]}")
    tape = Tape(dtype=fa.dtype if fa.dtype.kind == "f" else np.float64)
    params = {
        "inj.w_gamma": tape.leaf(p.w_gamma),
        "inj.w_beta": tape.leaf(p.w_beta),
        "inj.gamma": tape.leaf(p.base_gamma),
        "inj.beta": tape.leaf(p.base_beta),
    }
    out = ada_norm_on_tape(tape.leaf(fa), tape.leaf(e), params, p.epsilon).data
    return FeatureMap(out, f.grid_h, f.grid_w) if isinstance(f, FeatureMap) else out


def bilinear_matrix(n_in: int, s: int, dtype=np.float64) -> np.ndarray:
    """``(n_in * s) x n_in`` interpolation matrix, half-pixel centres, edge clamped."""
    n_out = n_in * s
    u = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        x = min(max((i + 0.5) / s - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(x))
        i1 = min(i0 + 1, n_in - 1)
        w = x - i0
        u[i, i0] += 1.0 - w
        u[i, i1] += w
    return u


def upsample_on_tape(q: Var, grid_h: int, grid_w: int, scale: int, w: Var, b: Var) -> Var:
    """Project to one channel, bilinearly upsample, squash. Returns ``(..., H, W)``."""
    logits = T.linear(q, w, b)  # (..., P, 1)
    grid = T.reshape(logits, (*q.shape[:-2], grid_h, grid_w))
    if scale != 1:
        tape = q.tape
        uh = tape.constant(bilinear_matrix(grid_h, scale))
        uw = tape.constant(bilinear_matrix(grid_w, scale).T)
        grid = T.matmul(T.matmul(uh, grid), uw)
    return T.sigmoid(grid)


@dataclass
class HsfaConfig:
    channels: int = 32
    text_dim: int = 16
    n_layers: int = 3
    view_count: int = 16
    scale: int = 2
    head_count: int = 1
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 0 or self.view_count < 1 or self.scale < 1:
            raise ValueError("n_layers >= 0, view_count >= 1 and scale >= 1 are required")
        if self.channels % self.head_count:
            raise ValueError("head_count must divide channels")


class HsfaModel:
    """Parameters plus configuration of the fusion stack.

    ``params`` is an insertion-ordered dict; that order is the checkpoint
    order and the order optimizers iterate in.
    """

    def __init__(self, config: HsfaConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: HsfaConfig, seed: int = 0, dtype=np.float32) -> "HsfaModel":
        rng = np.random.default_rng(seed)
        c, d = config.channels, config.text_dim
        params: dict[str, np.ndarray] = {}
        for j in range(config.n_layers):
            for block in BLOCKS:
                init_attention(params, f"l{j}.{block}.", c, rng, dtype)
        params["inj.w_gamma"] = np.zeros((c, d), dtype)
        params["inj.w_beta"] = np.zeros((c, d), dtype)
        params["inj.gamma"] = np.ones(c, dtype)
        params["inj.beta"] = np.zeros(c, dtype)
        bound = 1.0 / np.sqrt(c)
        params["head.w"] = rng.uniform(-bound, bound, size=(c, 1)).astype(dtype)
        params["head.b"] = np.zeros(1, dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def injection(self) -> SemanticInjectionParams:
        p = self.params
        return SemanticInjectionParams(
            p["inj.w_gamma"], p["inj.w_beta"], p["inj.gamma"], p["inj.beta"], self.config.epsilon
        )

    def forward_tape(self, tape: Tape, query: np.ndarray, refs: list[np.ndarray], e_t: np.ndarray | None,
                     grid: tuple[int, int], trace: dict | None = None) -> Var:
        """Batched forward on ``tape``; ``query`` is ``(..., P, C)``, each ref ``(..., P_i, C)``."""
        cfg = self.config
        if len(refs) != cfg.view_count:
            raise ValueError(f"model expects {cfg.view_count} reference views, got {len(refs)}")
        c = cfg.channels
        if query.shape[-1] != c or any(r.shape[-1] != c for r in refs):
            raise ValueError(f"all feature maps must have {c} channels")
        if e_t is None:
            e_t = np.zeros((*query.shape[:-2], cfg.text_dim), dtype=tape.dtype)
        elif e_t.shape[-1] != cfg.text_dim:
            raise ValueError(f"text embedding must have length {cfg.text_dim}")

        p = {name: tape.leaf(value, name) for name, value in self.params.items()}
        eq = tape.constant(query)
        views = [tape.constant(r) for r in refs]
        sizes = [r.shape[-2] for r in refs]
        e = tape.constant(e_t)
        eref = T.concat(views, axis=-2) if len(views) > 1 else views[0]
        if trace is not None:
            trace["raw_ref"] = eref
            trace.setdefault("cross_kv", [])
            trace.setdefault("joint_out", [])

        for j in range(cfg.n_layers):
            blk = {b: {k: p[f"l{j}.{b}.{k}"] for k in ATTN_KEYS} for b in BLOCKS}
            eq = attend(eq, eq, blk["qself"], cfg.head_count)
            if trace is not None:
                trace["cross_kv"].append(eref)
            eq = attend(eq, eref, blk["cross"], cfg.head_count)
            eq = ada_norm_on_tape(eq, e, p, cfg.epsilon)
            eref = self._per_view(eref, sizes, blk["view"])
            eref = attend(eref, eref, blk["joint"], cfg.head_count)
            if trace is not None:
                trace["joint_out"].append(eref)

        return upsample_on_tape(eq, grid[0], grid[1], cfg.scale, p["head.w"], p["head.b"])

    def _per_view(self, eref: Var, sizes: list[int], blk: dict[str, Var]) -> Var:
        h = self.config.head_count
        if len(set(sizes)) == 1:
            lead = eref.shape[:-2]
            stacked = T.reshape(eref, (*lead, len(sizes), sizes[0], eref.shape[-1]))
            out = attend(stacked, stacked, blk, h)
            return T.reshape(out, eref.shape)
        parts, start = [], 0
        for n in sizes:
            view = T.take(eref, start, start + n, axis=-2)
            parts.append(attend(view, view, blk, h))
            start += n
        return T.concat(parts, axis=-2)


def hsfa_forward(model: HsfaModel, query: FeatureMap, refs: list[FeatureMap], e_t=None,
                 trace: dict | None = None) -> np.ndarray:
    """ROI heatmap of shape ``(grid_h * s, grid_w * s)`` with values in [0, 1]."""
    if len(refs) != model.config.view_count:
        raise ValueError(f"model expects {model.config.view_count} reference views, got {len(refs)}")
    tape = Tape(dtype=model.dtype)
    e = None if e_t is None else np.asarray(e_t, dtype=model.dtype)
    out = model.forward_tape(
        tape,
        np.asarray(query.data, dtype=model.dtype),
        [np.asarray(r.data, dtype=model.dtype) for r in refs],
        e,
        (query.grid_h, query.grid_w),
        trace,
    )
    return out.data


def upsample_head(model: HsfaModel, q: FeatureMap) -> np.ndarray:
    """Apply only the model's upsampling head to a query grid."""
    tape = Tape(dtype=model.dtype)
    out = upsample_on_tape(
        tape.constant(np.asarray(q.data, dtype=model.dtype)),
        q.grid_h, q.grid_w, model.config.scale,
        tape.leaf(model.params["head.w"]), tape.leaf(model.params["head.b"]),
    )
    return out.data


# ---------------------------------------------------------------- checkpoint

_DIM_FIELDS = ("channels", "text_dim", "n_layers", "view_count", "scale", "head_count")


def save_checkpoint(model: HsfaModel, path) -> None:
    cfg = model.config
    header = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION)
    header += struct.pack("<6I", *(getattr(cfg, f) for f in _DIM_FIELDS))
    header += struct.pack("<d", cfg.epsilon)
    blocks = [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.params.values()]
    Path(path).write_bytes(header + b"".join(blocks))


def load_checkpoint(path) -> HsfaModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an HSFA checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from("<6I", raw, 6)
    (eps,) = struct.unpack_from("<d", raw, 30)
    cfg = HsfaConfig(**dict(zip(_DIM_FIELDS, dims)), epsilon=eps)
    template = HsfaModel.init(cfg, seed=0, dtype=np.float32)
    offset = 38
    params = {}
    for name, ref in template.params.items():
        n = ref.size * 4
        if offset + n > len(raw):
            raise ValueError(f"{path}: truncated at parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=ref.size, offset=offset).reshape(ref.shape).astype(np.float32)
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return HsfaModel(cfg, params)


def config_dict(model: HsfaModel) -> dict:
    return asdict(model.config)
