"""Labeled crop pairs for the verifier, their file format, and failure simulation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synthetic import SyntheticWorld

DATASET_MAGIC = b"TOMD"
DATASET_VERSION = 1
POSITIVE, CROSS, DRIFT, ROTATION = "positive", "cross", "drift", "rotation"
NEGATIVE_KINDS = (CROSS, DRIFT, ROTATION)


@dataclass
class TrackDatasetConfig:
    n_pairs: int = 200_000
    seed: int = 0
    max_shift: int = 1
    negative_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # cross, drift, rotation


@dataclass
class TrackDataset:
    cand: np.ndarray  # N x P x C float32
    ref: np.ndarray
    labels: np.ndarray  # N uint8
    seeds: np.ndarray  # N uint64
    kinds: list[str] = field(default_factory=list)
    object_ids: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "TrackDataset":
        idx = np.asarray(idx)
        return TrackDataset(
            self.cand[idx], self.ref[idx], self.labels[idx], self.seeds[idx],
            [self.kinds[i] for i in idx] if self.kinds else [],
            [self.object_ids[i] for i in idx] if self.object_ids else [],
        )

    def split(self, holdout: float, seed: int = 0) -> tuple["TrackDataset", "TrackDataset"]:
        order = np.random.default_rng([seed, 0x5911]).permutation(len(self))
        n_test = int(round(holdout * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def generate_pair(world: SyntheticWorld, index: int, seed: int, config: TrackDatasetConfig):
    """One labeled pair, reproducible from ``(seed, index)`` alone.

    Even indices are positives; odd indices draw a negative kind from
    ``config.negative_mix``. Returns ``(label, cand, ref, pair_seed, kind, ids)``.
    """
    ps = pair_seed(seed, index)
    rng = np.random.default_rng(ps)
    n_obj = world.config.n_objects
    k = int(rng.integers(n_obj))
    view = int(rng.integers(4))
    ref = world.encode_crop(world.object_tokens(k, view, rng))
    if index % 2 == 0:
        cand = world.encode_crop(world.object_tokens(k, view, rng))
        return 1, cand, ref, ps, POSITIVE, (k, k)
    kind = NEGATIVE_KINDS[int(rng.choice(3, p=np.asarray(config.negative_mix) / sum(config.negative_mix)))]
    if kind == CROSS:
        other = int((k + 1 + rng.integers(n_obj - 1)) % n_obj)
        cand = world.encode_crop(world.object_tokens(other, int(rng.integers(4)), rng))
        return 0, cand, ref, ps, kind, (other, k)
    if kind == ROTATION:
        other_view = int((view + 1 + rng.integers(3)) % 4)
        cand = world.encode_crop(world.object_tokens(k, other_view, rng))
        return 0, cand, ref, ps, kind, (k, k)
    s, g = config.max_shift, world.part_grid
    while True:
        dr, dc = (int(v) for v in rng.integers(-s, s + 1, size=2))
        if dr or dc:
            break
    canvas = world.background_tokens((g + 2 * s, g + 2 * s), rng)
    canvas[s : s + g, s : s + g] = world.object_tokens(k, view, rng)
    cand = world.encode_crop(canvas[s + dr : s + dr + g, s + dc : s + dc + g])
    return 0, cand, ref, ps, kind, (k, k)


def generate_tracking_dataset(world: SyntheticWorld, config: TrackDatasetConfig) -> TrackDataset:
    """Balanced positive/negative crop pairs (positives at even indices)."""
    if world.config.n_objects < 2:
        raise ValueError("at least two object archetypes are required")
    if config.n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    p, c = world.part_grid**2, world.channels
    n = config.n_pairs
    cand = np.empty((n, p, c), np.float32)
    ref = np.empty((n, p, c), np.float32)
    labels = np.empty(n, np.uint8)
    seeds = np.empty(n, np.uint64)
    kinds, ids = [], []
    for i in range(n):
        labels[i], cand[i], ref[i], seeds[i], kind, obj = generate_pair(world, i, config.seed, config)
        kinds.append(kind)
        ids.append(obj)
    return TrackDataset(cand, ref, labels, seeds, kinds, ids)


def write_dataset(ds: TrackDataset, path) -> None:
    n, p, c = ds.cand.shape
    rec = np.dtype([("label", "u1"), ("cand", "<f4", (p, c)), ("ref", "<f4", (p, c)), ("seed", "<u8")])
    records = np.empty(n, dtype=rec)
    records["label"] = ds.labels
    records["cand"] = ds.cand
    records["ref"] = ds.ref
    records["seed"] = ds.seeds
    header = DATASET_MAGIC + struct.pack("<HIII", DATASET_VERSION, p, c, n)
    Path(path).write_bytes(header + records.tobytes())


def read_dataset(path) -> TrackDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a tracking dataset")
    version, p, c, n = struct.unpack_from("<HIII", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    rec = np.dtype([("label", "u1"), ("cand", "<f4", (p, c)), ("ref", "<f4", (p, c)), ("seed", "<u8")])
    if len(raw) != 18 + n * rec.itemsize:
        raise ValueError(f"{path}: expected {n} records")
    records = np.frombuffer(raw, dtype=rec, count=n, offset=18)
    return TrackDataset(
        records["cand"].astype(np.float32), records["ref"].astype(np.float32),
        records["label"].copy(), records["seed"].copy(),
    )


# ---------------------------------------------------------- failure simulation


@dataclass
class FailureConfig:
    keep_ratio: float = 0.25
    occlusion_prob: float = 0.0
    max_block: tuple[int, int] = (6, 6)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")


@dataclass
class FailureResult:
    frames: list[np.ndarray]
    kept: list[int]
    occlusions: dict[int, tuple[int, int, int, int]]  # kept index -> (r0, c0, r1, c1), exclusive ends


def occlusion_block(rng: np.random.Generator, grid_h: int, grid_w: int, max_block: tuple[int, int]):
    bh = int(rng.integers(1, min(max_block[0], grid_h) + 1))
    bw = int(rng.integers(1, min(max_block[1], grid_w) + 1))
    r0 = int(rng.integers(0, grid_h - bh + 1))
    c0 = int(rng.integers(0, grid_w - bw + 1))
    return r0, c0, r0 + bh, c0 + bw


def simulate_failures(sequence: list[np.ndarray], config: FailureConfig) -> FailureResult:
    """Random frame dropping plus zeroed token blocks on ``H x W x C`` frames."""
    if len(sequence) < 2:
        raise ValueError("sequence needs at least two frames")
    rng = np.random.default_rng([config.seed, 0xFA11])
    n = len(sequence)
    n_keep = max(1, int(round(config.keep_ratio * n)))
    kept = sorted(int(i) for i in rng.choice(n, size=n_keep, replace=False)) if n_keep < n else list(range(n))
    frames, occlusions = [], {}
    for i in kept:
        frame = sequence[i]
        if config.occlusion_prob > 0 and rng.random() < config.occlusion_prob:
            r0, c0, r1, c1 = occlusion_block(rng, frame.shape[0], frame.shape[1], config.max_block)
            frame = frame.copy()
            frame[r0:r1, c0:c1] = 0.0
            occlusions[i] = (r0, c0, r1, c1)
        frames.append(frame)
    return FailureResult(frames, kept, occlusions)
