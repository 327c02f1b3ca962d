"""Seeded synthetic feature worlds standing in for a frozen image encoder.

An object archetype is a ``g x g`` grid of part embeddings sharing a
per-object signature; a viewpoint is a quarter-turn of that grid. Frames
are background token fields with objects pasted in. Crops are re-encoded
windows: the window's appearance tokens plus a fixed positional embedding
of the crop grid, the way a ViT encoder would see a cropped image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import FeatureMap


@dataclass
class WorldConfig:
    seed: int = 0
    channels: int = 32
    n_objects: int = 2
    part_grid: int = 4
    signature_scale: float = 1.0
    part_scale: float = 1.0
    background_scale: float = 0.0
    background_noise: float = 0.3
    token_noise: float = 0.6
    position_scale: float = 3.0


@dataclass
class Placement:
    archetype: int
    top: int
    left: int
    view: int = 0


class SyntheticWorld:
    def __init__(self, config: WorldConfig = WorldConfig()):
        self.config = config
        rng = np.random.default_rng([config.seed, 0x57])
        c, g = config.channels, config.part_grid
        self.signatures = config.signature_scale * rng.standard_normal((config.n_objects, c))
        self.parts = self.signatures[:, None, None, :] + config.part_scale * rng.standard_normal(
            (config.n_objects, g, g, c)
        )
        self.background = config.background_scale * rng.standard_normal(c)
        self.text = rng.standard_normal((config.n_objects, 16))
        self.position = config.position_scale * positional_embedding(g, g, c)

    @property
    def channels(self) -> int:
        return self.config.channels

    @property
    def part_grid(self) -> int:
        return self.config.part_grid

    def object_tokens(self, archetype: int, view: int, rng: np.random.Generator) -> np.ndarray:
        """``g x g x C`` appearance of an archetype under a quarter-turn viewpoint."""
        grid = np.rot90(self.parts[archetype], k=view % 4, axes=(0, 1))
        return grid + self.config.token_noise * rng.standard_normal(grid.shape)

    def background_tokens(self, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
        h, w = shape
        return self.background + self.config.background_noise * rng.standard_normal((h, w, self.channels))

    def frame(self, h: int, w: int, placements: list[Placement], rng: np.random.Generator):
        """A ``h x w`` token grid with objects pasted in; returns (grid, per-object masks)."""
        grid = self.background_tokens((h, w), rng)
        g = self.part_grid
        masks = []
        for p in placements:
            if not (0 <= p.top <= h - g and 0 <= p.left <= w - g):
                raise ValueError(f"placement {p} does not fit a {h}x{w} frame")
            grid[p.top : p.top + g, p.left : p.left + g] = self.object_tokens(p.archetype, p.view, rng)
            m = np.zeros((h, w), dtype=bool)
            m[p.top : p.top + g, p.left : p.left + g] = True
            masks.append(m)
        return grid, masks

    def reference_views(self, archetype: int, m: int, rng: np.random.Generator, side: int = 7) -> list[np.ndarray]:
        """``m`` background-framed views of one archetype, cycling through viewpoints."""
        g = self.part_grid
        off = (side - g) // 2
        return [
            self.frame(side, side, [Placement(archetype, off, off, view=k)], rng)[0]
            for k in range(m)
        ]

    def encode_crop(self, grid: np.ndarray) -> np.ndarray:
        """Re-encode a ``g x g x C`` appearance window into ``P x C`` crop tokens."""
        return (grid + self.position).reshape(-1, self.channels)

    def crop_window(self, frame: np.ndarray, top: int, left: int) -> np.ndarray:
        """Appearance window at ``(top, left)``; out-of-frame cells read as zero."""
        g = self.part_grid
        h, w, c = frame.shape
        out = np.zeros((g, g, c), dtype=frame.dtype)
        r0, c0 = max(top, 0), max(left, 0)
        r1, c1 = min(top + g, h), min(left + g, w)
        if r0 < r1 and c0 < c1:
            out[r0 - top : r1 - top, c0 - left : c1 - left] = frame[r0:r1, c0:c1]
        return out


def positional_embedding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, ``h x w x c``."""
    quarter = max(c // 4, 1)
    freqs = 1.0 / (4.0 ** (np.arange(quarter) / quarter))
    rows = np.arange(h)[:, None] * freqs[None, :] * np.pi / 2
    cols = np.arange(w)[:, None] * freqs[None, :] * np.pi / 2
    emb = np.zeros((h, w, c))
    blocks = [np.sin(rows)[:, None, :], np.cos(rows)[:, None, :], np.sin(cols)[None, :, :], np.cos(cols)[None, :, :]]
    start = 0
    for b in blocks:
        n = min(quarter, c - start)
        if n <= 0:
            break
        emb[:, :, start : start + n] = np.broadcast_to(b[..., :n], (h, w, n))
        start += n
    return emb


# ------------------------------------------------------------ segmentation toy


@dataclass
class SegmentationSample:
    query: np.ndarray  # P x C
    refs: list[np.ndarray]  # m x (P_r x C)
    text: np.ndarray  # d
    mask: np.ndarray  # token-level boolean grid
    target: int
    present: bool


def segmentation_sample(world: SyntheticWorld, rng: np.random.Generator, grid: int = 14, views: int = 4,
                        absent_prob: float = 0.1, erase_prob: float = 0.0) -> SegmentationSample:
    """Query frame holding the target and a distractor archetype; references show the target.

    With probability ``absent_prob`` only the distractor is present and the
    ground-truth mask is empty. With probability ``erase_prob`` a random
    rectangle of tokens is zeroed and the mask keeps only the visible target
    cells.
    """
    n_obj = world.config.n_objects
    if n_obj < 2:
        raise ValueError("segmentation samples need at least two archetypes")
    target = int(rng.integers(n_obj))
    distractor = int((target + 1 + rng.integers(n_obj - 1)) % n_obj)
    present = rng.random() >= absent_prob
    g = world.part_grid
    placements = []
    occupied = np.zeros((grid, grid), dtype=bool)
    for k in ([target] if present else []) + [distractor]:
        for _ in range(100):
            top, left = (int(v) for v in rng.integers(0, grid - g + 1, size=2))
            if not occupied[max(top - 1, 0) : top + g + 1, max(left - 1, 0) : left + g + 1].any():
                break
        occupied[top : top + g, left : left + g] = True
        placements.append(Placement(k, top, left, view=int(rng.integers(4))))
    frame, masks = world.frame(grid, grid, placements, rng)
    mask = masks[0] if present else np.zeros((grid, grid), dtype=bool)
    if erase_prob > 0 and rng.random() < erase_prob:
        bh, bw = (int(v) for v in rng.integers(2, grid + 1, size=2))
        r0, c0 = int(rng.integers(0, grid - bh + 1)), int(rng.integers(0, grid - bw + 1))
        frame[r0 : r0 + bh, c0 : c0 + bw] = 0.0
        mask = mask.copy()
        mask[r0 : r0 + bh, c0 : c0 + bw] = False
    refs = [v.reshape(-1, world.channels) for v in world.reference_views(target, views, rng)]
    return SegmentationSample(frame.reshape(-1, world.channels), refs, world.text[target], mask, target, present)


def upsample_mask(mask: np.ndarray, s: int) -> np.ndarray:
    return np.kron(mask.astype(np.uint8), np.ones((s, s), dtype=np.uint8)).astype(bool)


def as_feature_map(tokens: np.ndarray, h: int, w: int) -> FeatureMap:
    return FeatureMap(tokens.reshape(h * w, -1), h, w)
