"""Feature-map files and the providers that hand feature maps to the pipeline.

File layout (little-endian): ``b"FMAP"``, u16 version, u32 P, u32 C,
u32 grid_h, u32 grid_w, then ``P * C`` float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .attention import FeatureMap
from .synthetic import Placement, SyntheticWorld, positional_embedding

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


def encode_fmap(fm: FeatureMap) -> bytes:
    header = _HEADER.pack(FMAP_MAGIC, FMAP_VERSION, fm.patches, fm.channels, fm.grid_h, fm.grid_w)
    return header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes()


def decode_fmap(raw: bytes, name: str = "<bytes>") -> FeatureMap:
    if len(raw) < _HEADER.size or raw[:4] != FMAP_MAGIC:
        raise ValueError(f"{name}: not a feature-map file")
    _, version, p, c, gh, gw = _HEADER.unpack_from(raw)
    if version != FMAP_VERSION:
        raise ValueError(f"{name}: unsupported feature-map version {version}")
    if len(raw) != _HEADER.size + 4 * p * c:
        raise ValueError(f"{name}: expected {p}x{c} float32 values")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(p, c).astype(np.float32)
    return FeatureMap(data, gh, gw)


def write_fmap(fm: FeatureMap, path) -> None:
    Path(path).write_bytes(encode_fmap(fm))


def read_fmap(path) -> FeatureMap:
    return decode_fmap(Path(path).read_bytes(), str(path))


def grid_of(fm: FeatureMap) -> np.ndarray:
    """``grid_h x grid_w x C`` view of a feature map."""
    return np.asarray(fm.data).reshape(fm.grid_h, fm.grid_w, fm.channels)


class FeatureProvider:
    """Source of query frames, reference views and crop re-encodings.

    ``frame(k)`` and ``references()`` always return maps with ``channels``
    channels; ``encode_crop`` turns a ``g x g x C`` appearance window into
    ``g*g x C`` crop tokens.
    """

    kind = "abstract"
    channels: int
    crop_grid: int

    def frame(self, index: int) -> FeatureMap:
        raise NotImplementedError

    def references(self) -> list[FeatureMap]:
        raise NotImplementedError

    def encode_crop(self, window: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, fm: FeatureMap) -> FeatureMap:
        if fm.channels != self.channels:
            raise ValueError(f"provider declared {self.channels} channels, got {fm.channels}")
        return fm


class SyntheticProvider(FeatureProvider):
    """Frames rendered from a synthetic world along scripted object trajectories.

    ``objects`` holds dicts ``{archetype, view, trajectory: [[top, left], ...]}``;
    the first entry is the tracked target. Frame ``k`` is rendered with an
    rng derived from ``(seed, k)``, so any frame can be regenerated alone.
    """

    kind = "synthetic"

    def __init__(self, world: SyntheticWorld, objects: list[dict], grid: tuple[int, int], seed: int = 0,
                 view_count: int = 4):
        if not objects:
            raise ValueError("a synthetic provider needs at least one object")
        self.world = world
        self.objects = objects
        self.grid = grid
        self.seed = seed
        self.view_count = view_count
        self.channels = world.channels
        self.crop_grid = world.part_grid

    def placements(self, index: int) -> list[Placement]:
        out = []
        for obj in self.objects:
            traj = obj["trajectory"]
            top, left = traj[min(index, len(traj) - 1)]
            out.append(Placement(int(obj["archetype"]), int(top), int(left), int(obj.get("view", 0))))
        return out

    def target_box(self, index: int) -> tuple[int, int, int, int]:
        p = self.placements(index)[0]
        g = self.crop_grid
        return p.top, p.left, p.top + g, p.left + g

    def frame(self, index: int) -> FeatureMap:
        rng = np.random.default_rng([self.seed, 0xF4, index])
        h, w = self.grid
        grid, _ = self.world.frame(h, w, self.placements(index), rng)
        return self._check(FeatureMap(grid.reshape(h * w, -1), h, w))

    def references(self) -> list[FeatureMap]:
        rng = np.random.default_rng([self.seed, 0x4EF])
        views = self.world.reference_views(int(self.objects[0]["archetype"]), self.view_count, rng)
        return [self._check(FeatureMap(v.reshape(-1, self.channels), v.shape[0], v.shape[1])) for v in views]

    def encode_crop(self, window: np.ndarray) -> np.ndarray:
        return self.world.encode_crop(window)


class FileBackedProvider(FeatureProvider):
    """Feature maps precomputed elsewhere and stored as FMAP files."""

    kind = "file"

    def __init__(self, frame_paths: list, reference_paths: list, crop_grid: int = 4, position_scale: float = 3.0):
        if not frame_paths or not reference_paths:
            raise ValueError("file-backed provider needs frame and reference files")
        self.frame_paths = [Path(p) for p in frame_paths]
        self.reference_paths = [Path(p) for p in reference_paths]
        self.crop_grid = crop_grid
        self.channels = read_fmap(self.reference_paths[0]).channels
        self.position = position_scale * positional_embedding(crop_grid, crop_grid, self.channels)

    def frame(self, index: int) -> FeatureMap:
        if not 0 <= index < len(self.frame_paths):
            raise IndexError(f"frame {index} out of range")
        return self._check(read_fmap(self.frame_paths[index]))

    def references(self) -> list[FeatureMap]:
        return [self._check(read_fmap(p)) for p in self.reference_paths]

    def encode_crop(self, window: np.ndarray) -> np.ndarray:
        return (window + self.position).reshape(-1, self.channels)
