"""Register, track, verify and re-register over a scripted frame sequence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import FeatureMap
from .errors import EmptyRoiError, RegistrationFailed
from .fmap import FeatureProvider, grid_of
from .hsfa import HsfaModel, hsfa_forward
from .prompts import PromptSet, binarize, extract_prompts
from .tom import CropFeature, MemoryPool, TomModel, TrackDecision, TrackSession, step

NORMAL, OCCLUDED, DROPPED = "normal", "occluded", "dropped"
EVENTS = (NORMAL, OCCLUDED, DROPPED)


@dataclass(frozen=True)
class FrameEvent:
    kind: str = NORMAL
    region: tuple[int, int, int, int] | None = None  # r0, c0, r1, c1 in token cells, exclusive ends

    def __post_init__(self):
        if self.kind not in EVENTS:
            raise ValueError(f"unknown frame event {self.kind!r}")
        if self.kind == OCCLUDED and self.region is None:
            raise ValueError("an occluded frame needs a region")

    def to_json(self) -> dict:
        out = {"event": self.kind}
        if self.region is not None:
            out["region"] = list(self.region)
        return out


@dataclass
class ScenarioScript:
    frames: list[FrameEvent]
    objects: list[dict] = field(default_factory=list)
    grid: tuple[int, int] = (14, 14)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("scenario has no frames")
        first_failure = next((i for i, f in enumerate(self.frames) if f.kind != NORMAL), None)
        if first_failure == 0:
            raise ValueError("a scenario must start with a normal frame before any failure event")
        h, w = self.grid
        for f in self.frames:
            if f.region is not None:
                r0, c0, r1, c1 = f.region
                if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                    raise ValueError(f"occlusion region {f.region} outside the {h}x{w} grid")

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioScript":
        frames = [
            FrameEvent(f.get("event", NORMAL), tuple(f["region"]) if f.get("region") is not None else None)
            for f in d["frames"]
        ]
        return cls(frames, list(d.get("objects", [])), tuple(d.get("grid", (14, 14))))

    def to_json(self) -> dict:
        return {"grid": list(self.grid), "frames": [f.to_json() for f in self.frames], "objects": self.objects}

    @classmethod
    def load(cls, path) -> "ScenarioScript":
        return cls.from_json(json.loads(Path(path).read_text()))


def linear_scenario(n_frames: int = 16, grid: tuple[int, int] = (14, 20), row: int = 5, archetype: int = 0,
                    view: int = 0, occlusion: tuple[int, int] | None = (6, 9), drops: tuple[int, ...] = ()):
    """Target sliding one cell right per frame; ``occlusion`` is a ``[start, end)`` frame window
    during which a band covering the target's row span is zeroed."""
    traj = [[row, k] for k in range(n_frames)]
    if traj[-1][1] + 4 > grid[1]:
        raise ValueError("trajectory leaves the frame")
    frames = []
    for k in range(n_frames):
        if k in drops:
            frames.append(FrameEvent(DROPPED))
        elif occlusion is not None and occlusion[0] <= k < occlusion[1]:
            frames.append(FrameEvent(OCCLUDED, (max(row - 2, 0), 0, min(row + 6, grid[0]), grid[1])))
        else:
            frames.append(FrameEvent(NORMAL))
    return ScenarioScript(frames, [{"archetype": archetype, "view": view, "trajectory": traj}], grid)


def apply_event(fm: FeatureMap, event: FrameEvent) -> FeatureMap:
    if event.kind != OCCLUDED:
        return fm
    grid = grid_of(fm).copy()
    r0, c0, r1, c1 = event.region
    grid[r0:r1, c0:c1] = 0.0
    return FeatureMap(grid.reshape(fm.patches, fm.channels), fm.grid_h, fm.grid_w)


# --------------------------------------------------------------- registration


@dataclass
class Registration:
    heatmap: np.ndarray
    prompts: PromptSet
    crop: CropFeature
    origin: tuple[int, int]  # top-left token cell of the crop window


def crop_window(grid: np.ndarray, top: int, left: int, g: int) -> np.ndarray:
    """``g x g`` window at ``(top, left)``; cells outside the frame read as zero."""
    h, w, c = grid.shape
    out = np.zeros((g, g, c), dtype=grid.dtype)
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + g, h), min(left + g, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top : r1 - top, c0 - left : c1 - left] = grid[r0:r1, c0:c1]
    return out


def crop_origin(center, scale: int, g: int, grid_hw: tuple[int, int]) -> tuple[int, int]:
    """Top-left cell of the ``g x g`` token window centred on a heatmap-pixel centroid."""
    out = []
    for coord, n in zip(center, grid_hw):
        token = (Fraction(coord) + Fraction(1, 2)) / scale - Fraction(1, 2)
        start = math.floor(token - Fraction(g - 1, 2) + Fraction(1, 2))
        out.append(min(max(start, 0), max(n - g, 0)))
    return out[0], out[1]


def run_registration(provider: FeatureProvider, hsfa_model: HsfaModel, frame: FeatureMap, frame_index: int = -1,
                     threshold: float = 0.5, text=None, object_id=None) -> Registration:
    """Heatmap -> binarize -> prompts -> crop around the ROI centre.

    Raises :class:`RegistrationFailed` when the heatmap has no cell above
    ``threshold``; the caller retries on a later frame.
    """
    heat = hsfa_forward(hsfa_model, frame, provider.references(), text)
    try:
        prompts = extract_prompts(binarize(heat, threshold))
    except EmptyRoiError as exc:
        raise RegistrationFailed(f"empty ROI on frame {frame_index}") from exc
    g = provider.crop_grid
    top, left = crop_origin(prompts.center, hsfa_model.config.scale, g, (frame.grid_h, frame.grid_w))
    window = crop_window(grid_of(frame), top, left, g)
    crop = CropFeature(provider.encode_crop(window), frame_index, object_id)
    return Registration(heat, prompts, crop, (top, left))


# ------------------------------------------------------------------- tracking


class LocalTracker:
    """Frame-to-frame tracker searching a small neighbourhood of the last position.

    Stands in for the pose tracker: it follows whatever window looks most
    like the newest memory-pool crop, so it drifts when the target vanishes
    and cannot catch a target that has moved beyond its search radius.
    """

    def __init__(self, origin: tuple[int, int], search_radius: int = 1):
        self.position = origin
        r = search_radius
        offsets = [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1)]
        # ties resolve toward staying put
        self.offsets = sorted(offsets, key=lambda o: (abs(o[0]) + abs(o[1]), o))

    def update(self, grid: np.ndarray, reference: np.ndarray, provider: FeatureProvider) -> tuple[int, int]:
        g = provider.crop_grid
        h, w = grid.shape[:2]
        best, best_d = self.position, math.inf
        for dr, dc in self.offsets:
            top = min(max(self.position[0] + dr, 0), h - g)
            left = min(max(self.position[1] + dc, 0), w - g)
            d = float(np.sum((provider.encode_crop(crop_window(grid, top, left, g)) - reference) ** 2))
            if d < best_d:
                best, best_d = (top, left), d
        self.position = best
        return best


def box_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """IoU of two cell boxes ``(r0, c0, r1, c1)`` with exclusive ends."""
    inter_h = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_w = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_h * inter_w
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


@dataclass
class TrackingRun:
    session: TrackSession
    tracker: LocalTracker | None
    log: list[dict]

    def write_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log))


def _record(k: int, event: FrameEvent, session: TrackSession, provider, tracker) -> dict:
    rec = {"frame": k, "event": event.kind, "state": session.state.value if session.state else None,
           "score": None, "decision": None, "registration": None, "box": None, "gt_box": None, "overlap": None}
    target_box = getattr(provider, "target_box", None)
    if target_box is not None:
        rec["gt_box"] = list(target_box(k))
    if tracker is not None:
        g = provider.crop_grid
        box = (tracker.position[0], tracker.position[1], tracker.position[0] + g, tracker.position[1] + g)
        rec["box"] = list(box)
        if rec["gt_box"] is not None:
            rec["overlap"] = box_iou(box, tuple(rec["gt_box"]))
    return rec


def run_tracking(session: TrackSession, tom_model: TomModel, scenario: ScenarioScript, provider: FeatureProvider,
                 hsfa_model: HsfaModel, start: int = 0, tracker: LocalTracker | None = None,
                 search_radius: int = 1, text=None) -> TrackingRun:
    """Per frame: track, crop, verify against the pool, and re-register on failure.

    If the session has not been registered yet, frames are spent on
    registration attempts until one succeeds. Returns the session, tracker
    and one log record per frame.
    """
    log = []
    for k in range(start, len(scenario.frames)):
        event = scenario.frames[k]
        if event.kind == DROPPED:
            log.append(_record(k, event, session, provider, tracker))
            continue
        fm = apply_event(provider.frame(k), event)
        reg_status = None
        if session.state is None:
            try:
                reg = run_registration(provider, hsfa_model, fm, k, text=text)
            except RegistrationFailed:
                reg_status = "failed"
            else:
                session.register(reg.crop)
                tracker = LocalTracker(reg.origin, search_radius)
                reg_status = "ok"
            rec = _record(k, event, session, provider, tracker)
            rec["registration"] = reg_status
            log.append(rec)
            continue

        grid = grid_of(fm)
        tracker.update(grid, session.pool.entries[-1].data, provider)
        window = crop_window(grid, tracker.position[0], tracker.position[1], provider.crop_grid)
        crop = CropFeature(provider.encode_crop(window), k)
        decision = step(session, tom_model, crop)
        if decision is TrackDecision.REREGISTER:
            try:
                reg = run_registration(provider, hsfa_model, fm, k, text=text)
            except RegistrationFailed:
                reg_status = "failed"
            else:
                session.register(reg.crop)
                tracker.position = reg.origin
                reg_status = "ok"
        rec = _record(k, event, session, provider, tracker)
        rec.update(score=session.score_history[-1], decision=decision.value, registration=reg_status)
        log.append(rec)
    return TrackingRun(session, tracker, log)


def run_scenario(scenario: ScenarioScript, provider: FeatureProvider, hsfa_model: HsfaModel, tom_model: TomModel,
                 threshold: float = 0.5, capacity: int = 8, search_radius: int = 1, text=None) -> TrackingRun:
    """Fresh session over the whole script: register on the first usable frame, then track."""
    session = TrackSession(threshold=threshold, pool=MemoryPool(capacity))
    return run_tracking(session, tom_model, scenario, provider, hsfa_model, search_radius=search_radius, text=text)
