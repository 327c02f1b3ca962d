"""Training loops and evaluation for the segmentation stack and the verifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .hsfa import HsfaConfig, HsfaModel
from .losses import bce_with_logits, roi_loss
from .optim import LossTrace, TrainConfig, train
from .synthetic import SegmentationSample, SyntheticWorld, segmentation_sample, upsample_mask
from .tape import Tape
from .tom import cosine_scores

log = logging.getLogger(__name__)


@dataclass
class SegBatch:
    query: np.ndarray  # B x P x C
    refs: list[np.ndarray]  # m x (B x P_r x C)
    text: np.ndarray | None  # B x d
    masks: np.ndarray  # B x H x W (heatmap resolution)
    grid: tuple[int, int]


def stack_samples(samples: list[SegmentationSample], scale: int, grid: int, use_text: bool, dtype) -> SegBatch:
    m = len(samples[0].refs)
    return SegBatch(
        np.stack([s.query for s in samples]).astype(dtype),
        [np.stack([s.refs[i] for s in samples]).astype(dtype) for i in range(m)],
        np.stack([s.text for s in samples]).astype(dtype) if use_text else None,
        np.stack([upsample_mask(s.mask, scale) for s in samples]).astype(dtype),
        (grid, grid),
    )


def segmentation_batches(world: SyntheticWorld, config: HsfaConfig, batch: int, seed: int, grid: int = 14,
                         use_text: bool = False, dtype=np.float32, erase_prob: float = 0.0,
                         absent_prob: float = 0.1) -> Iterator[SegBatch]:
    rng = np.random.default_rng([seed, 0x5E6])
    while True:
        samples = [segmentation_sample(world, rng, grid, config.view_count, absent_prob, erase_prob)
                   for _ in range(batch)]
        yield stack_samples(samples, config.scale, grid, use_text, dtype)


def hsfa_loss_fn(model: HsfaModel, preset: str = "main"):
    def loss_fn(params, batch: SegBatch):
        model.params = params
        tape = Tape(dtype=model.dtype)
        heat = model.forward_tape(tape, batch.query, batch.refs, batch.text, batch.grid)
        value, grad = roi_loss(heat.data, batch.masks, preset)
        grads = tape.backward(heat, grad)
        return value, {k: grads[k].astype(params[k].dtype) for k in params}

    return loss_fn


def train_hsfa(model: HsfaModel, world: SyntheticWorld, config: TrainConfig, grid: int = 14,
               use_text: bool = False, on_step=None, erase_prob: float = 0.0,
               absent_prob: float = 0.1) -> LossTrace:
    batches = segmentation_batches(world, model.config, config.batch, config.seed, grid, use_text, model.dtype,
                                   erase_prob, absent_prob)
    return train(model.params, batches, hsfa_loss_fn(model, config.loss_preset), config, on_step)


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def predict_heatmaps(model: HsfaModel, batch: SegBatch) -> np.ndarray:
    tape = Tape(dtype=model.dtype)
    return model.forward_tape(tape, batch.query, batch.refs, batch.text, batch.grid).data


def evaluate_hsfa(model: HsfaModel, world: SyntheticWorld, n: int = 64, seed: int = 10_000, grid: int = 14,
                  use_text: bool = False, threshold: float = 0.5, present_only: bool = True) -> float:
    """Mean heatmap IoU over held-out scenes (scenes with the target present by default)."""
    rng = np.random.default_rng([seed, 0xE7A])
    samples = []
    while len(samples) < n:
        s = segmentation_sample(world, rng, grid, model.config.view_count)
        if s.present or not present_only:
            samples.append(s)
    ious = []
    for start in range(0, n, 16):
        chunk = samples[start : start + 16]
        batch = stack_samples(chunk, model.config.scale, grid, use_text, model.dtype)
        heat = predict_heatmaps(model, batch)
        ious.extend(mask_iou(h >= threshold, m > 0.5) for h, m in zip(heat, batch.masks))
    return float(np.mean(ious))


# ------------------------------------------------------------------- verifier


def tom_batches(ds, batch: int, seed: int):
    """Shuffled minibatches, reshuffled every epoch."""
    rng = np.random.default_rng([seed, 0x70B])
    n = len(ds)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            yield ds.cand[idx], ds.ref[idx], ds.labels[idx].astype(np.float64)


def tom_loss_fn(model):
    def loss_fn(params, batch):
        model.params = params
        cand, ref, y = batch
        tape = Tape(dtype=model.dtype)
        z = model.logits_tape(tape, cand, ref)
        value, grad = bce_with_logits(z.data.astype(np.float64), y)
        grads = tape.backward(z, grad)
        return value, {k: grads[k].astype(params[k].dtype) for k in params}

    return loss_fn


def train_tom(model, ds, config: TrainConfig, on_step=None) -> LossTrace:
    return train(model.params, tom_batches(ds, config.batch, config.seed), tom_loss_fn(model), config, on_step)


def tom_accuracy(model, ds, chunk: int = 1024) -> float:
    correct = 0
    for start in range(0, len(ds), chunk):
        z = model.logits(ds.cand[start : start + chunk], ds.ref[start : start + chunk])
        correct += int(np.sum((z >= 0) == (ds.labels[start : start + chunk] == 1)))
    return correct / len(ds)


def fit_cosine_threshold(ds) -> float:
    """Threshold on mean-pooled cosine maximizing accuracy on ``ds``."""
    s = cosine_scores(ds.cand.astype(np.float64), ds.ref.astype(np.float64))
    y = ds.labels == 1
    order = np.argsort(s)
    s_sorted, y_sorted = s[order], y[order]
    # predicting positive for s >= s_sorted[i]: negatives below i are correct, positives at/after i are correct
    neg_below = np.concatenate([[0], np.cumsum(~y_sorted)])
    pos_above = np.concatenate([np.cumsum(y_sorted[::-1])[::-1], [0]])
    acc = neg_below + pos_above
    best = int(np.argmax(acc))
    if best == len(s):
        return float(s_sorted[-1]) + 1.0
    return float(s_sorted[best])


def cosine_accuracy(ds, threshold: float) -> float:
    s = cosine_scores(ds.cand.astype(np.float64), ds.ref.astype(np.float64))
    return float(np.mean((s >= threshold) == (ds.labels == 1)))
