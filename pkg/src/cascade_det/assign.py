"""IoU-threshold labeling, minibatch sampling, per-stage delta statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import Box, Delta, NormStats, encode, iou_matrix

FG_FRACTION = 0.25
STD_FLOOR = 1e-4


class InsufficientPositivesError(ValueError):
    """Too few positives at a threshold to estimate statistics or train."""


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1 (0 is background), got {self.class_id}")


@dataclass(frozen=True)
class LabeledSample:
    box: Box
    label: int
    iou: float
    matched_gt: int | None = None
    target: Delta | None = None

    def __post_init__(self):
        positive = self.label > 0
        if positive != (self.matched_gt is not None) or positive != (self.target is not None):
            raise ValueError("label > 0 must coincide with matched_gt and target being set")


class Labels(NamedTuple):
    """Array form of a labeled box set.

    ``matched`` is the argmax-IoU gt index (-1 when there are no gts) and is
    kept for negatives too; ``targets`` is NaN on negative rows.
    """

    labels: np.ndarray
    ious: np.ndarray
    matched: np.ndarray
    targets: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


def best_match(boxes: np.ndarray, gt_boxes: np.ndarray):
    """Argmax-IoU gt per box; ties go to the lowest gt index."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.full(len(boxes), -1), np.zeros(len(boxes))
    overlaps = iou_matrix(boxes, gt_boxes)
    matched = overlaps.argmax(axis=1)
    return matched, overlaps[np.arange(len(boxes)), matched]


def label_boxes(boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray, u: float) -> Labels:
    if not 0 < u < 1:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {u}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    matched, ious = best_match(boxes, gt_boxes)
    labels = np.zeros(len(boxes), dtype=int)
    targets = np.full((len(boxes), 4), np.nan)
    if len(gt_boxes):
        pos = ious >= u
        labels[pos] = np.asarray(gt_classes)[matched[pos]]
        targets[pos] = encode(boxes[pos], np.asarray(gt_boxes, dtype=float)[matched[pos]])
    return Labels(labels, ious, matched, targets)


def match_and_label(proposals: Sequence[Box], gts: Sequence[GroundTruth], u: float) -> list[LabeledSample]:
    boxes = np.array([b.as_array() for b in proposals]).reshape(-1, 4)
    gt_boxes = np.array([g.box.as_array() for g in gts]).reshape(-1, 4)
    gt_classes = np.array([g.class_id for g in gts], dtype=int)
    lab = label_boxes(boxes, gt_boxes, gt_classes, u)
    out = []
    for i, box in enumerate(proposals):
        if lab.labels[i] > 0:
            out.append(
                LabeledSample(box, int(lab.labels[i]), float(lab.ious[i]), int(lab.matched[i]), Delta.from_array(lab.targets[i]))
            )
        else:
            out.append(LabeledSample(box, 0, float(lab.ious[i])))
    return out


def sample_indices(labels: np.ndarray, batch_size: int, fg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Fixed-fraction fg/bg sampling without replacement; returns sorted indices."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0 < fg_fraction < 1:
        raise ValueError("fg_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(batch_size * fg_fraction))
    n_bg = min(len(bg), batch_size - n_fg)
    if n_fg < len(fg):
        fg = rng.choice(fg, size=n_fg, replace=False)
    if n_bg < len(bg):
        bg = rng.choice(bg, size=n_bg, replace=False)
    return np.sort(np.concatenate([fg, bg]).astype(int))


def sample_minibatch(
    samples: Sequence[LabeledSample],
    batch_size: int,
    fg_fraction: float = FG_FRACTION,
    rng: np.random.Generator | None = None,
) -> list[LabeledSample]:
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.array([s.label for s in samples], dtype=int)
    return [samples[i] for i in sample_indices(labels, batch_size, fg_fraction, rng)]


def stats_from_targets(targets: np.ndarray, ious: np.ndarray, u: float) -> NormStats:
    """Population mean/std of raw targets with ``iou >= u``; the rest are outliers."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 4)
    keep = (np.asarray(ious) >= u) & np.all(np.isfinite(targets), axis=1)
    if keep.sum() < 2:
        raise InsufficientPositivesError(f"need at least 2 positives with IoU >= {u}, found {int(keep.sum())}")
    t = targets[keep]
    return NormStats(tuple(t.mean(axis=0)), tuple(np.maximum(t.std(axis=0), STD_FLOOR)))


def compute_stats(samples: Sequence[LabeledSample], u: float) -> NormStats:
    pos = [s for s in samples if s.label > 0]
    targets = np.array([s.target.as_array() for s in pos]).reshape(-1, 4)
    ious = np.array([s.iou for s in pos])
    return stats_from_targets(targets, ious, u)


class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    fractions: dict[float, float]  # threshold -> percent of samples with iou >= threshold

    def rows(self):
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def histogram_from_ious(ious: np.ndarray, bin_width: float, thresholds: Sequence[float] = ()) -> Histogram:
    if not 0 < bin_width <= 1:
        raise ValueError("bin_width must lie in (0, 1]")
    ious = np.asarray(ious, dtype=float)
    n_bins = int(round(1.0 / bin_width))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # IoU 1.0 falls in the top bin
    idx = np.minimum((ious / bin_width + 1e-9).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    fractions = {}
    for t in thresholds:
        fractions[float(t)] = 100.0 * float(np.mean(ious >= t - 1e-12)) if len(ious) else 0.0
    return Histogram(edges, counts, fractions)


def iou_histogram(samples: Sequence[LabeledSample], bin_width: float, thresholds: Sequence[float] = ()) -> Histogram:
    return histogram_from_ious(np.array([s.iou for s in samples]), bin_width, thresholds)
