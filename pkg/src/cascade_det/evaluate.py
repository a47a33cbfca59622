"""COCO-style evaluation: greedy matching, 101-point AP, stage tables, localization curves."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .assign import best_match
from .geometry import Box, iou_matrix, iou_pairs

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100


@dataclass(frozen=True, eq=False)
class Detection:
    image_id: int
    class_id: int
    box: np.ndarray  # center form
    score: float

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("detection class_id must be >= 1")
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")
        b = np.asarray(self.box.as_array() if isinstance(self.box, Box) else self.box, dtype=float).reshape(4)
        if not (np.all(np.isfinite(b)) and b[2] > 0 and b[3] > 0):
            raise ValueError(f"invalid detection box {b}")
        object.__setattr__(self, "box", b)


@dataclass(frozen=True)
class APReport:
    per_threshold: dict
    mean_ap: float

    @classmethod
    def from_values(cls, per_threshold: Mapping[float, float]) -> "APReport":
        per = {float(k): float(v) for k, v in per_threshold.items()}
        return cls(per, float(np.mean(list(per.values()))) if per else 0.0)

    def ap(self, threshold: float) -> float:
        return self.per_threshold[round(float(threshold), 2)]

    def csv_rows(self):
        rows = [(f"{t:.2f}", f"{a:.6f}") for t, a in sorted(self.per_threshold.items())]
        rows.append(("mean", f"{self.mean_ap:.6f}"))
        return rows


class GTIndex(NamedTuple):
    boxes: dict  # image_id -> (K, 4)
    classes: dict  # image_id -> (K,)


def gt_index(scenes) -> GTIndex:
    return GTIndex({s.image_id: s.gt_boxes for s in scenes}, {s.image_id: s.gt_classes for s in scenes})


def _score_order(dets: Sequence[Detection]) -> np.ndarray:
    scores = np.array([d.score for d in dets], dtype=float)
    return np.lexsort((np.arange(len(dets)), -scores))


def match_detections(dets: Sequence[Detection], gts, iou_t: float) -> np.ndarray:
    """TP flags aligned with ``dets``.

    Per image and class, detections are visited by descending score (ties by
    index); each takes the highest-IoU unmatched gt of its class with IoU >=
    ``iou_t``.
    """
    if not 0 < iou_t <= 1:
        raise ValueError("iou_t must lie in (0, 1]")
    index = gts if isinstance(gts, GTIndex) else gt_index(gts)
    flags = np.zeros(len(dets), dtype=bool)
    groups: dict = {}
    for i in _score_order(dets):
        d = dets[i]
        groups.setdefault((d.image_id, d.class_id), []).append(i)
    for (image_id, class_id), members in groups.items():
        boxes = index.boxes.get(image_id)
        if boxes is None or not len(boxes):
            continue
        gt_sel = np.flatnonzero(index.classes[image_id] == class_id)
        if not len(gt_sel):
            continue
        overlaps = iou_matrix(np.stack([dets[i].box for i in members]), boxes[gt_sel])
        taken = np.zeros(len(gt_sel), dtype=bool)
        for row, i in enumerate(members):
            cand = np.where(taken, -1.0, overlaps[row])
            j = int(np.argmax(cand))
            if cand[j] >= iou_t:
                taken[j] = True
                flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP of TP/FP flags already sorted by score."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt <= 0 or not len(flags):
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    at = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return math.fsum(at) / len(RECALL_GRID)


def _class_ap(dets, index: GTIndex, iou_t: float) -> dict:
    counts: dict = {}
    for classes in index.classes.values():
        for c in classes:
            counts[int(c)] = counts.get(int(c), 0) + 1
    flags = match_detections(dets, index, iou_t)
    order = _score_order(dets)
    out = {}
    for c, n_gt in sorted(counts.items()):
        sel = [i for i in order if dets[i].class_id == c]
        out[c] = average_precision(flags[sel], n_gt)
    return out


def coco_ap(dets: Sequence[Detection], gts, thresholds: Sequence[float] = COCO_THRESHOLDS) -> APReport:
    """AP per threshold, averaged over classes that have ground truth."""
    index = gts if isinstance(gts, GTIndex) else gt_index(gts)
    known = set(index.boxes)
    dets = [d for d in dets if d.image_id in known]
    per = {}
    for t in thresholds:
        by_class = _class_ap(dets, index, t)
        per[round(float(t), 2)] = float(np.mean(list(by_class.values()))) if by_class else 0.0
    return APReport.from_values(per)


# ---------------------------------------------------------------------------
# independent oracle
# ---------------------------------------------------------------------------

ORACLE_MAX_DETECTIONS = 12


def brute_force_ap_oracle(dets: Sequence[Detection], gts, iou_t: float) -> float:
    """Single-class AP by explicit enumeration; shares no code with :func:`average_precision`.

    Matching is redone from scratch with plain loops and the PR table is built
    prefix by prefix. ``gts`` maps image_id to a list of center-form boxes;
    every detection and gt is treated as one class.
    """
    per_image: dict = {}
    for d in dets:
        per_image.setdefault(d.image_id, []).append(d)
    if any(len(v) > ORACLE_MAX_DETECTIONS for v in per_image.values()):
        raise ValueError(f"oracle handles at most {ORACLE_MAX_DETECTIONS} detections per image")

    def overlap(a, b):
        ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
        bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
        iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
        ih = max(0.0, min(ay2, by2) - max(ay1, by1))
        inter = iw * ih
        return inter / (a[2] * a[3] + b[2] * b[3] - inter)

    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    is_tp = []
    for i in ranked:
        d = dets[i]
        best, best_j = -1.0, None
        for j, g in enumerate(gts.get(d.image_id, [])):
            if used[d.image_id][j]:
                continue
            o = overlap(list(d.box), list(g))
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= iou_t:
            used[d.image_id][best_j] = True
            is_tp.append(True)
        else:
            is_tp.append(False)

    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0 or not is_tp:
        return 0.0
    table = []
    for k in range(1, len(is_tp) + 1):
        tp = sum(is_tp[:k])
        table.append((tp / n_gt, tp / k))
    interpolated = []
    for r in range(101):
        level = r / 100
        reachable = [p for rec, p in table if rec >= level]
        interpolated.append(max(reachable) if reachable else 0.0)
    return math.fsum(interpolated) / 101


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def stage_report(model, scenes) -> list[tuple[str, APReport]]:
    """Rows per test stage, then classifier ensembles on stage-2+ boxes."""
    from .cascade import detect

    index = gt_index(scenes)
    if model.mode != "cascade":
        return [(model.mode, coco_ap(detect(model, scenes), index))]
    rows = []
    for t in range(1, model.n_stages + 1):
        rows.append((f"stage{t}", coco_ap(detect(model.truncate(t), scenes), index)))
    for t in range(2, model.n_stages + 1):
        rows.append((f"ensemble1-{t}", coco_ap(detect(model.truncate(t), scenes, ensemble=True), index)))
    return rows


def localization_curve(stage, scenes, feature_config, bin_width: float = 0.05, min_iou: float = 0.0):
    """``(bin_low, bin_high, mean_input_iou, mean_output_iou, count)`` per populated bin.

    Output IoU is measured against the same gt the input box matched.
    """
    from .model import featurize_boxes, regress_boxes

    ins, outs = [], []
    for s in scenes:
        if not len(s.gt_boxes):
            continue
        matched, iou_in = best_match(s.proposals, s.gt_boxes)
        X = featurize_boxes(s.proposals, s, feature_config)
        moved = regress_boxes(stage, s.proposals, X, s.width, s.height)
        ins.append(iou_in)
        outs.append(iou_pairs(moved, s.gt_boxes[matched]))
    if not ins:
        return []
    iou_in = np.concatenate(ins)
    iou_out = np.concatenate(outs)
    keep = iou_in > min_iou
    iou_in, iou_out = iou_in[keep], iou_out[keep]
    n_bins = int(round(1 / bin_width))
    idx = np.minimum((iou_in / bin_width + 1e-9).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            rows.append((b * bin_width, (b + 1) * bin_width, float(iou_in[sel].mean()), float(iou_out[sel].mean()), int(sel.sum())))
    return rows
