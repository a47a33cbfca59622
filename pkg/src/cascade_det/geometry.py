"""Box arithmetic: IoU, delta encoding, normalization, smooth-L1, NMS, clipping.

Boxes are center-form ``(cx, cy, w, h)``. The scalar value types (:class:`Box`,
:class:`Delta`, :class:`NormStats`) wrap the array functions below, which take
``(..., 4)`` float arrays and are what the training pipeline uses directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

# exp(4.135) ~= 62.5; keeps untrained regressors from producing runaway boxes
MAX_LOG_SCALE = 4.135


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive, got {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))

    def to_corner(self) -> list[float]:
        """``[x_min, y_min, w, h]`` (COCO convention)."""
        return [self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h]

    @classmethod
    def from_corner(cls, xywh: Sequence[float]) -> "Box":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x + w / 2, y + h / 2, w, h)


@dataclass(frozen=True)
class Delta:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"delta fields must be finite, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def from_array(cls, a) -> "Delta":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    std: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if len(self.mean) != 4 or len(self.std) != 4:
            raise ValueError("NormStats needs 4-component mean and std")
        if not all(s > 0 for s in self.std):
            raise ValueError(f"every std component must be positive, got {self.std}")

    @classmethod
    def identity(cls) -> "NormStats":
        return cls()


class Decoded(NamedTuple):
    box: Box
    clamped: bool


class Clipped(NamedTuple):
    box: Box | None
    degenerate: bool


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """Center form -> ``(x1, y1, x2, y2)``."""
    boxes = np.asarray(boxes, dtype=float)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def from_corners(xyxy: np.ndarray) -> np.ndarray:
    xyxy = np.asarray(xyxy, dtype=float)
    wh = xyxy[..., 2:] - xyxy[..., :2]
    return np.concatenate([xyxy[..., :2] + wh / 2, wh], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` (N, 4) and ``b`` (K, 4); returns (N, K)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU between equally shaped (N, 4) arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ca, cb = to_corners(a), to_corners(b)
    wh = np.clip(np.minimum(ca[..., 2:], cb[..., 2:]) - np.maximum(ca[..., :2], cb[..., :2]), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def encode(boxes: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Regression target taking ``boxes`` onto ``gts`` (both (N, 4))."""
    b = np.asarray(boxes, dtype=float)
    g = np.asarray(gts, dtype=float)
    return np.stack(
        [
            (g[..., 0] - b[..., 0]) / b[..., 2],
            (g[..., 1] - b[..., 1]) / b[..., 3],
            np.log(g[..., 2] / b[..., 2]),
            np.log(g[..., 3] / b[..., 3]),
        ],
        axis=-1,
    )


def decode(boxes: np.ndarray, deltas: np.ndarray, max_log_scale: float = MAX_LOG_SCALE):
    """Apply ``deltas`` to ``boxes``. Returns ``(new_boxes, clamped_mask)``."""
    b = np.asarray(boxes, dtype=float)
    d = np.asarray(deltas, dtype=float)
    dwh = d[..., 2:]
    clamped = np.any(dwh > max_log_scale, axis=-1)
    dwh = np.minimum(dwh, max_log_scale)
    out = np.stack(
        [
            b[..., 0] + d[..., 0] * b[..., 2],
            b[..., 1] + d[..., 1] * b[..., 3],
            b[..., 2] * np.exp(dwh[..., 0]),
            b[..., 3] * np.exp(dwh[..., 1]),
        ],
        axis=-1,
    )
    return out, clamped


def normalize(deltas: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(deltas, dtype=float) - np.asarray(stats.mean)) / np.asarray(stats.std)


def denormalize(deltas: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(deltas, dtype=float) * np.asarray(stats.std) + np.asarray(stats.mean)


def smooth_l1_elementwise(x: np.ndarray) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=float))
    return np.where(x < 1.0, 0.5 * x * x, x - 0.5)


def clip_boxes(boxes: np.ndarray, width: float, height: float):
    """Intersect boxes with ``[0, width] x [0, height]``.

    Returns ``(clipped, degenerate_mask)``; degenerate rows have zero area and
    hold whatever the clip produced (w or h == 0).
    """
    xyxy = to_corners(boxes)
    xyxy[..., 0::2] = np.clip(xyxy[..., 0::2], 0.0, width)
    xyxy[..., 1::2] = np.clip(xyxy[..., 1::2], 0.0, height)
    out = from_corners(xyxy)
    degenerate = (out[..., 2] <= 0) | (out[..., 3] <= 0)
    return out, degenerate


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box is ``>=
    iou_threshold``. Equal scores keep the lower index first.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        overlaps = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[overlaps < iou_threshold]
    return np.asarray(keep, dtype=int)


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    return float(iou_pairs(a.as_array(), b.as_array()))


def encode_delta(b: Box, g: Box) -> Delta:
    return Delta.from_array(encode(b.as_array(), g.as_array()))


def decode_delta(b: Box, d: Delta, max_log_scale: float = MAX_LOG_SCALE) -> Decoded:
    out, clamped = decode(b.as_array(), d.as_array(), max_log_scale)
    return Decoded(Box.from_array(out), bool(clamped))


def normalize_delta(d: Delta, s: NormStats) -> Delta:
    return Delta.from_array(normalize(d.as_array(), s))


def denormalize_delta(d: Delta, s: NormStats) -> Delta:
    return Delta.from_array(denormalize(d.as_array(), s))


def smooth_l1(d: Delta) -> float:
    return float(smooth_l1_elementwise(d.as_array()).sum())


def nms(detections: Sequence[tuple[Box, float]], iou_threshold: float) -> list[tuple[Box, float]]:
    if not detections:
        if not 0 < iou_threshold <= 1:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
        return []
    boxes = np.stack([b.as_array() for b, _ in detections])
    scores = np.array([s for _, s in detections], dtype=float)
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]


def clip_box(b: Box, width: float, height: float) -> Clipped:
    if width <= 0 or height <= 0:
        raise ValueError("image width and height must be positive")
    out, degenerate = clip_boxes(b.as_array(), width, height)
    if degenerate:
        return Clipped(None, True)
    return Clipped(Box.from_array(out), False)
