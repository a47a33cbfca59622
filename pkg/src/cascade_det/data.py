"""Synthetic scenes standing in for images plus an RPN, and their JSON-lines format."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .assign import GroundTruth
from .geometry import Box, clip_boxes, from_corners, iou_matrix, to_corners

log = logging.getLogger(__name__)

# generated coordinates live on this grid so corner/center conversion is exact
GRID = 1.0 / 256
BACKGROUND_MAX_IOU = 0.3
MAX_REJECTIONS = 1000


class DataError(ValueError):
    """Malformed or inconsistent dataset/model input."""


@dataclass(frozen=True, eq=False)
class Scene:
    image_id: int
    width: float
    height: float
    gt_boxes: np.ndarray  # (K, 4) center form
    gt_classes: np.ndarray  # (K,)
    proposals: np.ndarray  # (P, 4) center form

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene width and height must be positive")
        object.__setattr__(self, "gt_boxes", np.asarray(self.gt_boxes, dtype=float).reshape(-1, 4))
        object.__setattr__(self, "gt_classes", np.asarray(self.gt_classes, dtype=int).reshape(-1))
        object.__setattr__(self, "proposals", np.asarray(self.proposals, dtype=float).reshape(-1, 4))
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("gt_boxes and gt_classes differ in length")

    @property
    def gts(self) -> list[GroundTruth]:
        return [GroundTruth(Box.from_array(b), int(c)) for b, c in zip(self.gt_boxes, self.gt_classes)]

    @property
    def proposal_boxes(self) -> list[Box]:
        return [Box.from_array(b) for b in self.proposals]

    def with_proposals(self, proposals: np.ndarray) -> "Scene":
        return Scene(self.image_id, self.width, self.height, self.gt_boxes, self.gt_classes, proposals)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.gt_boxes, other.gt_boxes)
            and np.array_equal(self.gt_classes, other.gt_classes)
            and np.array_equal(self.proposals, other.proposals)
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetConfig:
    n_images: int = 500
    n_classes: int = 3
    gts_per_image: tuple[int, int] = (1, 4)
    proposals_per_gt: int = 16
    jitter_center_std: float = 0.35
    jitter_logsize_std: float = 0.30
    background_per_image: int = 16
    seed: int = 42
    image_width: float = 640.0
    image_height: float = 480.0
    min_size: float = 32.0
    max_size: float = 256.0
    aspect_spread: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "gts_per_image", tuple(int(v) for v in self.gts_per_image))
        lo, hi = self.gts_per_image
        counts = (self.n_images, self.n_classes, lo, self.proposals_per_gt, self.background_per_image)
        if min(counts) < 0 or hi < lo:
            raise ValueError(f"invalid counts in dataset config: {self}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.jitter_center_std < 0 or self.jitter_logsize_std < 0:
            raise ValueError("jitter stds must be >= 0")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("need 0 < min_size <= max_size")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            log.warning("ignoring unknown dataset config fields: %s", sorted(extra))
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gts_per_image"] = list(self.gts_per_image)
        return d

    def class_aspect(self, class_id: int) -> float:
        """Mean log(w/h) of a class; classes are told apart by shape."""
        if self.n_classes == 1:
            return 0.0
        return -self.aspect_spread + 2 * self.aspect_spread * (class_id - 1) / (self.n_classes - 1)


def _snap(v):
    return np.round(np.asarray(v, dtype=float) / GRID) * GRID


def _snap_inside(box: np.ndarray, W: float, H: float) -> np.ndarray:
    """Grid-snap a box that lies inside the image without letting it poke out."""
    snapped = _snap(box)
    x1, y1, x2, y2 = to_corners(snapped)
    if x1 >= 0 and y1 >= 0 and x2 <= W and y2 <= H:
        return snapped
    # rounding pushed a border box outside; snap its corners inward instead
    c = to_corners(box)
    lo = np.ceil(c[:2] / GRID) * GRID
    hi = np.floor(c[2:] / GRID) * GRID
    return from_corners(np.r_[np.maximum(lo, 0), np.minimum(hi, [W, H])])


def _sample_gt(rng: np.random.Generator, cfg: DatasetConfig):
    W, H = cfg.image_width, cfg.image_height
    for _ in range(MAX_REJECTIONS):
        cls = int(rng.integers(1, cfg.n_classes + 1))
        size = math.exp(rng.uniform(math.log(cfg.min_size), math.log(cfg.max_size)))
        aspect = cfg.class_aspect(cls) + rng.uniform(-0.1, 0.1)
        w = float(_snap(size * math.exp(aspect / 2)))
        h = float(_snap(size * math.exp(-aspect / 2)))
        if w >= W or h >= H or w <= 0 or h <= 0:
            continue
        cx = float(_snap(rng.uniform(w / 2, W - w / 2)))
        cy = float(_snap(rng.uniform(h / 2, H - h / 2)))
        if cx - w / 2 < 0 or cx + w / 2 > W or cy - h / 2 < 0 or cy + h / 2 > H:
            continue
        return np.array([cx, cy, w, h]), cls
    raise DataError("could not place a ground truth inside the image; sizes too large for the image")


def _jitter(rng: np.random.Generator, gt: np.ndarray, cfg: DatasetConfig) -> np.ndarray:
    # center std is relative to the gt half-extent
    for _ in range(MAX_REJECTIONS):
        box = np.array(
            [
                gt[0] + rng.normal(0.0, cfg.jitter_center_std) * gt[2] / 2,
                gt[1] + rng.normal(0.0, cfg.jitter_center_std) * gt[3] / 2,
                gt[2] * math.exp(rng.normal(0.0, cfg.jitter_logsize_std)),
                gt[3] * math.exp(rng.normal(0.0, cfg.jitter_logsize_std)),
            ]
        )
        clipped, degenerate = clip_boxes(box, cfg.image_width, cfg.image_height)
        if degenerate:
            continue
        clipped = _snap_inside(clipped, cfg.image_width, cfg.image_height)
        if not degenerate and clipped[2] >= 1.0 and clipped[3] >= 1.0:
            return clipped
    raise DataError("jittered proposal kept falling outside the image")


def _background(rng: np.random.Generator, gt_boxes: np.ndarray, cfg: DatasetConfig) -> np.ndarray:
    W, H = cfg.image_width, cfg.image_height
    for _ in range(MAX_REJECTIONS):
        size = math.exp(rng.uniform(math.log(cfg.min_size), math.log(cfg.max_size)))
        aspect = rng.uniform(-1.0, 1.0)
        w = min(float(_snap(size * math.exp(aspect / 2))), W)
        h = min(float(_snap(size * math.exp(-aspect / 2))), H)
        cx = float(_snap(rng.uniform(w / 2, W - w / 2)))
        cy = float(_snap(rng.uniform(h / 2, H - h / 2)))
        box = np.array([cx, cy, w, h])
        if len(gt_boxes) == 0 or iou_matrix(box, gt_boxes).max() < BACKGROUND_MAX_IOU:
            return box
    raise DataError("could not place a background box below the IoU ceiling")


def generate_scene(cfg: DatasetConfig, image_id: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, image_id])
    lo, hi = cfg.gts_per_image
    n_gt = int(rng.integers(lo, hi + 1))
    gt_boxes, gt_classes = [], []
    for _ in range(n_gt):
        b, c = _sample_gt(rng, cfg)
        gt_boxes.append(b)
        gt_classes.append(c)
    gt_arr = np.array(gt_boxes).reshape(-1, 4)
    proposals = [_jitter(rng, g, cfg) for g in gt_arr for _ in range(cfg.proposals_per_gt)]
    proposals += [_background(rng, gt_arr, cfg) for _ in range(cfg.background_per_image)]
    return Scene(image_id, cfg.image_width, cfg.image_height, gt_arr, np.array(gt_classes, dtype=int), np.array(proposals).reshape(-1, 4))


def generate_dataset(cfg: DatasetConfig) -> list[Scene]:
    """Deterministic in ``cfg.seed``; each image draws from its own seeded stream."""
    return [generate_scene(cfg, i) for i in range(cfg.n_images)]


def split_dataset(scenes: Sequence[Scene], n_heldout: int = 100) -> tuple[list[Scene], list[Scene]]:
    """Last ``n_heldout`` scenes are held out; everything when the set is too small."""
    scenes = list(scenes)
    if n_heldout <= 0:
        return scenes, []
    if len(scenes) <= n_heldout:
        return scenes, scenes
    return scenes[:-n_heldout], scenes[-n_heldout:]


def add_gt_to_proposals(scene: Scene) -> Scene:
    return scene.with_proposals(np.concatenate([scene.proposals, scene.gt_boxes]))


# ---------------------------------------------------------------------------
# JSON-lines I/O (corner-form boxes)
# ---------------------------------------------------------------------------


def _corner(b: np.ndarray) -> list[float]:
    return [float(b[0] - b[2] / 2), float(b[1] - b[3] / 2), float(b[2]), float(b[3])]


def _center(xywh) -> list[float]:
    x, y, w, h = (float(v) for v in xywh)
    return [x + w / 2, y + h / 2, w, h]


def scene_to_dict(scene: Scene) -> dict:
    return {
        "image_id": int(scene.image_id),
        "width": float(scene.width),
        "height": float(scene.height),
        "gts": [{"bbox": _corner(b), "class_id": int(c)} for b, c in zip(scene.gt_boxes, scene.gt_classes)],
        "proposals": [_corner(b) for b in scene.proposals],
    }


_SCENE_KEYS = {"image_id", "width", "height", "gts", "proposals"}
_GT_KEYS = {"bbox", "class_id"}


def scene_from_dict(d: dict) -> Scene:
    extra = set(d) - _SCENE_KEYS
    if extra:
        log.warning("ignoring unknown scene fields: %s", sorted(extra))
    gts = d["gts"]
    for g in gts:
        if set(g) - _GT_KEYS:
            log.warning("ignoring unknown ground-truth fields: %s", sorted(set(g) - _GT_KEYS))
    return Scene(
        int(d["image_id"]),
        float(d["width"]),
        float(d["height"]),
        np.array([_center(g["bbox"]) for g in gts]).reshape(-1, 4),
        np.array([int(g["class_id"]) for g in gts], dtype=int),
        np.array([_center(p) for p in d["proposals"]]).reshape(-1, 4),
    )


def save_dataset(scenes: Iterable[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed scene ({exc})") from exc
    return scenes


def load_config(path) -> DatasetConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: malformed config ({exc})") from exc
    if not isinstance(d, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return DatasetConfig.from_dict(d)
