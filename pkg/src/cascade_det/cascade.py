"""Multi-stage training and inference, plus the iterative-BBox and integral-loss baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assign import InsufficientPositivesError, best_match, label_boxes, sample_indices, stats_from_targets
from .data import Scene, add_gt_to_proposals
from .geometry import NormStats, nms_indices, normalize
from .model import FeatureConfig, StageModel, featurize_boxes, fit_classifier, fit_regressor, predict_posteriors, regress_boxes

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7)
MODES = ("cascade", "iterative", "integral")


@dataclass(frozen=True)
class TrainConfig:
    ridge: float = 1e-3
    lr: float = 0.1
    epochs: int = 300
    batch_size: int = 64  # RoIs sampled per image for the first stage
    fg_fraction: float = 0.25
    seed: int = 42
    iou_up: bool = True  # False: every stage labels at the first threshold
    use_stats: bool = True  # False: identity delta normalization
    n_classes: int | None = None  # inferred from the data when None


@dataclass(frozen=True)
class CascadeModel:
    """Trained detector.

    ``mode`` selects inference: ``cascade`` chains the stages; ``iterative``
    applies its single stage ``iterations`` times; ``integral`` shares one
    regressor across stages and averages their classifiers.
    """

    stages: tuple[StageModel, ...]
    thresholds: tuple[float, ...]
    feature_config: FeatureConfig
    mode: str = "cascade"
    iterations: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "thresholds", tuple(float(u) for u in self.thresholds))
        if not self.stages:
            raise ValueError("a model needs at least one stage")
        if len(self.stages) != len(self.thresholds):
            raise ValueError("one threshold per stage")
        if any(b < a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds must be non-decreasing, got {self.thresholds}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        dims = {s.dim for s in self.stages}
        classes = {s.n_classes for s in self.stages}
        if len(dims) != 1 or len(classes) != 1 or dims.pop() != self.feature_config.dim:
            raise ValueError("stage dimensions disagree with each other or with the feature config")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_classes(self) -> int:
        return self.stages[0].n_classes

    def truncate(self, n: int) -> "CascadeModel":
        """The first ``n`` stages of a cascade."""
        if self.mode != "cascade":
            raise ValueError("only cascades can be truncated")
        return replace(self, stages=self.stages[:n], thresholds=self.thresholds[:n])


@dataclass
class InferenceTrace:
    """Per-scene record of one inference pass.

    ``stage_boxes[t]`` are the boxes entering pass ``t``;
    ``stage_posteriors[t]`` is pass ``t``'s classifier on them.
    ``final_posteriors`` holds every classifier evaluated on the last pass's
    input boxes (what the ensemble averages).
    """

    stage_boxes: list[np.ndarray]
    stage_posteriors: list[np.ndarray]
    final_boxes: np.ndarray
    final_posteriors: list[np.ndarray]
    detections: list = field(default_factory=list)

    def __len__(self):
        return len(self.stage_boxes)


def _n_classes(scenes: Sequence[Scene], cfg: TrainConfig) -> int:
    if cfg.n_classes is not None:
        return cfg.n_classes
    seen = [int(s.gt_classes.max()) for s in scenes if len(s.gt_classes)]
    if not seen:
        raise InsufficientPositivesError("no ground truths in the training data")
    return max(seen)


def _fit_stage(X, labels, targets, ious, u, n_classes, cfg: TrainConfig, stage_name: str) -> StageModel:
    pos = labels > 0
    if pos.sum() < 2:
        raise InsufficientPositivesError(f"{stage_name}: only {int(pos.sum())} positives at IoU >= {u}")
    stats = stats_from_targets(targets[pos], ious[pos], u) if cfg.use_stats else NormStats.identity()
    reg = fit_regressor(X[pos], normalize(targets[pos], stats), cfg.ridge)
    cls = fit_classifier(X, labels, n_classes, cfg.lr, cfg.epochs, cfg.seed)
    return StageModel(u, reg, cls, stats)


def _first_stage_pick(scenes, u, cfg: TrainConfig) -> list[np.ndarray]:
    """Per-image fg/bg minibatch indices into the raw proposals."""
    rng = np.random.default_rng(cfg.seed)
    picks = []
    for s in scenes:
        lab = label_boxes(s.proposals, s.gt_boxes, s.gt_classes, u)
        picks.append(sample_indices(lab.labels, cfg.batch_size, cfg.fg_fraction, rng))
    return picks


def train_cascade(
    scenes: Sequence[Scene],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    feature_config: FeatureConfig | None = None,
    config: TrainConfig | None = None,
) -> CascadeModel:
    """Train stage by stage, each on the previous stage's regressed boxes."""
    fc = feature_config or FeatureConfig()
    cfg = config or TrainConfig()
    thresholds = [float(u) for u in thresholds]
    if not thresholds:
        raise ValueError("need at least one threshold")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be non-decreasing, got {thresholds}")
    n_classes = _n_classes(scenes, cfg)
    boxes = [s.proposals.copy() for s in scenes]
    stages = []
    for t, u_nominal in enumerate(thresholds):
        u = u_nominal if cfg.iou_up else thresholds[0]
        feats = [featurize_boxes(b, s, fc) for b, s in zip(boxes, scenes)]
        if t == 0:
            pick = _first_stage_pick(scenes, u, cfg)
        else:
            pick = [np.arange(len(b)) for b in boxes]
        parts = [label_boxes(b[i], s.gt_boxes, s.gt_classes, u) for b, i, s in zip(boxes, pick, scenes)]
        X = np.concatenate([f[i] for f, i in zip(feats, pick)])
        labels = np.concatenate([p.labels for p in parts])
        targets = np.concatenate([p.targets for p in parts])
        ious = np.concatenate([p.ious for p in parts])
        stage = _fit_stage(X, labels, targets, ious, u, n_classes, cfg, f"stage {t + 1}")
        log.info("stage %d: u=%.2f, %d samples, %d positives", t + 1, u, len(labels), int((labels > 0).sum()))
        stages.append(stage)
        boxes = [regress_boxes(stage, b, f, s.width, s.height) for b, f, s in zip(boxes, feats, scenes)]
    labelled = [u if cfg.iou_up else thresholds[0] for u in thresholds]
    return CascadeModel(tuple(stages), tuple(labelled), fc, "cascade", 1)


def train_baseline(scenes, u: float = 0.5, feature_config=None, config=None) -> CascadeModel:
    """Single-stage detector at threshold ``u``."""
    return train_cascade(scenes, [u], feature_config, config)


def train_iterative(scenes, u: float = 0.5, iterations: int = 3, feature_config=None, config=None) -> CascadeModel:
    base = train_baseline(scenes, u, feature_config, config)
    return replace(base, mode="iterative", iterations=iterations)


def train_integral(
    scenes: Sequence[Scene],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    feature_config: FeatureConfig | None = None,
    config: TrainConfig | None = None,
) -> CascadeModel:
    """One regressor at ``min(thresholds)`` plus one classifier per threshold, all on raw proposals."""
    fc = feature_config or FeatureConfig()
    cfg = config or TrainConfig()
    thresholds = sorted(float(u) for u in thresholds)
    if not thresholds:
        raise ValueError("need at least one threshold")
    n_classes = _n_classes(scenes, cfg)
    picked = [s.proposals[i] for s, i in zip(scenes, _first_stage_pick(scenes, thresholds[0], cfg))]
    X = np.concatenate([featurize_boxes(b, s, fc) for b, s in zip(picked, scenes)])
    stages = []
    shared = None
    for u in thresholds:
        parts = [label_boxes(b, s.gt_boxes, s.gt_classes, u) for b, s in zip(picked, scenes)]
        labels = np.concatenate([p.labels for p in parts])
        targets = np.concatenate([p.targets for p in parts])
        ious = np.concatenate([p.ious for p in parts])
        stage = _fit_stage(X, labels, targets, ious, u, n_classes, cfg, f"classifier u={u:.2f}")
        if shared is None:
            shared = stage
        else:
            stage = StageModel(u, shared.reg_weights, stage.cls_weights, shared.stats)
        stages.append(stage)
    return CascadeModel(tuple(stages), tuple(thresholds), fc, "integral", 1)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

SCORE_THRESHOLD = 0.01
NMS_THRESHOLD = 0.5


def detections_from(scene: Scene, boxes: np.ndarray, posteriors: np.ndarray, score_threshold=SCORE_THRESHOLD, nms_threshold=NMS_THRESHOLD):
    """Per-class score filtering and NMS; returns ``(class_id, box, score)`` tuples."""
    out = []
    for k in range(1, posteriors.shape[1]):
        scores = posteriors[:, k]
        keep = np.flatnonzero(scores >= score_threshold)
        if not len(keep):
            continue
        for j in keep[nms_indices(boxes[keep], scores[keep], nms_threshold)]:
            out.append((k, boxes[j], float(scores[j])))
    return out


def run_cascade(model: CascadeModel, scene: Scene, proposals: np.ndarray | None = None, ensemble: bool = False) -> InferenceTrace:
    """Refine ``proposals`` (default: the scene's) through the model.

    Final scores come from the last pass's classifier, or from the mean of
    all classifiers when ``ensemble`` is set. Integral models always average.
    """
    fc = model.feature_config
    boxes = scene.proposals if proposals is None else np.asarray(proposals, dtype=float).reshape(-1, 4)
    W, H = scene.width, scene.height
    stage_boxes, stage_post = [], []

    if model.mode == "integral":
        X = featurize_boxes(boxes, scene, fc)
        posts = [predict_posteriors(s, X) for s in model.stages]
        final = regress_boxes(model.stages[0], boxes, X, W, H)
        trace = InferenceTrace([boxes], [posts[0]], final, posts)
        trace.detections = detections_from(scene, final, np.mean(posts, axis=0))
        return trace

    passes = model.stages if model.mode == "cascade" else [model.stages[0]] * model.iterations
    X = None
    for stage in passes:
        X = featurize_boxes(boxes, scene, fc)
        stage_boxes.append(boxes)
        stage_post.append(predict_posteriors(stage, X))
        boxes = regress_boxes(stage, boxes, X, W, H)
    finals = [predict_posteriors(s, X) for s in model.stages]
    trace = InferenceTrace(stage_boxes, stage_post, boxes, finals)
    scores = ensemble_scores(trace) if ensemble else stage_post[-1]
    trace.detections = detections_from(scene, boxes, scores)
    return trace


def ensemble_scores(trace: InferenceTrace) -> np.ndarray:
    """Mean posterior of every stage classifier on the final-stage boxes."""
    return np.mean(trace.final_posteriors, axis=0)


def iterative_bbox(stage: StageModel, scene: Scene, k: int, feature_config: FeatureConfig, proposals=None) -> np.ndarray:
    """Apply one regressor ``k`` times with re-featurization; returns the boxes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    boxes = scene.proposals if proposals is None else np.asarray(proposals, dtype=float)
    for _ in range(k):
        X = featurize_boxes(boxes, scene, feature_config)
        boxes = regress_boxes(stage, boxes, X, scene.width, scene.height)
    return boxes


def infer_integral(model: CascadeModel, scene: Scene, proposals=None):
    if model.mode != "integral":
        raise ValueError("infer_integral needs an integral-loss model")
    return run_cascade(model, scene, proposals).detections


def detect(model: CascadeModel, scenes: Sequence[Scene], ensemble: bool = False, add_gt: bool = False):
    """Run the model over scenes; returns a flat list of :class:`Detection`."""
    from .evaluate import Detection

    dets = []
    for s in scenes:
        scene = add_gt_to_proposals(s) if add_gt else s
        for k, box, score in run_cascade(model, scene, ensemble=ensemble).detections:
            dets.append(Detection(s.image_id, k, box, score))
    return dets


# ---------------------------------------------------------------------------
# training distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageDistribution:
    """IoU of every box entering a stage, against its best gt."""

    ious: np.ndarray
    threshold: float

    @property
    def n_positive(self) -> int:
        return int((self.ious >= self.threshold).sum())

    def fraction_at_least(self, t: float) -> float:
        return float((self.ious >= t).mean()) if len(self.ious) else 0.0


def stage_distributions(model: CascadeModel, scenes: Sequence[Scene]) -> list[StageDistribution]:
    """Replay the forward pass over all proposals and record each stage's input IoUs.

    For integral models every classifier sees the raw proposals.
    """
    per_stage = [[] for _ in model.stages]
    for s in scenes:
        boxes = s.proposals
        for t, stage in enumerate(model.stages):
            per_stage[t].append(best_match(boxes, s.gt_boxes)[1])
            if model.mode == "cascade":
                X = featurize_boxes(boxes, s, model.feature_config)
                boxes = regress_boxes(stage, boxes, X, s.width, s.height)
    return [StageDistribution(np.concatenate(p) if p else np.zeros(0), u) for p, u in zip(per_stage, model.thresholds)]
