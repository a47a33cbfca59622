"""One detection stage: synthetic features, ridge box regressor, softmax classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assign import best_match
from .geometry import Box, Delta, NormStats, clip_boxes, decode, denormalize, encode, normalize, smooth_l1_elementwise

BACKGROUND_IOU = 0.3
LOSS_WEIGHT = 1.0  # lambda in the stage loss

N_GEOMETRY = 4
N_OBSERVATION = 4
N_QUALITY = 4


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    """Noisy-oracle featurization standing in for pooled CNN features.

    Observation noise std for a box is ``observation_noise + noise_growth *
    (1 - IoU)`` so poorly localized boxes are genuinely harder to regress.
    """

    observation_noise: float = 0.0
    distractor_dims: int = 8
    noise_growth: float = 0.3
    seed: int = 42

    def __post_init__(self):
        if self.observation_noise < 0 or self.noise_growth < 0 or self.distractor_dims < 0:
            raise ValueError(f"invalid feature config {self}")

    @property
    def dim(self) -> int:
        return N_GEOMETRY + N_OBSERVATION + N_QUALITY + self.distractor_dims + 1

    @property
    def observation_slice(self) -> slice:
        return slice(N_GEOMETRY, N_GEOMETRY + N_OBSERVATION)


# ---------------------------------------------------------------------------
# keyed noise: a pure function of (seed, image, quantized box, slot)
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_QUANTUM = 256.0


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def _box_keys(seed: int, image_id: int, boxes: np.ndarray) -> np.ndarray:
    q = np.round(boxes * _QUANTUM).astype(np.int64).view(np.uint64)
    h = _splitmix(np.full(len(boxes), np.uint64(seed % 2**64)))
    h = _splitmix(h ^ np.uint64(image_id % 2**64))
    for j in range(4):
        h = _splitmix(h ^ q[:, j])
    return h


def keyed_normal(seed: int, image_id: int, boxes: np.ndarray, n: int) -> np.ndarray:
    """``(len(boxes), n)`` standard normals, reproducible per box."""
    keys = _box_keys(seed, image_id, np.asarray(boxes, dtype=float).reshape(-1, 4))
    slots = np.arange(2 * n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _splitmix(keys[:, None] ^ (slots[None, :] * _GOLDEN))
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    u1, u2 = u[:, :n], u[:, n:]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def featurize_boxes(boxes: np.ndarray, scene, cfg: FeatureConfig) -> np.ndarray:
    """Feature rows for ``boxes`` (N, 4) inside ``scene``.

    Layout: geometry (cx/W, cy/H, log w/W, log h/H); noisy observation of the
    delta to the best-matching gt; its square (a quality cue a linear
    classifier can use); distractors; constant 1.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n = len(boxes)
    W, H = scene.width, scene.height
    geometry = np.stack([boxes[:, 0] / W, boxes[:, 1] / H, np.log(boxes[:, 2] / W), np.log(boxes[:, 3] / H)], axis=1)

    noise = keyed_normal(cfg.seed, scene.image_id, boxes, N_OBSERVATION + cfg.distractor_dims)
    matched, ious = best_match(boxes, scene.gt_boxes)
    foreground = ious >= BACKGROUND_IOU
    truth = np.zeros((n, 4))
    if foreground.any():
        truth[foreground] = encode(boxes[foreground], scene.gt_boxes[matched[foreground]])
    # background boxes observe nothing but noise at the IoU = 0 level
    sigma = cfg.observation_noise + cfg.noise_growth * np.where(foreground, 1.0 - ious, 1.0)
    observation = truth + sigma[:, None] * noise[:, :N_OBSERVATION]

    return np.concatenate(
        [geometry, observation, observation**2, noise[:, N_OBSERVATION:], np.ones((n, 1))],
        axis=1,
    )


def featurize(box: Box, scene, cfg: FeatureConfig) -> np.ndarray:
    return featurize_boxes(box.as_array(), scene, cfg)[0]


# ---------------------------------------------------------------------------
# regressor
# ---------------------------------------------------------------------------


def fit_regressor(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Closed-form ridge: ``(X'X + ridge I) W = X'T`` via Cholesky."""
    X = np.asarray(features, dtype=float)
    T = np.asarray(targets, dtype=float).reshape(len(X), -1)
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(T))):
        raise ValueError("regressor inputs must be finite")
    A = X.T @ X + ridge * np.eye(X.shape[1])
    return cho_solve(cho_factor(A), X.T @ T)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of ``softmax(X W')`` against integer labels."""
    logits = features @ weights.T
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_p[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = softmax(features @ weights.T)
    p[np.arange(len(labels)), labels] -= 1.0
    return p.T @ features / len(labels)


def fit_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    lr: float = 0.1,
    epochs: int = 300,
    seed: int = 0,
    history: list | None = None,
) -> np.ndarray:
    """Full-batch gradient descent on mean cross-entropy; returns (M+1, D) weights.

    Non-constant columns are standardized while training and the scaling is
    folded back, so the weights apply to raw features. Weights start at zero;
    ``seed`` is accepted for interface symmetry and does not affect the result.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(X) == 0:
        raise ValueError("cannot fit a classifier on an empty set")
    if y.min() < 0 or y.max() > n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}]")

    # train on standardized columns, then fold the scaling back into the weights
    sd = X.std(axis=0)
    varying = sd > 1e-12
    const = np.flatnonzero(~varying & (np.abs(X[0]) > 0))
    center = len(const) > 0
    mu = np.where(varying & center, X.mean(axis=0), 0.0)
    sd = np.where(varying, sd, 1.0)
    Z = (X - mu) / sd

    Wz = np.zeros((n_classes + 1, X.shape[1]))
    for step in range(epochs):
        loss = cross_entropy(Wz, Z, y)
        if not (np.isfinite(loss) and np.isfinite(Wz).all()):
            raise DivergenceError(f"classifier diverged (non-finite loss or weights) at step {step}")
        if history is not None:
            history.append(loss)
        Wz -= lr * cross_entropy_grad(Wz, Z, y)
    final = cross_entropy(Wz, Z, y)
    if not (np.isfinite(final) and np.isfinite(Wz).all()):
        raise DivergenceError(f"classifier diverged (non-finite loss or weights) at step {epochs}")
    if history is not None:
        history.append(final)

    W = Wz / sd
    if center:
        c = const[0]
        W[:, c] -= (W @ mu) / X[0, c]
    return W


# ---------------------------------------------------------------------------
# stage
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StageModel:
    u: float
    reg_weights: np.ndarray  # (D, 4)
    cls_weights: np.ndarray  # (M+1, D)
    stats: NormStats = field(default_factory=NormStats)

    def __post_init__(self):
        # C order keeps matmul summation identical for fitted and reloaded weights
        reg = np.ascontiguousarray(self.reg_weights, dtype=float)
        cls = np.ascontiguousarray(self.cls_weights, dtype=float)
        if reg.ndim != 2 or reg.shape[1] != 4:
            raise ValueError(f"reg_weights must be (D, 4), got {reg.shape}")
        if cls.ndim != 2 or cls.shape[1] != reg.shape[0]:
            raise ValueError(f"cls_weights must be (M+1, {reg.shape[0]}), got {cls.shape}")
        object.__setattr__(self, "reg_weights", reg)
        object.__setattr__(self, "cls_weights", cls)

    @property
    def dim(self) -> int:
        return self.reg_weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.cls_weights.shape[0] - 1

    @classmethod
    def identity(cls, dim: int, n_classes: int, u: float = 0.5) -> "StageModel":
        """Zero weights: boxes pass through unchanged, posteriors are uniform."""
        return cls(u, np.zeros((dim, 4)), np.zeros((n_classes + 1, dim)), NormStats.identity())


def predict_deltas(model: StageModel, features: np.ndarray) -> np.ndarray:
    return denormalize(np.asarray(features) @ model.reg_weights, model.stats)


def predict_posteriors(model: StageModel, features: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(features) @ model.cls_weights.T)


def predict_delta(model: StageModel, f: np.ndarray) -> Delta:
    return Delta.from_array(predict_deltas(model, np.asarray(f).reshape(1, -1))[0])


def predict_scores(model: StageModel, f: np.ndarray) -> np.ndarray:
    return predict_posteriors(model, np.asarray(f).reshape(1, -1))[0]


def regress_boxes(model: StageModel, boxes: np.ndarray, features: np.ndarray, width: float, height: float) -> np.ndarray:
    """Apply the stage regressor and clip to the image.

    A box whose clipped result has zero area keeps its input geometry.
    """
    out, _ = decode(boxes, predict_deltas(model, features))
    out, degenerate = clip_boxes(out, width, height)
    out[degenerate] = np.asarray(boxes)[degenerate]
    return out


def stage_loss(
    model: StageModel,
    features: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    loss_weight: float = LOSS_WEIGHT,
) -> float:
    """Cross-entropy plus ``loss_weight`` x mean smooth-L1 over positives.

    ``targets`` are raw deltas; rows with label 0 are ignored by the
    regression term (NaN allowed there).
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if len(X) == 0:
        raise ValueError("stage loss needs a non-empty batch")
    cls_term = cross_entropy(model.cls_weights, X, y)
    pos = y > 0
    if not pos.any():
        return cls_term
    residual = normalize(np.asarray(targets)[pos], model.stats) - X[pos] @ model.reg_weights
    return cls_term + loss_weight * float(smooth_l1_elementwise(residual).sum(axis=1).mean())
