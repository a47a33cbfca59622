"""Cascaded bounding-box regression and classification over synthetic proposals."""

from .assign import GroundTruth, LabeledSample, compute_stats, iou_histogram, match_and_label, sample_minibatch
from .cascade import (
    CascadeModel,
    InferenceTrace,
    TrainConfig,
    detect,
    ensemble_scores,
    infer_integral,
    iterative_bbox,
    run_cascade,
    stage_distributions,
    train_baseline,
    train_cascade,
    train_integral,
    train_iterative,
)
from .data import DatasetConfig, Scene, add_gt_to_proposals, generate_dataset, load_dataset, save_dataset, split_dataset
from .evaluate import APReport, Detection, average_precision, brute_force_ap_oracle, coco_ap, localization_curve, match_detections, stage_report
from .geometry import Box, Delta, NormStats, clip_box, decode_delta, denormalize_delta, encode_delta, iou, nms, normalize_delta, smooth_l1
from .model import FeatureConfig, StageModel, featurize, fit_classifier, fit_regressor, predict_delta, predict_scores, stage_loss
from .persist import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "APReport",
    "Box",
    "CascadeModel",
    "DatasetConfig",
    "Delta",
    "Detection",
    "FeatureConfig",
    "GroundTruth",
    "InferenceTrace",
    "LabeledSample",
    "NormStats",
    "Scene",
    "StageModel",
    "TrainConfig",
    "add_gt_to_proposals",
    "average_precision",
    "brute_force_ap_oracle",
    "clip_box",
    "coco_ap",
    "compute_stats",
    "decode_delta",
    "denormalize_delta",
    "detect",
    "encode_delta",
    "ensemble_scores",
    "featurize",
    "fit_classifier",
    "fit_regressor",
    "generate_dataset",
    "infer_integral",
    "iou",
    "iou_histogram",
    "iterative_bbox",
    "load_dataset",
    "load_model",
    "localization_curve",
    "match_and_label",
    "match_detections",
    "nms",
    "normalize_delta",
    "predict_delta",
    "predict_scores",
    "run_cascade",
    "sample_minibatch",
    "save_dataset",
    "save_model",
    "smooth_l1",
    "split_dataset",
    "stage_distributions",
    "stage_loss",
    "stage_report",
    "train_baseline",
    "train_cascade",
    "train_integral",
    "train_iterative",
]

