"""Model files (single JSON document) and detection files (JSON lines)."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .cascade import CascadeModel
from .data import DataError
from .evaluate import Detection
from .geometry import NormStats
from .model import FeatureConfig, StageModel

FORMAT_VERSION = 1


class ModelFormatError(DataError):
    pass


def model_to_dict(model: CascadeModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "mode": model.mode,
        "iterations": model.iterations,
        "thresholds": list(model.thresholds),
        "feature_config": asdict(model.feature_config),
        "stages": [
            {
                "u": s.u,
                "stats": {"mean": list(s.stats.mean), "std": list(s.stats.std)},
                "reg_weights": s.reg_weights.tolist(),
                "cls_weights": s.cls_weights.tolist(),
            }
            for s in model.stages
        ],
    }


def model_from_dict(d: dict) -> CascadeModel:
    if not isinstance(d, dict) or "format_version" not in d:
        raise ModelFormatError("model file has no format_version field")
    if d["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {d['format_version']} is not supported (expected {FORMAT_VERSION})")
    try:
        fc = FeatureConfig(**d["feature_config"])
        stages = []
        for s in d["stages"]:
            reg = np.array(s["reg_weights"], dtype=float)
            cls = np.array(s["cls_weights"], dtype=float)
            stages.append(StageModel(float(s["u"]), reg, cls, NormStats(s["stats"]["mean"], s["stats"]["std"])))
        return CascadeModel(tuple(stages), tuple(d["thresholds"]), fc, d.get("mode", "cascade"), int(d.get("iterations", 1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"inconsistent model file: {exc}") from exc


def save_model(model: CascadeModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path) -> CascadeModel:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: cannot parse model file ({exc})") from exc
    return model_from_dict(d)


def save_detections(dets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            b = d.box
            row = {
                "image_id": int(d.image_id),
                "class_id": int(d.class_id),
                "bbox": [float(b[0] - b[2] / 2), float(b[1] - b[3] / 2), float(b[2]), float(b[3])],
                "score": float(d.score),
            }
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")


def load_detections(path) -> list[Detection]:
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                x, y, w, h = (float(v) for v in row["bbox"])
                dets.append(Detection(int(row["image_id"]), int(row["class_id"]), np.array([x + w / 2, y + h / 2, w, h]), float(row["score"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed detection ({exc})") from exc
    return dets
