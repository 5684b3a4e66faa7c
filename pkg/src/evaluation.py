"""
Evaluation
Confusion matrices, per-class and macro F1, model evaluation over a manifest
split, and metrics/plot/table report files
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from logzero import logger
from tabulate import tabulate

import render_report as report_plots
from clipsampling import (CLIP_SECONDS, INPUT_SIZE, NUM_FRAMES, center_window_indices,
                          eval_transform_image, eval_transform_video, window_positions)
from models import count_params
from seqdataset import DatasetManifest, read_clip_frames
from trackio import LABELS

CLASS_ORDER = LABELS  # rows/columns: [drone, bird]
GRANULARITIES = ("clip", "frame")

ARCHITECTURE_NAMES = {
    "image_resnet18": ("ResNet18", "Single Image"),
    "r2plus1d": ("R(2+1)D", "Image Sequence"),
    "resnet18_lstm": ("ResNet18 + LSTM neck", "Image Sequence"),
    "resnet18_mlp": ("ResNet18 + MLP neck", "Image Sequence"),
    "resnet18_transformer": ("ResNet18 + Transformer neck", "Image Sequence"),
}
TABLE_HEADERS = ["Architecture", "Modality", "Unfrozen Backbone Block", "# of Total Parameters",
                 "# of Trainable Parameters", "F1_drone", "F1_bird", "F1_macro"]


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # 2 x 2, rows true, columns predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2) or (self.counts < 0).any():
            raise EvaluationError(f"invalid confusion matrix {self.counts.tolist()}")

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


@dataclass
class EvalReport:
    f1_drone: float
    f1_bird: float
    f1_macro: float
    confusion: ConfusionMatrix
    n_samples: int
    granularity: str
    modality: str = ""
    split: str = "val"
    unfrozen_blocks: Optional[int] = None
    total_params: Optional[int] = None
    trainable_params: Optional[int] = None
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "modality": self.modality,
            "split": self.split,
            "granularity": self.granularity,
            "f1_drone": self.f1_drone,
            "f1_bird": self.f1_bird,
            "f1_macro": self.f1_macro,
            "confusion": self.confusion.to_list(),
            "n_samples": self.n_samples,
            "unfrozen_blocks": self.unfrozen_blocks,
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["confusion"] = ConfusionMatrix(data["confusion"])
        return cls(**data)


def _to_indices(values) -> np.ndarray:
    indices = []
    for value in values:
        if isinstance(value, str):
            if value not in CLASS_ORDER:
                raise EvaluationError(f"unknown label {value!r}")
            indices.append(CLASS_ORDER.index(value))
        else:
            value = int(value)
            if value not in (0, 1):
                raise EvaluationError(f"class index {value} out of range")
            indices.append(value)
    return np.asarray(indices, dtype=np.int64)


def confusion(preds, labels) -> ConfusionMatrix:
    """Counts by (true, predicted) in [drone, bird] order"""
    if len(preds) != len(labels):
        raise EvaluationError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (_to_indices(labels), _to_indices(preds)), 1)
    return ConfusionMatrix(counts)


def _f1(tp, fp, fn) -> float:
    # Zero support or zero hits resolve to 0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def f1_scores(cm: ConfusionMatrix):
    """(f1_drone, f1_bird, f1_macro)"""
    c = cm.counts
    f1_drone = _f1(c[0, 0], c[1, 0], c[0, 1])
    f1_bird = _f1(c[1, 1], c[0, 1], c[1, 0])
    return f1_drone, f1_bird, (f1_drone + f1_bird) / 2


def make_report(preds, labels, granularity, **kwargs) -> EvalReport:
    cm = confusion(preds, labels)
    f1_drone, f1_bird, f1_macro = f1_scores(cm)
    return EvalReport(f1_drone=f1_drone, f1_bird=f1_bird, f1_macro=f1_macro, confusion=cm,
                      n_samples=len(labels), granularity=granularity, **kwargs)


def _batched_probs(model, tensors, batch_size, device) -> np.ndarray:
    probs = []
    for i in range(0, len(tensors), batch_size):
        batch = torch.stack(tensors[i:i + batch_size]).to(device)
        probs.append(torch.softmax(model(batch), dim=1).cpu().numpy())
    return np.concatenate(probs)


@torch.no_grad()
def predict_clip_scores(model, manifest: DatasetManifest, split, granularity, windows=1,
                        batch_size=32, input_size=INPUT_SIZE, num_frames=NUM_FRAMES,
                        clip_seconds=CLIP_SECONDS, device="cpu"):
    """Per-sample class probabilities with their true labels and sample ids"""
    entries = manifest.entries(split)
    scores, labels, ids = [], [], []

    for entry in entries:
        clip_dir = manifest.clip_dir(entry)
        if model.spec.is_sequence:
            # One tensor per window; window scores are averaged
            tensors = []
            for position in window_positions(windows):
                indices = center_window_indices(entry.num_frames, entry.fps, num_frames, position, clip_seconds)
                tensors.append(eval_transform_video(read_clip_frames(clip_dir, entry.num_frames, indices),
                                                    input_size))
            scores.append(_batched_probs(model, tensors, batch_size, device).mean(axis=0))
            labels.append(entry.label)
            ids.append(entry.clip_id)
            continue

        frames = read_clip_frames(clip_dir, entry.num_frames)
        probs = _batched_probs(model, [eval_transform_image(f, input_size) for f in frames], batch_size, device)
        if granularity == "clip":
            scores.append(probs.mean(axis=0))
            labels.append(entry.label)
            ids.append(entry.clip_id)
        else:
            scores.extend(probs)
            labels.extend([entry.label] * len(probs))
            ids.extend(f"{entry.clip_id}#{i}" for i in range(len(probs)))

    return np.asarray(scores), labels, ids


def evaluate(model, manifest: DatasetManifest, split="val", granularity=None, windows=1, batch_size=32,
             input_size=INPUT_SIZE, num_frames=NUM_FRAMES, clip_seconds=CLIP_SECONDS, device="cpu") -> EvalReport:
    """Sequence families per clip, the image family per frame unless granularity says otherwise"""
    if not manifest.splits.get(split):
        raise EvaluationError(f"split {split!r} is empty")
    if granularity is None:
        granularity = "clip" if model.spec.is_sequence else "frame"
    if granularity not in GRANULARITIES:
        raise EvaluationError(f"unknown granularity {granularity!r}")
    if model.spec.is_sequence and granularity == "frame":
        raise EvaluationError(f"{model.family} is evaluated per clip only")

    was_training = model.training
    model.eval()
    scores, labels, _ = predict_clip_scores(model, manifest, split, granularity, windows, batch_size,
                                            input_size, num_frames, clip_seconds, device)
    model.train(was_training)

    params = count_params(model)
    report = make_report(scores.argmax(axis=1).tolist(), labels, granularity, modality=model.family,
                         split=split, unfrozen_blocks=model.policy.unfrozen_backbone_blocks,
                         total_params=params.total_params, trainable_params=params.trainable_params)
    logger.info(f"{model.family} {split}/{granularity}: F1 drone {report.f1_drone:.3f}, "
                f"bird {report.f1_bird:.3f}, macro {report.f1_macro:.3f} over {report.n_samples}")
    return report


def format_params(n) -> str:
    """Human scale as printed in parameter tables: 1K, 181K, 11.2M"""
    if n is None:
        return "-"
    if n >= 1_000_000:
        return f"{n / 1_000_000:.1f}M"
    if n >= 1_000:
        return f"{round(n / 1_000)}K"
    return str(n)


def table_rows(reports: Sequence[EvalReport]) -> List[List]:
    rows = []
    for report in reports:
        architecture, modality = ARCHITECTURE_NAMES.get(report.modality, (report.modality, ""))
        rows.append([
            architecture,
            modality,
            "-" if report.unfrozen_blocks is None else report.unfrozen_blocks,
            format_params(report.total_params),
            format_params(report.trainable_params),
            f"{100 * report.f1_drone:.1f}",
            f"{100 * report.f1_bird:.1f}",
            f"{100 * report.f1_macro:.1f}",
        ])
    return rows


def format_table(reports: Sequence[EvalReport]) -> str:
    return tabulate(table_rows(reports), headers=TABLE_HEADERS, tablefmt="github")


def render_report(reports, out_dir) -> Dict[str, str]:
    """Write metrics.json, one confusion plot per report and a comparison table"""
    if isinstance(reports, EvalReport):
        reports = [reports]
    os.makedirs(out_dir, exist_ok=True)
    files = {}

    metrics_path = os.path.join(out_dir, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2)
    files["metrics"] = metrics_path

    for report in reports:
        name = f"confusion_{report.modality or 'model'}_{report.split}.png"
        path = os.path.join(out_dir, name)
        report_plots.plot_confusion_matrix(report.confusion.counts, CLASS_ORDER, path,
                                           title=f"{report.modality} ({report.split}, {report.granularity})")
        files[name] = path

    table_path = os.path.join(out_dir, "table.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(format_table(reports) + "\n")
    files["table"] = table_path
    return files


def load_metrics(path) -> List[EvalReport]:
    with open(path, "r", encoding="utf-8") as f:
        return [EvalReport.from_dict(d) for d in json.load(f)]
