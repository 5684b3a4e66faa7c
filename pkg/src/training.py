"""
Training recipe
Focal loss, per-family optimizer choice, warmup + step-decay schedule and the
epoch loop with atomic last/best checkpoints
"""

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F
from logzero import logger
from torch.utils.data import DataLoader
from tqdm import tqdm

import evaluation
from clipsampling import (CLIP_SECONDS, INPUT_SIZE, NUM_FRAMES, SHORT_SIDE_RANGE, ClipSequenceDataset,
                          FrameImageDataset, collate_image, collate_sequence)
from models import FAMILIES, SequenceClassifier, model_from_payload, weights_payload
from seqdataset import DatasetManifest

OPTIMIZERS = ("adamw", "sgd")
ADAMW_FAMILIES = ("image_resnet18", "resnet18_lstm", "r2plus1d")
SGD_FAMILIES = ("resnet18_mlp", "resnet18_transformer")
FAMILY_BATCH_SIZES = {"r2plus1d": 8, "resnet18_lstm": 16, "resnet18_mlp": 16,
                      "resnet18_transformer": 16, "image_resnet18": 128}

LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
METRICS_LOG = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-4
    epochs: int = 12
    warmup_epochs: float = 1
    decay_epoch: float = 8
    decay_factor: float = 0.1
    batch_size: int = 16
    gamma: float = 2.0
    weight_decay: float = 0.01
    momentum: float = 0.0
    seed: int = 0
    num_frames: int = NUM_FRAMES
    clip_seconds: float = CLIP_SECONDS
    input_size: int = INPUT_SIZE
    short_side_range: tuple = SHORT_SIDE_RANGE
    workers: int = 0
    max_steps_per_epoch: Optional[int] = None
    eval_batch_size: int = 32
    device: str = "cpu"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r} (expected one of {', '.join(OPTIMIZERS)})")
        if not (0 <= self.warmup_epochs < self.decay_epoch < self.epochs):
            raise ValueError(
                f"need warmup_epochs < decay_epoch < epochs, got {self.warmup_epochs}, "
                f"{self.decay_epoch}, {self.epochs}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        self.short_side_range = tuple(self.short_side_range)

    @classmethod
    def for_family(cls, family, **overrides):
        """Published recipe defaults for a family, then explicit overrides"""
        optimizer = select_optimizer(family)
        values = {
            "optimizer": optimizer,
            "batch_size": FAMILY_BATCH_SIZES[family],
            "weight_decay": 0.01 if optimizer == "adamw" else 0.0,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    best_val_macro_f1: float = -1.0
    best_epoch: int = -1
    last_train_loss: float = math.nan
    optimizer_state: Dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def focal_loss(scores: torch.Tensor, labels: torch.Tensor, gamma=2.0) -> torch.Tensor:
    """Mean over the batch of -(1 - p_t)^gamma * log(p_t)"""
    if not torch.isfinite(scores).all():
        raise ValueError("focal_loss received non-finite scores")
    log_pt = F.log_softmax(scores, dim=1).gather(1, labels.view(-1, 1)).squeeze(1)
    # Floored above zero: pow with gamma < 1 has an infinite slope at 1 - p_t = 0
    one_minus_pt = (-torch.expm1(log_pt)).clamp_min(torch.finfo(log_pt.dtype).tiny)
    return (-one_minus_pt.pow(gamma) * log_pt).mean()


def lr_at(config: TrainConfig, epoch) -> float:
    """Linear warmup from 0, constant, then decayed at decay_epoch"""
    if epoch < 0 or epoch > config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    if epoch < config.warmup_epochs:
        return config.learning_rate * epoch / config.warmup_epochs
    if epoch < config.decay_epoch:
        return config.learning_rate
    return config.learning_rate * config.decay_factor


def select_optimizer(family) -> str:
    if family in ADAMW_FAMILIES:
        return "adamw"
    if family in SGD_FAMILIES:
        return "sgd"
    raise ValueError(f"unknown family {family!r} (valid: {', '.join(FAMILIES)})")


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_step(model, optimizer, batch, gamma, device="cpu") -> float:
    """One forward/backward/update; returns the batch loss"""
    model.train()
    scores = model(batch.pixels.to(device))
    loss = focal_loss(scores, batch.targets.to(device), gamma)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def make_train_dataset(model: SequenceClassifier, manifest, config: TrainConfig):
    if model.spec.is_sequence:
        dataset = ClipSequenceDataset(manifest, "train", train=True, seed=config.seed,
                                      num_frames=config.num_frames, size=config.input_size,
                                      short_side_range=config.short_side_range, seconds=config.clip_seconds)
        return dataset, collate_sequence
    dataset = FrameImageDataset(manifest, "train", train=True, seed=config.seed, size=config.input_size,
                                short_side_range=config.short_side_range)
    return dataset, collate_image


def make_loader(dataset, collate_fn, config: TrainConfig, epoch):
    generator = torch.Generator()
    generator.manual_seed(config.seed * 1000 + epoch)
    return DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=generator,
                      collate_fn=collate_fn, num_workers=config.workers, drop_last=False)


def atomic_save(payload, path):
    tmp_path = path + ".tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)


def save_checkpoint(path, model, optimizer, state: TrainState, config: TrainConfig):
    state.optimizer_state = optimizer.state_dict()
    payload = weights_payload(model)
    payload.update({"train_state": state.to_dict(), "train_config": asdict(config)})
    atomic_save(payload, path)


def load_checkpoint(path, device="cpu"):
    """Rebuild (model, train_state, train_config) from a checkpoint"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=device, weights_only=False)
    model = model_from_payload(payload)
    state = TrainState.from_dict(payload["train_state"]) if "train_state" in payload else TrainState()
    config = TrainConfig(**payload["train_config"]) if "train_config" in payload else None
    return model.to(device), state, config


def append_metrics(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def check_manifest(manifest: DatasetManifest):
    for split in ("train", "val"):
        if not manifest.splits.get(split):
            raise TrainingError(f"manifest has an empty {split} split")


def train(model: SequenceClassifier, manifest: DatasetManifest, config: TrainConfig, run_dir,
          resume: Optional[str] = None, stop_after_epoch: Optional[int] = None) -> TrainState:
    """Run the epoch loop, validating each epoch and keeping last/best checkpoints in run_dir"""
    check_manifest(manifest)
    os.makedirs(run_dir, exist_ok=True)
    device = torch.device(config.device)
    model.to(device)

    optimizer = make_optimizer(model, config)
    state = TrainState()
    if resume:
        payload = torch.load(resume, map_location=device, weights_only=False)
        model.load_state_dict(payload["state_dict"])
        state = TrainState.from_dict(payload["train_state"])
        optimizer.load_state_dict(state.optimizer_state)
        logger.info(f"Resuming from {resume} at epoch {state.epoch}, step {state.global_step}")

    dataset, collate_fn = make_train_dataset(model, manifest, config)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    if config.max_steps_per_epoch:
        steps_per_epoch = min(steps_per_epoch, config.max_steps_per_epoch)
    metrics_path = os.path.join(run_dir, METRICS_LOG)

    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    for epoch in range(state.epoch, last_epoch):
        start_time = time.time()
        # Seeding per epoch makes a resumed run replay the same randomness
        torch.manual_seed(config.seed * 1000 + epoch)
        dataset.set_epoch(epoch)
        loader = make_loader(dataset, collate_fn, config, epoch)

        losses = []
        lr = 0.0
        progress = tqdm(loader, total=steps_per_epoch, desc=f"epoch {epoch + 1}/{config.epochs}", leave=False)
        for step, batch in enumerate(progress):
            if step >= steps_per_epoch:
                break
            lr = lr_at(config, epoch + step / steps_per_epoch)
            set_lr(optimizer, lr)
            try:
                loss = train_step(model, optimizer, batch, config.gamma, device)
            except ValueError as e:
                raise TrainingError(
                    f"non-finite scores at epoch {epoch}, step {state.global_step}, lr {lr:.3g}, "
                    f"clips {batch.clip_ids}") from e
            if not math.isfinite(loss):
                logger.error(f"Non-finite loss {loss} at epoch {epoch}, step {state.global_step}")
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {state.global_step}, lr {lr:.3g}, "
                    f"clips {batch.clip_ids}")
            losses.append(loss)
            state.global_step += 1
            progress.set_postfix(loss=f"{loss:.4f}")

        report = evaluation.evaluate(model, manifest, "val", batch_size=config.eval_batch_size,
                                     input_size=config.input_size, num_frames=config.num_frames,
                                     clip_seconds=config.clip_seconds, device=device)

        state.epoch = epoch + 1
        state.last_train_loss = float(np.mean(losses)) if losses else math.nan
        record = {
            "epoch": state.epoch,
            "global_step": state.global_step,
            "lr": lr,
            "train_loss": state.last_train_loss,
            "val_f1_drone": report.f1_drone,
            "val_f1_bird": report.f1_bird,
            "val_f1_macro": report.f1_macro,
            "seconds": round(time.time() - start_time, 3),
        }
        append_metrics(metrics_path, record)
        logger.info(f"epoch {state.epoch}: loss {state.last_train_loss:.4f}, val macro F1 {report.f1_macro:.4f}")

        if report.f1_macro > state.best_val_macro_f1:
            state.best_val_macro_f1 = report.f1_macro
            state.best_epoch = state.epoch
            save_checkpoint(os.path.join(run_dir, BEST_CHECKPOINT), model, optimizer, state, config)
        save_checkpoint(os.path.join(run_dir, LAST_CHECKPOINT), model, optimizer, state, config)

    return state
