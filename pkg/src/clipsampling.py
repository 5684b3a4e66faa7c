"""
Clip sampling and batch preparation
Temporal window sampling, spatial augmentation, normalization and collation
for the sequence and single-image pipelines
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from seqdataset import DatasetManifest, read_clip_frames
from trackio import LABELS

NUM_FRAMES = 8
CLIP_SECONDS = 0.5
INPUT_SIZE = 224
SHORT_SIDE_RANGE = (250, 320)
FLIP_PROBABILITY = 0.5

MODES = ("sequence", "image")


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationStats:
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    variant: str

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise SamplingError("normalization stats need three channels")
        if any(s <= 0 for s in self.std):
            raise SamplingError(f"std must be positive, got {self.std}")


VIDEO_STATS = NormalizationStats((0.45, 0.45, 0.45), (0.225, 0.225, 0.225), "video")
IMAGE_STATS = NormalizationStats((0.485, 0.456, 0.406), (0.229, 0.224, 0.225), "image")


@dataclass(frozen=True)
class BatchSpec:
    B: int
    C: int = 3
    T: Optional[int] = NUM_FRAMES
    H: int = INPUT_SIZE
    W: int = INPUT_SIZE
    F: int = 512
    O: int = 2

    def __post_init__(self):
        dims = [self.B, self.C, self.H, self.W, self.F, self.O] + ([self.T] if self.T is not None else [])
        if any(int(d) != d or d <= 0 for d in dims):
            raise SamplingError(f"batch dims must be positive integers: {self}")
        if self.C != 3 or self.O != 2:
            raise SamplingError("C must be 3 and O must be 2")

    @property
    def input_shape(self):
        if self.T is None:
            return (self.B, self.C, self.H, self.W)
        return (self.B, self.C, self.T, self.H, self.W)


@dataclass
class SampledClipBatch:
    pixels: torch.Tensor
    labels: List[str]
    clip_ids: List[str]

    @property
    def targets(self) -> torch.Tensor:
        return torch.tensor([label_index(label) for label in self.labels], dtype=torch.long)

    def __len__(self):
        return len(self.labels)


def label_index(label) -> int:
    return LABELS.index(label)


def derive_seed(seed, epoch, index) -> int:
    """Per-sample seed from (global seed, epoch, sample index)"""
    return int(np.random.SeedSequence([int(seed), int(epoch), int(index)]).generate_state(1)[0])


def window_length(fps, num_frames=NUM_FRAMES, seconds=CLIP_SECONDS) -> int:
    # Half-up rounding: 12.5 frames -> 13
    return max(int(math.floor(seconds * fps + 0.5)), num_frames)


def _pad_short_clip(clip_length, num_frames):
    return list(range(clip_length)) + [clip_length - 1] * (num_frames - clip_length)


def sample_clip_window(clip_length, fps, num_frames=NUM_FRAMES, seed=0, seconds=CLIP_SECONDS) -> List[int]:
    """Random sorted frame indices drawn from a random 0.5 s window of the clip"""
    if clip_length < 1:
        raise SamplingError(f"clip_length must be >= 1, got {clip_length}")
    if clip_length < num_frames:
        return _pad_short_clip(clip_length, num_frames)

    rng = np.random.default_rng(seed)
    window = min(window_length(fps, num_frames, seconds), clip_length)
    start = int(rng.integers(0, clip_length - window + 1))
    chosen = rng.choice(window, size=num_frames, replace=False)
    return sorted(int(start + i) for i in chosen)


def center_window_indices(clip_length, fps, num_frames=NUM_FRAMES, position=0.5,
                          seconds=CLIP_SECONDS) -> List[int]:
    """Deterministic evenly spaced indices from the window placed at `position` along the clip"""
    if clip_length < 1:
        raise SamplingError(f"clip_length must be >= 1, got {clip_length}")
    if clip_length < num_frames:
        return _pad_short_clip(clip_length, num_frames)

    window = min(window_length(fps, num_frames, seconds), clip_length)
    start = int(round((clip_length - window) * position))
    offsets = np.round(np.linspace(0, window - 1, num_frames)).astype(int)
    return [start + int(o) for o in offsets]


def window_positions(windows) -> List[float]:
    """Evenly spaced window positions; a single window is centered"""
    if windows <= 1:
        return [0.5]
    return [i / (windows - 1) for i in range(windows)]


def to_float_tensor(frames) -> torch.Tensor:
    """uint8 (T x) H x W x 3 array -> float (T x) 3 x H x W tensor in [0, 1]"""
    array = np.ascontiguousarray(frames)
    tensor = torch.from_numpy(array).float().div_(255.0)
    return tensor.movedim(-1, -3)


def resize_short_side(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of an N x C x H x W tensor so the short side equals size"""
    h, w = x.shape[-2:]
    if h <= w:
        new_h, new_w = size, max(1, int(round(w * size / h)))
    else:
        new_h, new_w = max(1, int(round(h * size / w))), size
    if (new_h, new_w) == (h, w):
        return x
    return F.interpolate(x, size=(new_h, new_w), mode="bilinear", align_corners=False)


def crop(x: torch.Tensor, top, left, size) -> torch.Tensor:
    return x[..., top:top + size, left:left + size]


def center_crop(x: torch.Tensor, size) -> torch.Tensor:
    h, w = x.shape[-2:]
    return crop(x, (h - size) // 2, (w - size) // 2, size)


def horizontal_flip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=[-1])


def normalize(x: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    """Standardize channels of a (..., 3, H, W) tensor"""
    mean = torch.tensor(stats.mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=x.dtype).view(3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    mean = torch.tensor(stats.mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=x.dtype).view(3, 1, 1)
    return x * std + mean


def _augment(x: torch.Tensor, rng, size, short_side_range, flip_p) -> torch.Tensor:
    # One draw per clip: every frame shares the scale, the crop window and the flip
    short_side = int(rng.integers(short_side_range[0], short_side_range[1] + 1))
    x = resize_short_side(x, short_side)
    h, w = x.shape[-2:]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    x = crop(x, top, left, size)
    if rng.random() < flip_p:
        x = horizontal_flip(x)
    return x


def train_transform_video(frames, seed, size=INPUT_SIZE, short_side_range=SHORT_SIDE_RANGE,
                          flip_p=FLIP_PROBABILITY, stats=VIDEO_STATS) -> torch.Tensor:
    """Augment a T x H x W x 3 clip; returns a normalized 3 x T x size x size tensor"""
    if len(frames) < 1:
        raise SamplingError("clip has no frames")
    if short_side_range[0] < size:
        raise SamplingError(f"short side range {short_side_range} below crop size {size}")
    rng = np.random.default_rng(seed)
    x = _augment(to_float_tensor(frames), rng, size, short_side_range, flip_p)
    return normalize(x, stats).transpose(0, 1).contiguous()


def eval_transform_video(frames, size=INPUT_SIZE, stats=VIDEO_STATS) -> torch.Tensor:
    """Short side to size, center crop; returns a normalized 3 x T x size x size tensor"""
    if len(frames) < 1:
        raise SamplingError("clip has no frames")
    x = center_crop(resize_short_side(to_float_tensor(frames), size), size)
    return normalize(x, stats).transpose(0, 1).contiguous()


def train_transform_image(frame, seed, size=INPUT_SIZE, short_side_range=SHORT_SIDE_RANGE,
                          flip_p=FLIP_PROBABILITY, stats=IMAGE_STATS) -> torch.Tensor:
    """Augment one H x W x 3 frame; returns a normalized 3 x size x size tensor"""
    rng = np.random.default_rng(seed)
    x = _augment(to_float_tensor(frame)[None], rng, size, short_side_range, flip_p)
    return normalize(x[0], stats)


def eval_transform_image(frame, size=INPUT_SIZE, stats=IMAGE_STATS) -> torch.Tensor:
    x = center_crop(resize_short_side(to_float_tensor(frame)[None], size), size)
    return normalize(x[0], stats)


def collate(samples: Sequence, mode="sequence") -> SampledClipBatch:
    """Stack (tensor, label, clip_id) samples into B x C x T x H x W or B x C x H x W"""
    if mode not in MODES:
        raise SamplingError(f"unknown collation mode {mode!r}")
    if not samples:
        raise SamplingError("cannot collate an empty batch")

    expected_dims = 4 if mode == "sequence" else 3
    shape = tuple(samples[0][0].shape)
    for tensor, _, clip_id in samples:
        if tensor.dim() != expected_dims:
            raise SamplingError(f"{mode} samples must be {expected_dims}-D, {clip_id} is {tensor.dim()}-D")
        if tuple(tensor.shape) != shape:
            raise SamplingError(f"shape mismatch: {clip_id} {tuple(tensor.shape)} vs {shape}")

    return SampledClipBatch(
        pixels=torch.stack([tensor for tensor, _, _ in samples]),
        labels=[label for _, label, _ in samples],
        clip_ids=[clip_id for _, _, clip_id in samples],
    )


def collate_sequence(samples):
    return collate(samples, "sequence")


def collate_image(samples):
    return collate(samples, "image")


class ClipSequenceDataset(Dataset):
    """Clips of one manifest split, sampled as num_frames windows"""

    def __init__(self, manifest: DatasetManifest, split, train=True, seed=0, num_frames=NUM_FRAMES,
                 size=INPUT_SIZE, short_side_range=SHORT_SIDE_RANGE, seconds=CLIP_SECONDS,
                 stats=VIDEO_STATS):
        self.manifest = manifest
        self.entries = manifest.entries(split)
        self.train = train
        self.seed = seed
        self.epoch = 0
        self.num_frames = num_frames
        self.size = size
        self.short_side_range = short_side_range
        self.seconds = seconds
        self.stats = stats

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.entries)

    def load(self, index, indices):
        entry = self.entries[index]
        return read_clip_frames(self.manifest.clip_dir(entry), entry.num_frames, indices)

    def __getitem__(self, index):
        entry = self.entries[index]
        if self.train:
            seed = derive_seed(self.seed, self.epoch, index)
            indices = sample_clip_window(entry.num_frames, entry.fps, self.num_frames, seed, self.seconds)
            pixels = train_transform_video(self.load(index, indices), seed + 1, self.size,
                                           self.short_side_range, stats=self.stats)
        else:
            indices = center_window_indices(entry.num_frames, entry.fps, self.num_frames,
                                            seconds=self.seconds)
            pixels = eval_transform_video(self.load(index, indices), self.size, self.stats)
        return pixels, entry.label, entry.clip_id


class FrameImageDataset(Dataset):
    """Individual frames of every clip of a split, for the single-image pipeline"""

    def __init__(self, manifest: DatasetManifest, split, train=True, seed=0, size=INPUT_SIZE,
                 short_side_range=SHORT_SIDE_RANGE, stats=IMAGE_STATS):
        self.manifest = manifest
        self.entries = manifest.entries(split)
        self.items = [(i, f) for i, entry in enumerate(self.entries) for f in range(entry.num_frames)]
        self.train = train
        self.seed = seed
        self.epoch = 0
        self.size = size
        self.short_side_range = short_side_range
        self.stats = stats

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index):
        entry_index, frame_index = self.items[index]
        entry = self.entries[entry_index]
        frame = read_clip_frames(self.manifest.clip_dir(entry), entry.num_frames, [frame_index])[0]
        if self.train:
            pixels = train_transform_image(frame, derive_seed(self.seed, self.epoch, index), self.size,
                                           self.short_side_range, stats=self.stats)
        else:
            pixels = eval_transform_image(frame, self.size, self.stats)
        return pixels, entry.label, entry.clip_id
