"""
Synthetic drone/bird track data
Bird blobs flap (sinusoidal horizontal extent), drone blobs jitter i.i.d. with the
same per-frame distribution, so only temporal structure separates the classes.
Also plants predicted-only gaps in tracks for splitting fixtures.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from logzero import logger

from seqdataset import DEFAULT_GAP_THRESHOLD, build_dataset, verify_manifest
from trackio import LABELS, BoundingBox, Track, write_tracks

SPLIT_INDEX = {"train": 0, "val": 1}


@dataclass
class SynthConfig:
    n_train_per_class: int = 200
    n_val_per_class: int = 50
    frames_per_clip: int = 32
    fps: float = 30.0
    crop_size_range: Tuple[int, int] = (28, 36)
    width_fraction_range: Tuple[float, float] = (0.4, 0.55)
    height_fraction_range: Tuple[float, float] = (0.3, 0.4)
    # Relative extent swing: flap amplitude for birds and jitter amplitude for drones
    amplitude: float = 0.4
    flap_frequency_range: Tuple[float, float] = (1.0, 2.5)
    background_range: Tuple[int, int] = (150, 210)
    object_intensity_range: Tuple[int, int] = (40, 90)
    noise_level: float = 6.0
    margin: int = 12
    max_drift: float = 0.3
    predicted_run_probability: float = 0.3
    gap_threshold: int = DEFAULT_GAP_THRESHOLD
    n_gap_tracks: int = 500
    max_gap_track_frames: int = 200
    seed: int = 0

    def __post_init__(self):
        self.crop_size_range = tuple(self.crop_size_range)
        self.width_fraction_range = tuple(self.width_fraction_range)
        self.height_fraction_range = tuple(self.height_fraction_range)
        self.flap_frequency_range = tuple(self.flap_frequency_range)
        self.background_range = tuple(self.background_range)
        self.object_intensity_range = tuple(self.object_intensity_range)
        if not (0 <= self.amplitude < 1):
            raise ValueError(f"amplitude must be in [0, 1), got {self.amplitude}")
        if self.frames_per_clip < 1 or self.fps <= 0:
            raise ValueError("frames_per_clip and fps must be positive")


@dataclass
class ClipAppearance:
    """Per-clip appearance shared by the paired bird and drone clip"""
    size: int
    base_width: float
    base_height: float
    background: float
    intensity: float
    vx: float
    vy: float
    frequency: float
    phase: float


@dataclass
class GapTrackCase:
    track: Track
    expected_segments: List[List[int]]
    planted_runs: List[int] = field(default_factory=list)


def clip_rng(config: SynthConfig, split, index, stream):
    return np.random.default_rng([config.seed, SPLIT_INDEX[split], index, stream])


def draw_appearance(rng, config: SynthConfig) -> ClipAppearance:
    size = int(rng.integers(config.crop_size_range[0], config.crop_size_range[1] + 1))
    return ClipAppearance(
        size=size,
        base_width=size * rng.uniform(*config.width_fraction_range),
        base_height=size * rng.uniform(*config.height_fraction_range),
        background=rng.uniform(*config.background_range),
        intensity=rng.uniform(*config.object_intensity_range),
        vx=rng.uniform(-config.max_drift, config.max_drift),
        vy=rng.uniform(-config.max_drift, config.max_drift),
        frequency=rng.uniform(*config.flap_frequency_range),
        phase=rng.uniform(0, 2 * math.pi),
    )


def extent_signal(label, appearance: ClipAppearance, n_frames, fps, rng) -> np.ndarray:
    """Unit-amplitude extent modulation; both classes have the arcsine per-frame marginal"""
    if label == "bird":
        t = np.arange(n_frames) / fps
        return np.sin(2 * math.pi * appearance.frequency * t + appearance.phase)
    return np.sin(rng.uniform(0, 2 * math.pi, size=n_frames))


def draw_blob(canvas, cx, cy, rx, ry, intensity):
    """Anti-aliased filled ellipse blended into a float canvas"""
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.sqrt(((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2)
    alpha = np.clip((1.0 - r) * min(rx, ry) + 0.5, 0.0, 1.0)
    canvas *= 1.0 - alpha
    canvas += alpha * intensity
    return canvas


def render_clip(label, appearance: ClipAppearance, config: SynthConfig, rng):
    """Frames of one synthetic video plus the tracker boxes and object widths"""
    n = config.frames_per_clip
    size = appearance.size
    canvas_size = size + 2 * config.margin
    signal = extent_signal(label, appearance, n, config.fps, rng)
    widths = appearance.base_width * (1.0 + config.amplitude * signal)

    frames, boxes = [], []
    for t in range(n):
        x = config.margin + appearance.vx * t
        y = config.margin + appearance.vy * t
        canvas = np.full((canvas_size, canvas_size), appearance.background, dtype=np.float64)
        draw_blob(canvas, x + size / 2, y + size / 2, widths[t] / 2, appearance.base_height / 2,
                  appearance.intensity)
        canvas += rng.normal(0.0, config.noise_level, size=canvas.shape)
        gray = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
        frames.append(np.repeat(gray[:, :, None], 3, axis=2))
        boxes.append((t, int(round(x)), int(round(y)), size, size))
    return frames, boxes, widths


def plant_short_runs(n_frames, rng, config: SynthConfig) -> List[str]:
    """Box sources with at most one predicted run shorter than the gap threshold"""
    sources = ["detected"] * n_frames
    if n_frames > 2 and config.gap_threshold > 1 and rng.random() < config.predicted_run_probability:
        length = int(rng.integers(1, min(config.gap_threshold - 1, n_frames - 2) + 1))
        start = int(rng.integers(1, n_frames - length))
        for i in range(start, start + length):
            sources[i] = "predicted"
    return sources


def make_track(video_id, label, fps, boxes, sources, rng) -> Track:
    return Track(
        track_id="1",
        video_id=video_id,
        fps=fps,
        label=label,
        boxes=[
            BoundingBox(frame_index=t, x=x, y=y, width=w, height=h, source=source,
                        score=0.0 if source == "predicted" else round(float(rng.uniform(0.5, 1.0)), 4))
            for (t, x, y, w, h), source in zip(boxes, sources)
        ],
    )


def write_frames(frames, directory):
    os.makedirs(directory, exist_ok=True)
    for t, frame in enumerate(frames):
        cv2.imwrite(os.path.join(directory, f"{t:06d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))


def iter_clip_plan(config: SynthConfig):
    """(split, index, label, video_id) for every clip to generate"""
    for split, count in (("train", config.n_train_per_class), ("val", config.n_val_per_class)):
        for index in range(count):
            for label in LABELS:
                yield split, index, label, f"synth_{split}_{label}_{index:04d}"


def synthesize_clip(config: SynthConfig, split, index, label, video_id):
    """Render one video; the paired bird/drone clips share appearance, not temporal noise"""
    appearance = draw_appearance(clip_rng(config, split, index, 0), config)
    rng = clip_rng(config, split, index, 1 + LABELS.index(label))
    frames, boxes, widths = render_clip(label, appearance, config, rng)
    sources = plant_short_runs(len(frames), rng, config)
    return frames, make_track(video_id, label, config.fps, boxes, sources, rng), widths


def generate(config: SynthConfig, out_root, workers=1) -> Dict:
    """Write frames, tracks, split file, the exported clip dataset and gap-track fixtures"""
    frames_root = os.path.join(out_root, "frames")
    tracks, split_map = [], {}

    for split, index, label, video_id in iter_clip_plan(config):
        frames, track, _ = synthesize_clip(config, split, index, label, video_id)
        write_frames(frames, os.path.join(frames_root, video_id))
        tracks.append(track)
        split_map[video_id] = split

    tracks_path = os.path.join(out_root, "tracks.jsonl")
    split_path = os.path.join(out_root, "splits.json")
    write_tracks(tracks, tracks_path)
    with open(split_path, "w", encoding="utf-8") as f:
        json.dump(split_map, f, indent=2, sort_keys=True)

    dataset_root = os.path.join(out_root, "dataset")
    manifest = build_dataset(tracks, frames_root, split_map, dataset_root, config.gap_threshold, workers)
    violations = verify_manifest(manifest)
    if violations:
        raise RuntimeError(f"synthetic manifest inconsistent: {violations}")

    gap_paths = write_gap_fixture(make_gap_tracks(config), out_root)

    with open(os.path.join(out_root, "synth_config.json"), "w", encoding="utf-8") as f:
        json.dump(asdict(config), f, indent=2)

    logger.info(f"Generated {len(tracks)} synthetic tracks under {out_root}")
    return {
        "frames_root": frames_root,
        "tracks": tracks_path,
        "splits": split_path,
        "dataset_root": dataset_root,
        "manifest": os.path.join(dataset_root, "manifest.json"),
        "gap_tracks": gap_paths["tracks"],
        "gap_expected": gap_paths["expected"],
        "manifest_object": manifest,
    }


def _expected_segments(blocks, threshold) -> List[List[int]]:
    """Segments implied by alternating ('detected'|'predicted', frames) blocks"""
    segments, current = [], []
    for kind, frames in blocks:
        if kind == "predicted" and len(frames) >= threshold:
            if current:
                segments.append(current)
            current = []
        else:
            current = current + frames
    if current:
        segments.append(current)
    return segments


def _gap_track(track_id, blocks, rng) -> Track:
    boxes = []
    for kind, frames in blocks:
        for t in frames:
            boxes.append(BoundingBox(frame_index=t, x=int(rng.integers(0, 100)), y=int(rng.integers(0, 100)),
                                     width=20, height=20, source=kind,
                                     score=0.0 if kind == "predicted" else 0.9))
    return Track(track_id=track_id, video_id="gaps", fps=30.0, label="drone", boxes=boxes)


def _layout(detected_lengths, run_lengths, start=0):
    """Interleave detected blocks and predicted runs: d0, r0, d1, r1, ..., dn"""
    blocks, t = [], start
    for i, d in enumerate(detected_lengths):
        if d:
            blocks.append(("detected", list(range(t, t + d))))
            t += d
        if i < len(run_lengths):
            blocks.append(("predicted", list(range(t, t + run_lengths[i]))))
            t += run_lengths[i]
    return blocks


def make_gap_tracks(config: SynthConfig, planted_runs: Optional[Sequence[int]] = None) -> List[GapTrackCase]:
    """Tracks with planted predicted-only runs and their expected segments

    With planted_runs, one track is built with detected blocks around each run;
    otherwise config.n_gap_tracks random tracks (possibly starting or ending
    with a predicted run) of at most max_gap_track_frames frames.
    """
    rng = np.random.default_rng([config.seed, 99])
    threshold = config.gap_threshold

    if planted_runs is not None:
        runs = list(planted_runs)
        detected = [int(rng.integers(5, 21)) for _ in range(len(runs) + 1)]
        blocks = _layout(detected, runs)
        return [GapTrackCase(_gap_track("planted", blocks, rng), _expected_segments(blocks, threshold), runs)]

    cases = []
    for i in range(config.n_gap_tracks):
        n_runs = int(rng.integers(0, 7))
        runs = [int(rng.integers(1, 2 * threshold + 1)) for _ in range(n_runs)]
        # Interior detected blocks keep runs apart; the ends may be empty
        detected = [int(rng.integers(1, 21)) for _ in range(n_runs + 1)]
        if n_runs:
            detected[0] = int(rng.integers(0, 21))
            detected[-1] = int(rng.integers(0, 21))

        while sum(detected) + sum(runs) > config.max_gap_track_frames and runs:
            runs.pop()
            detected.pop()
        if sum(detected) + sum(runs) == 0:
            detected[0] = 1

        blocks = _layout(detected, runs, start=int(rng.integers(0, 50)))
        cases.append(GapTrackCase(_gap_track(f"gap{i:04d}", blocks, rng),
                                  _expected_segments(blocks, threshold), runs))
    return cases


def write_gap_fixture(cases: List[GapTrackCase], out_root) -> Dict[str, str]:
    tracks_path = os.path.join(out_root, "gap_tracks.jsonl")
    expected_path = os.path.join(out_root, "gap_expected.json")
    write_tracks([case.track for case in cases], tracks_path)
    with open(expected_path, "w", encoding="utf-8") as f:
        json.dump({case.track.track_id: case.expected_segments for case in cases}, f)
    return {"tracks": tracks_path, "expected": expected_path}
