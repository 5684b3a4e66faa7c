"""
Sequence dataset construction
Splits tracks at long predicted-only gaps, exports uniformly resized crop clips
and assembles the split manifest
"""

import concurrent.futures
import json
import math
import os
import shutil
import tempfile
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np
from logzero import logger
from tqdm import tqdm

from trackio import LABELS, FrameStoreError, Track, check_track_frames, crop_box, open_frame_store

DEFAULT_GAP_THRESHOLD = 10
SPLITS = ("train", "val")
META_FILE = "meta.json"
MANIFEST_FILE = "manifest.json"
MAX_WORKERS = 8


class ManifestError(ValueError):
    pass


@dataclass
class SequenceClip:
    clip_id: str
    video_id: str
    track_id: str
    label: str
    frame_indices: List[int]
    sources: List[str]
    target_size: Tuple[int, int]  # (width, height)
    fps: float
    frames: Optional[List[np.ndarray]] = field(default=None, repr=False)
    storage: Optional[str] = None

    def __len__(self):
        return len(self.frame_indices)

    def meta(self) -> Dict:
        return {
            "clip_id": self.clip_id,
            "video_id": self.video_id,
            "track_id": self.track_id,
            "label": self.label,
            "fps": self.fps,
            "target_size": list(self.target_size),
            "frame_indices": list(self.frame_indices),
            "sources": list(self.sources),
        }


@dataclass
class ClipEntry:
    clip_id: str
    video_id: str
    track_id: str
    label: str
    split: str
    num_frames: int
    target_size: Tuple[int, int]
    fps: float
    path: str  # relative to the dataset root


@dataclass
class DatasetManifest:
    clips: List[ClipEntry] = field(default_factory=list)
    splits: Dict[str, List[str]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    stats: Dict = field(default_factory=dict)
    root: Optional[str] = None

    def split_of(self, clip_id) -> Optional[str]:
        for split, ids in self.splits.items():
            if clip_id in ids:
                return split
        return None

    def entries(self, split) -> List[ClipEntry]:
        ids = set(self.splits.get(split, []))
        return [entry for entry in self.clips if entry.clip_id in ids]

    def clip_dir(self, entry: ClipEntry) -> str:
        return os.path.join(self.root or ".", entry.path)

    def to_dict(self) -> Dict:
        return {
            "clips": [asdict(entry) for entry in self.clips],
            "splits": {split: list(ids) for split, ids in self.splits.items()},
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, data, root=None):
        clips = []
        for raw in data.get("clips", []):
            raw = dict(raw)
            raw["target_size"] = tuple(raw["target_size"])
            clips.append(ClipEntry(**raw))
        return cls(clips=clips, splits={k: list(v) for k, v in data.get("splits", {}).items()},
                   stats=data.get("stats", {}), root=root)


def split_track(track: Track, gap_threshold=DEFAULT_GAP_THRESHOLD) -> List[List[int]]:
    """Segment a track's frames at runs of >= gap_threshold predicted-only boxes

    Shorter predicted runs stay inside their segment; long runs are dropped and
    close the current segment. Pass math.inf to disable splitting.
    """
    if gap_threshold is None:
        gap_threshold = math.inf
    if gap_threshold < 1:
        raise ValueError(f"gap_threshold must be >= 1, got {gap_threshold}")

    segments = []
    current = []
    run = []

    for box in track.boxes:
        if box.is_predicted:
            run.append(box.frame_index)
            continue

        if len(run) >= gap_threshold:
            if current:
                segments.append(current)
            current = []
        else:
            current.extend(run)
        run = []
        current.append(box.frame_index)

    if len(run) < gap_threshold:
        current.extend(run)
    if current:
        segments.append(current)

    return segments


def largest_box_size(track: Track) -> Tuple[int, int]:
    """(width, height) of the largest-area box; ties by width, then earliest frame"""
    best = max(track.boxes, key=lambda box: (box.area, box.width, -box.frame_index))
    return best.width, best.height


def resize_crop(crop: np.ndarray, target_size) -> np.ndarray:
    """Direct bilinear stretch to (width, height)"""
    width, height = target_size
    if crop.shape[1] == width and crop.shape[0] == height:
        return crop.copy()
    return cv2.resize(crop, (width, height), interpolation=cv2.INTER_LINEAR)


def make_clip_id(track: Track, segment_number) -> str:
    return f"{track.video_id}__{track.track_id}__{segment_number:03d}"


def export_clips(track: Track, store, gap_threshold=DEFAULT_GAP_THRESHOLD) -> List[SequenceClip]:
    """One clip per segment, every crop stretched to the track's largest box"""
    target_size = largest_box_size(track)
    boxes_by_frame = {box.frame_index: box for box in track.boxes}

    clips = []
    for number, segment in enumerate(split_track(track, gap_threshold)):
        frames = [resize_crop(crop_box(store, boxes_by_frame[index]), target_size) for index in segment]
        clips.append(SequenceClip(
            clip_id=make_clip_id(track, number),
            video_id=track.video_id,
            track_id=track.track_id,
            label=track.label,
            frame_indices=list(segment),
            sources=[boxes_by_frame[index].source for index in segment],
            target_size=target_size,
            fps=track.fps,
            frames=frames,
        ))
    return clips


def clip_relative_path(clip: SequenceClip, split) -> str:
    return os.path.join(split, clip.label, clip.clip_id)


def write_clip(clip: SequenceClip, dataset_root, split) -> str:
    """Store a clip as numbered lossless PNGs plus its metadata record"""
    if clip.frames is None:
        raise ManifestError(f"clip {clip.clip_id} has no frames in memory")

    clip_dir = os.path.join(dataset_root, clip_relative_path(clip, split))
    os.makedirs(clip_dir, exist_ok=True)

    for number, frame in enumerate(clip.frames, start=1):
        path = os.path.join(clip_dir, f"frame_{number:06d}.png")
        cv2.imwrite(path, cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))

    with open(os.path.join(clip_dir, META_FILE), "w", encoding="utf-8") as f:
        json.dump(clip.meta(), f, indent=2)

    clip.storage = clip_dir
    return clip_dir


def load_clip(clip_dir, with_frames=False) -> SequenceClip:
    """Read a stored clip's metadata (and optionally its frames)"""
    with open(os.path.join(clip_dir, META_FILE), "r", encoding="utf-8") as f:
        meta = json.load(f)

    clip = SequenceClip(
        clip_id=meta["clip_id"],
        video_id=meta["video_id"],
        track_id=meta["track_id"],
        label=meta["label"],
        frame_indices=meta["frame_indices"],
        sources=meta["sources"],
        target_size=tuple(meta["target_size"]),
        fps=meta["fps"],
        storage=clip_dir,
    )
    if with_frames:
        clip.frames = list(read_clip_frames(clip_dir, len(clip)))
    return clip


def read_clip_frames(clip_dir, num_frames, indices=None) -> np.ndarray:
    """Stored RGB frames as a T x H x W x 3 uint8 array"""
    if indices is None:
        indices = range(num_frames)

    frames = []
    for index in indices:
        path = os.path.join(clip_dir, f"frame_{index + 1:06d}.png")
        image = cv2.imread(path, cv2.IMREAD_COLOR)
        if image is None:
            raise ManifestError(f"missing clip frame {path}")
        frames.append(cv2.cvtColor(image, cv2.COLOR_BGR2RGB))
    return np.stack(frames)


def compute_stats(clips: List[ClipEntry]) -> Dict:
    """Per-split per-label clip and frame counts"""
    stats = {split: {label: {"clips": 0, "frames": 0} for label in LABELS} for split in SPLITS}
    for entry in clips:
        bucket = stats.setdefault(entry.split, {label: {"clips": 0, "frames": 0} for label in LABELS})
        bucket[entry.label]["clips"] += 1
        bucket[entry.label]["frames"] += entry.num_frames
    return stats


def build_manifest(clips: List[SequenceClip], split_map: Dict[str, str], root=None) -> DatasetManifest:
    """Assign every clip the split of its source video and compute stats"""
    entries = []
    splits = {split: [] for split in SPLITS}

    for clip in sorted(clips, key=lambda c: c.clip_id):
        split = split_map.get(clip.video_id)
        if split is None:
            raise ManifestError(f"video {clip.video_id!r} of clip {clip.clip_id} missing from split map")
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r} for video {clip.video_id!r}")

        entries.append(ClipEntry(
            clip_id=clip.clip_id,
            video_id=clip.video_id,
            track_id=clip.track_id,
            label=clip.label,
            split=split,
            num_frames=len(clip),
            target_size=tuple(clip.target_size),
            fps=clip.fps,
            path=clip_relative_path(clip, split),
        ))
        splits[split].append(clip.clip_id)

    return DatasetManifest(clips=entries, splits=splits, stats=compute_stats(entries), root=root)


def verify_manifest(manifest: DatasetManifest) -> List[str]:
    """Invariant violations of a manifest; empty when it is consistent"""
    violations = []

    counts = Counter(entry.clip_id for entry in manifest.clips)
    for clip_id, n in sorted(counts.items()):
        if n > 1:
            violations.append(f"duplicate clip entry: {clip_id}")

    assigned = Counter()
    for split, ids in manifest.splits.items():
        if split not in SPLITS:
            violations.append(f"unknown split {split!r}")
        assigned.update(ids)
    for clip_id, n in sorted(assigned.items()):
        if n > 1:
            violations.append(f"duplicate split assignment: {clip_id}")

    known = set(counts)
    for clip_id in sorted(set(assigned) - known):
        violations.append(f"split assignment for unknown clip: {clip_id}")

    for entry in manifest.clips:
        split = manifest.split_of(entry.clip_id)
        if split is None:
            violations.append(f"unassigned clip: {entry.clip_id}")
        elif split != entry.split:
            violations.append(f"split mismatch for {entry.clip_id}: entry {entry.split}, map {split}")
        if entry.label not in LABELS:
            violations.append(f"unknown label {entry.label!r} for {entry.clip_id}")

    if manifest.stats != compute_stats(manifest.clips):
        violations.append("stale stats")

    return violations


def save_manifest(manifest: DatasetManifest, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    os.replace(tmp_path, path)


def load_manifest(path) -> DatasetManifest:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return DatasetManifest.from_dict(data, root=os.path.dirname(os.path.abspath(path)))


def load_split_file(path) -> Dict[str, str]:
    """Per-video split list: JSON object {video_id: split} or 'video_id split' text lines"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"split file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        text = f.read()

    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for line_number, line in enumerate(text.splitlines(), start=1):
            parts = line.replace(",", " ").split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise ManifestError(f"{path}:{line_number}: expected 'video_id split'")
            data[parts[0]] = parts[1]

    if not isinstance(data, dict):
        raise ManifestError(f"{path}: split file must map video ids to splits")
    for video_id, split in data.items():
        if split not in SPLITS:
            raise ManifestError(f"{path}: unknown split {split!r} for video {video_id!r}")
    return {str(k): v for k, v in data.items()}


def export_batch_worker(tracks_batch, frames_root, dataset_root, split_map, gap_threshold, index_base=0):
    """Export and store the clips of a batch of tracks; returns clip metadata only"""
    results = []
    stores = {}

    try:
        for track in tracks_batch:
            if track.video_id not in stores:
                stores[track.video_id] = open_frame_store(frames_root, track.video_id, index_base)
            split = split_map[track.video_id]

            for clip in export_clips(track, stores[track.video_id], gap_threshold):
                write_clip(clip, dataset_root, split)
                clip.frames = None
                results.append(clip)
    finally:
        for store in stores.values():
            store.close()

    return results


def check_dataset_inputs(by_video, frames_root, index_base=0):
    """Open every video once and fail before export if any track frame is unresolvable"""
    problems = []
    for video_id in sorted(by_video):
        with open_frame_store(frames_root, video_id, index_base) as store:
            for track in by_video[video_id]:
                missing = check_track_frames(track, store)
                if missing:
                    problems.append(f"{video_id}/{track.track_id}: frames {missing[:5]}"
                                    f"{' ...' if len(missing) > 5 else ''}")
    if problems:
        raise FrameStoreError(f"{len(problems)} tracks reference missing frames: {'; '.join(problems[:5])}")


def _replaceable(dataset_root) -> bool:
    if not os.path.exists(dataset_root):
        return True
    return os.path.isdir(dataset_root) and (not os.listdir(dataset_root) or
                                            os.path.exists(os.path.join(dataset_root, MANIFEST_FILE)))


def build_dataset(tracks, frames_root, split_map, dataset_root, gap_threshold=DEFAULT_GAP_THRESHOLD,
                  workers=MAX_WORKERS, index_base=0) -> DatasetManifest:
    """Export every track's clips under dataset_root and write the manifest

    Clips are written to a staging directory next to dataset_root, which
    replaces dataset_root only once the manifest is complete.
    """
    start_time = time.time()
    dataset_root = os.path.abspath(dataset_root)

    unmapped = sorted({t.video_id for t in tracks if t.video_id not in split_map})
    if unmapped:
        raise ManifestError(f"videos missing from split map: {unmapped}")
    if not _replaceable(dataset_root):
        raise ManifestError(f"{dataset_root} exists and holds no {MANIFEST_FILE}; refusing to replace it")

    # Group by video so each worker opens a frame store once
    by_video = {}
    for track in tracks:
        by_video.setdefault(track.video_id, []).append(track)
    batches = [by_video[video_id] for video_id in sorted(by_video)]
    check_dataset_inputs(by_video, frames_root, index_base)

    parent = os.path.dirname(dataset_root)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=f".{os.path.basename(dataset_root)}.", suffix=".partial", dir=parent)
    os.chmod(staging, 0o755)
    try:
        clips = []
        if workers and workers > 1 and len(batches) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
                futures = [
                    executor.submit(export_batch_worker, batch, frames_root, staging,
                                    split_map, gap_threshold, index_base)
                    for batch in batches
                ]
                for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures),
                                   desc="export", leave=False):
                    clips.extend(future.result())
        else:
            for batch in tqdm(batches, desc="export", leave=False):
                clips.extend(export_batch_worker(batch, frames_root, staging, split_map,
                                                 gap_threshold, index_base))

        manifest = build_manifest(clips, split_map, root=dataset_root)
        save_manifest(manifest, os.path.join(staging, MANIFEST_FILE))
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    if os.path.exists(dataset_root):
        shutil.rmtree(dataset_root)
    os.replace(staging, dataset_root)

    logger.info(f"Exported {len(clips)} clips from {len(tracks)} tracks "
                f"in {time.time() - start_time:.2f}s")
    return manifest
