"""
Tracker output I/O
Line-delimited track files, frame stores and box cropping
"""

import json
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import cv2
import numpy as np
from logzero import logger

LABELS = ("drone", "bird")
SOURCES = ("detected", "predicted")

VIDEO_EXTENSIONS = (".mp4", ".avi", ".mkv", ".mov")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# Canonical key order of a written record
RECORD_KEYS = ("video_id", "track_id", "fps", "label", "boxes")


class TrackFormatError(ValueError):
    """Malformed track record; carries the 1-based line number when known"""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)


class FrameStoreError(LookupError):
    pass


class CropError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    frame_index: int
    x: int
    y: int
    width: int
    height: int
    source: str = "detected"
    score: float = 1.0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def is_predicted(self) -> bool:
        return self.source == "predicted"


@dataclass
class Track:
    track_id: str
    video_id: str
    fps: float
    label: str
    boxes: List[BoundingBox] = field(default_factory=list)

    @property
    def frame_indices(self) -> List[int]:
        return [box.frame_index for box in self.boxes]

    def __len__(self):
        return len(self.boxes)


def validate_track(track: Track, line_number=None):
    """Check every Track and BoundingBox invariant, raising TrackFormatError"""
    if not track.boxes:
        raise TrackFormatError(f"track {track.track_id} has no boxes", line_number)
    if track.label not in LABELS:
        raise TrackFormatError(
            f"unknown label {track.label!r} (expected one of {', '.join(LABELS)})", line_number)
    if not (track.fps > 0):
        raise TrackFormatError(f"fps must be positive, got {track.fps}", line_number)

    previous = None
    for box in track.boxes:
        if box.frame_index < 0:
            raise TrackFormatError(f"negative frame index {box.frame_index}", line_number)
        if box.width <= 0 or box.height <= 0:
            raise TrackFormatError(
                f"nonpositive box dims {box.width}x{box.height} at frame {box.frame_index}", line_number)
        if box.source not in SOURCES:
            raise TrackFormatError(f"unknown box source {box.source!r}", line_number)
        if not (0.0 <= box.score <= 1.0):
            raise TrackFormatError(f"score {box.score} outside [0, 1]", line_number)
        if previous is not None:
            if box.frame_index == previous:
                raise TrackFormatError(f"duplicate frame {box.frame_index}", line_number)
            if box.frame_index < previous:
                raise TrackFormatError(
                    f"unsorted frames ({box.frame_index} after {previous})", line_number)
        previous = box.frame_index


def _as_int(value, name, line_number):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TrackFormatError(f"field {name!r} must be numeric, got {value!r}", line_number)
    # Tracker coordinates arrive as floats; boxes live on the pixel grid
    return int(round(value))


def _parse_box(raw, line_number) -> BoundingBox:
    if not isinstance(raw, dict):
        raise TrackFormatError("box entries must be objects", line_number)
    missing = [key for key in ("frame", "x", "y", "w", "h") if key not in raw]
    if missing:
        raise TrackFormatError(f"box missing fields {missing}", line_number)

    source = raw.get("source", "detected")
    score = raw.get("score", 1.0 if source == "detected" else 0.0)
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise TrackFormatError(f"score must be numeric, got {score!r}", line_number)

    return BoundingBox(
        frame_index=_as_int(raw["frame"], "frame", line_number),
        x=_as_int(raw["x"], "x", line_number),
        y=_as_int(raw["y"], "y", line_number),
        width=_as_int(raw["w"], "w", line_number),
        height=_as_int(raw["h"], "h", line_number),
        source=source,
        score=float(score),
    )


def parse_track_record(record, line_number=None) -> Track:
    """Build a validated Track from one decoded record"""
    if not isinstance(record, dict):
        raise TrackFormatError("record must be an object", line_number)
    missing = [key for key in RECORD_KEYS if key not in record]
    if missing:
        raise TrackFormatError(f"record missing fields {missing}", line_number)
    if not isinstance(record["boxes"], list):
        raise TrackFormatError("'boxes' must be a list", line_number)

    fps = record["fps"]
    if isinstance(fps, bool) or not isinstance(fps, (int, float)):
        raise TrackFormatError(f"fps must be numeric, got {fps!r}", line_number)

    track = Track(
        track_id=str(record["track_id"]),
        video_id=str(record["video_id"]),
        fps=float(fps),
        label=str(record["label"]).lower(),
        boxes=[_parse_box(raw, line_number) for raw in record["boxes"]],
    )
    validate_track(track, line_number)
    return track


def load_tracks(path) -> List[Track]:
    """Load and validate every track of a line-delimited track file"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"track file not found: {path}")

    tracks = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TrackFormatError(f"malformed record ({e.msg})", line_number) from e
            tracks.append(parse_track_record(record, line_number))

    logger.info(f"Loaded {len(tracks)} tracks from {path}")
    return tracks


def track_to_record(track: Track) -> Dict:
    """Canonical record with normalized field order"""
    return {
        "video_id": track.video_id,
        "track_id": track.track_id,
        "fps": track.fps,
        "label": track.label,
        "boxes": [
            {
                "frame": box.frame_index,
                "x": box.x,
                "y": box.y,
                "w": box.width,
                "h": box.height,
                "source": box.source,
                "score": box.score,
            }
            for box in track.boxes
        ],
    }


def write_tracks(tracks: Iterable[Track], path):
    """Write tracks one record per line"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for track in tracks:
            f.write(json.dumps(track_to_record(track)) + "\n")


class VideoFrameStore:
    """Random access to the RGB frames of one video"""

    def __init__(self, video_id):
        self.video_id = video_id

    @property
    def frame_count(self) -> int:
        raise NotImplementedError

    def get_frame(self, frame_index) -> np.ndarray:
        raise NotImplementedError

    def has_frame(self, frame_index) -> bool:
        return 0 <= frame_index < self.frame_count

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ArrayFrameStore(VideoFrameStore):
    """In-memory frames, used by the synthetic generator and tests"""

    def __init__(self, video_id, frames):
        super().__init__(video_id)
        self.frames = frames

    @property
    def frame_count(self):
        return len(self.frames)

    def get_frame(self, frame_index):
        if not self.has_frame(frame_index):
            raise FrameStoreError(f"{self.video_id}: frame {frame_index} missing")
        return np.asarray(self.frames[frame_index])


class ImageDirFrameStore(VideoFrameStore):
    """Directory of zero-padded numbered images; the file number minus index_base is the frame index"""

    def __init__(self, video_id, directory, index_base=0):
        super().__init__(video_id)
        self.directory = directory
        self.index_base = index_base
        self.files = {}

        for name in os.listdir(directory):
            stem, ext = os.path.splitext(name)
            if ext.lower() not in IMAGE_EXTENSIONS:
                continue
            match = re.search(r"(\d+)$", stem)
            if match:
                self.files[int(match.group(1)) - index_base] = os.path.join(directory, name)

        if not self.files:
            raise FrameStoreError(f"{video_id}: no numbered images in {directory}")

    @property
    def frame_count(self):
        return max(self.files) + 1

    def has_frame(self, frame_index):
        return frame_index in self.files

    def get_frame(self, frame_index):
        path = self.files.get(frame_index)
        if path is None:
            raise FrameStoreError(f"{self.video_id}: frame {frame_index} missing")
        image = cv2.imread(path, cv2.IMREAD_COLOR)
        if image is None:
            raise FrameStoreError(f"{self.video_id}: cannot decode {path}")
        return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


class VideoFileFrameStore(VideoFrameStore):
    """Video container decoded by index; reads are serialized through a lock"""

    def __init__(self, video_id, path):
        super().__init__(video_id)
        self.path = path
        self.capture = cv2.VideoCapture(path)
        if not self.capture.isOpened():
            raise FrameStoreError(f"{video_id}: cannot open video {path}")
        self._count = int(self.capture.get(cv2.CAP_PROP_FRAME_COUNT))
        self._next_index = 0
        self._lock = threading.Lock()

    @property
    def frame_count(self):
        return self._count

    def get_frame(self, frame_index):
        if not self.has_frame(frame_index):
            raise FrameStoreError(f"{self.video_id}: frame {frame_index} missing")
        with self._lock:
            # Sequential reads avoid a seek per frame
            if frame_index != self._next_index:
                self.capture.set(cv2.CAP_PROP_POS_FRAMES, frame_index)
            ok, image = self.capture.read()
            self._next_index = frame_index + 1
        if not ok:
            raise FrameStoreError(f"{self.video_id}: failed to decode frame {frame_index}")
        return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)

    def close(self):
        self.capture.release()


def open_frame_store(frames_root, video_id, index_base=0) -> VideoFrameStore:
    """Find the frames of a video under frames_root: a numbered image directory or a video file"""
    directory = os.path.join(frames_root, video_id)
    if os.path.isdir(directory):
        return ImageDirFrameStore(video_id, directory, index_base=index_base)

    for ext in VIDEO_EXTENSIONS:
        path = directory + ext
        if os.path.exists(path):
            return VideoFileFrameStore(video_id, path)

    raise FrameStoreError(f"no frames for video {video_id!r} under {frames_root}")


def check_track_frames(track: Track, store: VideoFrameStore) -> Optional[List[int]]:
    """Frame indices referenced by the track that the store cannot resolve"""
    missing = [index for index in track.frame_indices if not store.has_frame(index)]
    return missing or None


def crop_box(store: VideoFrameStore, box: BoundingBox) -> np.ndarray:
    """Crop a box from its frame; out-of-frame regions are zero-padded"""
    frame = store.get_frame(box.frame_index)
    frame_h, frame_w = frame.shape[:2]

    x0 = max(box.x, 0)
    y0 = max(box.y, 0)
    x1 = min(box.x + box.width, frame_w)
    y1 = min(box.y + box.height, frame_h)
    if x0 >= x1 or y0 >= y1:
        raise CropError(
            f"{store.video_id}: box ({box.x},{box.y},{box.width},{box.height}) "
            f"outside {frame_w}x{frame_h} frame {box.frame_index}")

    crop = np.zeros((box.height, box.width) + frame.shape[2:], dtype=frame.dtype)
    crop[y0 - box.y:y1 - box.y, x0 - box.x:x1 - box.x] = frame[y0:y1, x0:x1]
    return crop
