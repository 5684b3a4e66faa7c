import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from seqdataset import SequenceClip, build_manifest, save_manifest, write_clip
from synthgen import SynthConfig, generate
from trackio import BoundingBox, Track


def make_track(sources, label="drone", video_id="v1", track_id="1", start=0, fps=30.0, size=(10, 10)):
    """Track with one box per entry of sources ('d' or 'p'), consecutive frames"""
    boxes = []
    for i, s in enumerate(sources):
        source = "predicted" if s == "p" else "detected"
        boxes.append(BoundingBox(frame_index=start + i, x=0, y=0, width=size[0], height=size[1],
                                 source=source, score=0.0 if source == "predicted" else 0.9))
    return Track(track_id=track_id, video_id=video_id, fps=fps, label=label, boxes=boxes)


@pytest.fixture
def track_factory():
    return make_track


def write_flat_clips(root, counts, num_frames=4, size=8, fps=30.0):
    """Clips whose pixels encode the label: drone frames black, bird frames white

    counts maps (split, label) to a number of clips.
    """
    clips, split_map = [], {}
    for (split, label), n in sorted(counts.items()):
        value = 0 if label == "drone" else 255
        for i in range(n):
            video_id = f"{split}_{label}_{i:03d}"
            clip = SequenceClip(
                clip_id=f"{video_id}__1__000", video_id=video_id, track_id="1", label=label,
                frame_indices=list(range(num_frames)), sources=["detected"] * num_frames,
                target_size=(size, size), fps=fps,
                frames=[np.full((size, size, 3), value, dtype=np.uint8) for _ in range(num_frames)],
            )
            write_clip(clip, root, split)
            clips.append(clip)
            split_map[video_id] = split
    manifest = build_manifest(clips, split_map, root=str(root))
    save_manifest(manifest, os.path.join(root, "manifest.json"))
    return manifest


@pytest.fixture
def flat_dataset(tmp_path):
    def build(counts, **kwargs):
        return write_flat_clips(str(tmp_path / "flat"), counts, **kwargs)
    return build


TINY_SYNTH = dict(n_train_per_class=3, n_val_per_class=2, frames_per_clip=12, crop_size_range=(12, 14),
                  margin=6, n_gap_tracks=20, seed=3)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return generate(SynthConfig(**TINY_SYNTH), str(out))
