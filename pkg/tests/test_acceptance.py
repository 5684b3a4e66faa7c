import os

import pytest

import evaluation
import training
from config import load_config
from models import build_model
from seqdataset import build_dataset, load_split_file
from synthgen import generate
from trackio import load_tracks

TINY_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs", "tiny.json")
CHALLENGE_ENV = "SEQCLS_CHALLENGE_ROOT"


def train_and_score(family, manifest, run_dir):
    run_config = load_config(TINY_CONFIG, {"model.family": (family, "--family")}, environ={})
    config = run_config.train_config()
    model = build_model(run_config.model_spec(), run_config.freeze_policy())
    training.train(model, manifest, config, run_dir)
    best, _, _ = training.load_checkpoint(os.path.join(run_dir, training.BEST_CHECKPOINT))
    return evaluation.evaluate(best, manifest, "val", batch_size=config.eval_batch_size,
                               input_size=config.input_size, num_frames=config.num_frames,
                               clip_seconds=config.clip_seconds)


@pytest.mark.slow
def test_motion_separates_what_single_frames_cannot(tmp_path):
    synth = load_config(TINY_CONFIG, environ={}).synth_config()
    outputs = generate(synth, str(tmp_path / "synth"), workers=os.cpu_count() or 1)
    manifest = outputs["manifest_object"]

    sequence = train_and_score("resnet18_lstm", manifest, str(tmp_path / "lstm"))
    image = train_and_score("image_resnet18", manifest, str(tmp_path / "image"))

    assert sequence.f1_macro >= 0.90
    assert image.f1_macro <= 0.60


@pytest.mark.slow
def test_challenge_dataset_counts(tmp_path):
    root = os.environ.get(CHALLENGE_ENV)
    if not root or not os.path.isdir(root):
        pytest.skip(f"challenge videos not available; set {CHALLENGE_ENV} to a directory with "
                    "tracks.jsonl, splits.txt and frames/")

    tracks = load_tracks(os.path.join(root, "tracks.jsonl"))
    split_map = load_split_file(os.path.join(root, "splits.txt"))
    manifest = build_dataset(tracks, os.path.join(root, "frames"), split_map, str(tmp_path / "dataset"))

    clips = {(split, label): manifest.stats[split][label]["clips"]
             for split in ("train", "val") for label in ("drone", "bird")}
    assert clips == {("train", "drone"): 153, ("val", "drone"): 60, ("train", "bird"): 92, ("val", "bird"): 20}
    frames = {split: sum(v["frames"] for v in manifest.stats[split].values()) for split in ("train", "val")}
    assert frames == {"train": 48871, "val": 15526}
