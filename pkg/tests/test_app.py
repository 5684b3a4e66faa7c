import json
import os

import pytest

import app
from app import REFERENCE_PARAMS, main, params_row


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--family", "--freeze", "--seed", "--resume", "--manifest"):
        assert flag in out


def test_invalid_family_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--family", "vgg"])
    assert info.value.code == 2
    assert "resnet18_lstm" in capsys.readouterr().err


def test_params_single_family(capsys):
    assert main(["params", "--family", "image_resnet18", "--freeze", "0"]) == 0
    out = capsys.readouterr().out
    assert "1,026" in out


def test_reference_rows_within_tolerance():
    assert len(REFERENCE_PARAMS) == 10
    rows = [params_row(family, unfrozen, expected=(total, trainable))
            for family, unfrozen, total, trainable in REFERENCE_PARAMS]
    failing = [(r["family"], r["unfrozen_blocks"]) for r in rows if not r["ok"]]
    assert failing == []
    assert rows[0]["trainable_params"] == 1_026
    assert rows[2]["trainable_params"] == 1_026


def test_build_dataset_missing_split_file(tiny_synth, tmp_path, capsys):
    code = main(["build-dataset", "--tracks", tiny_synth["tracks"], "--frames-root", tiny_synth["frames_root"],
                 "--split-file", str(tmp_path / "missing.json"), "--out", str(tmp_path / "ds"),
                 "--runs-root", str(tmp_path / "runs")])
    assert code == 1
    err = capsys.readouterr().err
    assert "split file not found" in err
    assert "hint:" in err


def test_build_dataset_from_synthetic_fixture(tiny_synth, tmp_path):
    args = ["build-dataset", "--tracks", tiny_synth["tracks"], "--frames-root", tiny_synth["frames_root"],
            "--split-file", tiny_synth["splits"], "--out", str(tmp_path / "ds"), "--workers", "1",
            "--runs-root", str(tmp_path / "runs")]
    assert main(args) == 0
    manifest = (tmp_path / "ds" / "manifest.json").read_bytes()
    with open(tiny_synth["manifest"], "rb") as f:
        assert manifest == f.read()

    assert main(args) == 0
    assert (tmp_path / "ds" / "manifest.json").read_bytes() == manifest

    run_dirs = os.listdir(tmp_path / "runs")
    assert run_dirs
    assert all(os.path.exists(tmp_path / "runs" / d / "config.json") for d in run_dirs)


def test_build_dataset_renders_previews(tiny_synth, tmp_path):
    assert main(["build-dataset", "--tracks", tiny_synth["tracks"], "--frames-root", tiny_synth["frames_root"],
                 "--split-file", tiny_synth["splits"], "--out", str(tmp_path / "ds"), "--workers", "1",
                 "--preview", "2", "--runs-root", str(tmp_path / "runs")]) == 0

    (run_dir,) = os.listdir(tmp_path / "runs")
    previews = [name for name in os.listdir(tmp_path / "runs" / run_dir) if name.startswith("preview_")]
    assert len(previews) == 2
    assert all(name.endswith(".png") for name in previews)
    with open(tmp_path / "runs" / run_dir / "config.json") as f:
        echoed = json.load(f)
    assert echoed["provenance"]["dataset.preview_clips"] == "flag:--preview"


def test_commands_dispatch_through_get_function(monkeypatch):
    application = app.App()
    assert application.get_function("params") == application.cmd_params
    with pytest.raises(KeyError):
        application.get_function("nope")

    monkeypatch.setattr(application, "get_function", lambda name: lambda args: 7 if name == "params" else 0)
    assert application.run(["params", "--all"]) == 7


def test_eval_missing_checkpoint(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--manifest", str(tmp_path / "m.json"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_synth_train_eval_end_to_end(tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps({
        "model": {"family": "resnet18_lstm", "base_width": 4, "neck_hidden_size": 8},
        "freeze": {"unfrozen_backbone_blocks": 5},
        "train": {"epochs": 2, "warmup_epochs": 0, "decay_epoch": 1, "batch_size": 4, "learning_rate": 0.01,
                  "input_size": 16, "short_side_range": [16, 18], "eval_batch_size": 8},
        "synth": {"n_train_per_class": 2, "n_val_per_class": 1, "frames_per_clip": 10,
                  "crop_size_range": [12, 14], "margin": 6, "n_gap_tracks": 5},
    }))
    runs = str(tmp_path / "runs")
    out = str(tmp_path / "synth")
    assert main(["synth", "--config", str(config), "--out", out, "--runs-root", runs]) == 0

    manifest = os.path.join(out, "dataset", "manifest.json")
    assert main(["train", "--config", str(config), "--manifest", manifest, "--runs-root", runs,
                 "--seed", "1"]) == 0
    train_runs = [os.path.join(runs, d) for d in os.listdir(runs)
                  if os.path.exists(os.path.join(runs, d, "best.pt"))]
    assert len(train_runs) == 1
    assert os.path.exists(os.path.join(train_runs[0], "run.log"))

    report_dir = str(tmp_path / "report")
    assert main(["eval", "--config", str(config), "--checkpoint", os.path.join(train_runs[0], "best.pt"),
                 "--manifest", manifest, "--out", report_dir]) == 0
    assert os.path.exists(os.path.join(report_dir, "config.json"))
    assert os.path.exists(os.path.join(report_dir, "run.log"))
    with open(os.path.join(report_dir, "metrics.json")) as f:
        (metrics,) = json.load(f)
    assert metrics["granularity"] == "clip"
    assert metrics["f1_macro"] == pytest.approx((metrics["f1_drone"] + metrics["f1_bird"]) / 2)

    assert main(["train", "--config", str(config), "--manifest", manifest,
                 "--resume", os.path.join(train_runs[0], "last.pt")]) == 0


def test_report_replot(tmp_path):
    results = [
        {"name": "ResNet18", "family": "image_resnet18", "modality": "image_resnet18", "split": "val",
         "granularity": "frame", "f1_drone": 0.8, "f1_bird": 0.2, "f1_macro": 0.5,
         "confusion": [[8, 2], [8, 2]], "n_samples": 20, "unfrozen_blocks": 0,
         "total_params": 11_177_538, "trainable_params": 1_026},
        {"name": "ResNet18 + LSTM neck", "family": "resnet18_lstm", "modality": "resnet18_lstm",
         "split": "val", "granularity": "clip", "f1_drone": 0.9, "f1_bird": 0.9, "f1_macro": 0.9,
         "confusion": [[9, 1], [1, 9]], "n_samples": 20, "unfrozen_blocks": 0,
         "total_params": 11_357_890, "trainable_params": 181_378},
    ]
    path = tmp_path / "results.json"
    path.write_text(json.dumps(results))
    assert main(["report", "--replot", str(path), "--runs-root", str(tmp_path / "runs")]) == 0

    (run_dir,) = os.listdir(tmp_path / "runs")
    table = (tmp_path / "runs" / run_dir / "table.txt").read_text()
    assert "+350.0%" in table and "+80.0%" in table
    assert os.path.getsize(tmp_path / "runs" / run_dir / "modality_comparison.png") > 0
