import json
import os

import pytest

from config import CONFIG_FILE, DEFAULTS, FAMILY_DEFAULTS, ConfigError, load_config
from models import FAMILIES


def write_config(tmp_path, data, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults_resolve_for_every_family():
    for family in FAMILIES:
        config = load_config(flags={"model.family": (family, "--family")}, environ={})
        train = config.train_config()
        assert train.optimizer == FAMILY_DEFAULTS[family]["train.optimizer"]
        assert train.batch_size == FAMILY_DEFAULTS[family]["train.batch_size"]
        assert config.model_spec().family == family


def test_neck_defaults():
    mlp = load_config(flags={"model.family": ("resnet18_mlp", "--family")}, environ={}).model_spec()
    assert mlp.neck.num_layers == 1
    transformer = load_config(flags={"model.family": ("resnet18_transformer", "--family")},
                              environ={}).model_spec()
    assert transformer.neck.feedforward_dim == 3584 and transformer.neck.num_layers == 2
    assert load_config(environ={}).model_spec().num_timesteps == DEFAULTS["train"]["num_frames"]


def test_precedence_and_provenance(tmp_path):
    path = write_config(tmp_path, {"train": {"epochs": 20, "seed": 3}, "paths": {"runs_root": "from_file"}})
    config = load_config(path, flags={"train.seed": (9, "--seed"), "train.epochs": (None, "--epochs")},
                         environ={"SEQCLS_RUNS_ROOT": "from_env"})

    assert config.get("train.epochs") == 20
    assert config.provenance["train.epochs"] == f"file:{path}"
    assert config.get("train.seed") == 9
    assert config.provenance["train.seed"] == "flag:--seed"
    assert config.get("paths.runs_root") == "from_env"
    assert config.provenance["paths.runs_root"] == "env:SEQCLS_RUNS_ROOT"
    assert config.provenance["train.gamma"] == "default"
    assert config.provenance["train.optimizer"] == "family:resnet18_lstm"


def test_file_overrides_family_defaults(tmp_path):
    path = write_config(tmp_path, {"model": {"family": "image_resnet18"}, "train": {"batch_size": 4}})
    config = load_config(path, environ={})
    assert config.train_config().batch_size == 4
    assert config.train_config().optimizer == "adamw"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train.epochz"):
        load_config(write_config(tmp_path, {"train": {"epochz": 3}}), environ={})
    with pytest.raises(ConfigError, match="optim"):
        load_config(write_config(tmp_path, {"optim": {}}), environ={})
    with pytest.raises(ConfigError):
        load_config(flags={"train.nope": (1, "--nope")}, environ={})


def test_invalid_values_fail_early(tmp_path):
    with pytest.raises(ConfigError, match="unknown family"):
        load_config(write_config(tmp_path, {"model": {"family": "vgg"}}), environ={})
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, {"train": {"epochs": 5, "decay_epoch": 8}}), environ={})


def test_missing_config_file():
    with pytest.raises(FileNotFoundError, match="config file not found"):
        load_config("/nonexistent/config.json", environ={})


def test_run_dir_echoes_config(tmp_path):
    config = load_config(flags={"train.seed": (5, "--seed")}, environ={})
    run_dir = config.create_run_dir(str(tmp_path))
    assert os.path.basename(run_dir).endswith(config.config_hash())
    with open(os.path.join(run_dir, CONFIG_FILE)) as f:
        echoed = json.load(f)
    assert echoed["config"]["train"]["seed"] == 5
    assert echoed["provenance"]["train.seed"] == "flag:--seed"


def test_hash_depends_on_values():
    a = load_config(environ={})
    b = load_config(flags={"train.seed": (1, "--seed")}, environ={})
    assert a.config_hash() == load_config(environ={}).config_hash()
    assert a.config_hash() != b.config_hash()


def test_shipped_configs_load():
    root = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs")
    for name in ("default.json", "tiny.json"):
        config = load_config(os.path.join(root, name), environ={})
        config.train_config()
        config.synth_config()


def test_dataset_settings_layering(tmp_path):
    path = write_config(tmp_path, {"dataset": {"gap_threshold": 5, "index_base": 1}})
    config = load_config(path, flags={"dataset.gap_threshold": (7, "--gap-threshold")},
                         environ={"SEQCLS_WORKERS": "3"})
    settings = config.dataset_settings()

    assert settings == {"gap_threshold": 7, "workers": 3, "index_base": 1, "preview_clips": 0}
    assert config.provenance["dataset.gap_threshold"] == "flag:--gap-threshold"
    assert config.provenance["dataset.index_base"] == f"file:{path}"
    assert config.provenance["dataset.workers"] == "env:SEQCLS_WORKERS"

    run_dir = config.create_run_dir(str(tmp_path / "runs"))
    with open(os.path.join(run_dir, CONFIG_FILE)) as f:
        echoed = json.load(f)
    assert echoed["config"]["dataset"]["gap_threshold"] == 7
    assert echoed["provenance"]["dataset.gap_threshold"] == "flag:--gap-threshold"


def test_dataset_workers_default_to_cpu_count():
    settings = load_config(environ={}).dataset_settings()
    assert settings["workers"] == (os.cpu_count() or 1)
    assert settings["gap_threshold"] == DEFAULTS["dataset"]["gap_threshold"]


@pytest.mark.parametrize("dataset", [{"gap_threshold": 0}, {"workers": 0}, {"index_base": -1},
                                     {"preview_clips": "two"}])
def test_invalid_dataset_settings_rejected(tmp_path, dataset):
    with pytest.raises(ConfigError, match="dataset"):
        load_config(write_config(tmp_path, {"dataset": dataset}), environ={})


def test_invalid_worker_env_rejected():
    with pytest.raises(ConfigError, match="SEQCLS_WORKERS"):
        load_config(environ={"SEQCLS_WORKERS": "many"})
