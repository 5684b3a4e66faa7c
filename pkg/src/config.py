"""
Run configuration
Defaults, per-family defaults, JSON config file, environment (.env) and
command-line flags merged into one RunConfig with per-key provenance
"""

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from models import FAMILIES, NECK_FAMILIES, FreezePolicy, ModelSpec, NeckSpec
from seqdataset import DEFAULT_GAP_THRESHOLD
from synthgen import SynthConfig
from training import FAMILY_BATCH_SIZES, TrainConfig, select_optimizer

load_dotenv()

CONFIG_FILE = "config.json"

DEFAULTS = {
    "paths": {
        "dataset_root": "data/dataset",
        "runs_root": "runs",
        "frames_root": None,
        "tracks": None,
        "splits": None,
    },
    "model": {
        "family": "resnet18_lstm",
        "base_width": 64,
        "num_classes": 2,
        "pretrained_weights": None,
        "neck_hidden_size": 64,
        "neck_num_layers": None,
        "neck_attention_heads": 8,
        "neck_feedforward_dim": 3584,
        "neck_dropout": 0.1,
        "neck_positional_encoding": True,
    },
    "freeze": {
        "unfrozen_backbone_blocks": 0,
        "neck_and_head_trainable": True,
    },
    "train": {
        "optimizer": None,
        "learning_rate": 1e-4,
        "epochs": 12,
        "warmup_epochs": 1,
        "decay_epoch": 8,
        "decay_factor": 0.1,
        "batch_size": None,
        "gamma": 2.0,
        "weight_decay": None,
        "momentum": 0.0,
        "seed": 0,
        "num_frames": 8,
        "clip_seconds": 0.5,
        "input_size": 224,
        "short_side_range": [250, 320],
        "workers": 0,
        "max_steps_per_epoch": None,
        "eval_batch_size": 32,
        "device": "cpu",
    },
    "dataset": {
        "gap_threshold": DEFAULT_GAP_THRESHOLD,
        "workers": None,
        "index_base": 0,
        "preview_clips": 0,
    },
    "synth": {f.name: f.default for f in fields(SynthConfig)},
    "eval": {
        "split": "val",
        "granularity": None,
        "windows": 1,
    },
}

ENV_OVERRIDES = {
    "SEQCLS_DATASET_ROOT": ("paths.dataset_root", str),
    "SEQCLS_RUNS_ROOT": ("paths.runs_root", str),
    "SEQCLS_DEVICE": ("train.device", str),
    "SEQCLS_WORKERS": ("dataset.workers", int),
}


def _family_defaults(family) -> Dict[str, Any]:
    optimizer = select_optimizer(family)
    values = {
        "train.optimizer": optimizer,
        "train.batch_size": FAMILY_BATCH_SIZES[family],
        "train.weight_decay": 0.01 if optimizer == "adamw" else 0.0,
    }
    if family in NECK_FAMILIES:
        values["model.neck_num_layers"] = 1 if NECK_FAMILIES[family] == "mlp" else 2
    return values


FAMILY_DEFAULTS = {family: _family_defaults(family) for family in FAMILIES}


class ConfigError(ValueError):
    pass


def flatten(nested: Dict, source="config") -> Dict[str, Any]:
    """{'train': {'epochs': 3}} -> {'train.epochs': 3}; rejects unknown sections and keys"""
    flat = {}
    for section, values in nested.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r} in {source} "
                              f"(valid: {', '.join(DEFAULTS)})")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} in {source} must be an object")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key} in {source}")
            flat[f"{section}.{key}"] = value
    return flat


def unflatten(flat: Dict[str, Any]) -> Dict[str, Dict]:
    nested = {section: {} for section in DEFAULTS}
    for dotted, value in flat.items():
        section, key = dotted.split(".", 1)
        nested[section][key] = value
    return nested


def read_config_file(path) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return flatten(data, source=path)


@dataclass
class RunConfig:
    values: Dict[str, Any]
    provenance: Dict[str, str] = field(default_factory=dict)

    def get(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key}")
        return self.values[key]

    def section(self, name) -> Dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def family(self):
        return self.values["model.family"]

    def model_spec(self) -> ModelSpec:
        model = self.section("model")
        neck = None
        if self.family in NECK_FAMILIES:
            neck = NeckSpec(
                kind=NECK_FAMILIES[self.family],
                hidden_size=model["neck_hidden_size"],
                num_layers=model["neck_num_layers"],
                attention_heads=model["neck_attention_heads"],
                feedforward_dim=model["neck_feedforward_dim"],
                dropout=model["neck_dropout"],
                positional_encoding=model["neck_positional_encoding"],
            )
        return ModelSpec(family=self.family, neck=neck, num_classes=model["num_classes"],
                         num_timesteps=self.values["train.num_frames"], base_width=model["base_width"],
                         pretrained_weights=model["pretrained_weights"])

    def freeze_policy(self) -> FreezePolicy:
        return FreezePolicy(**self.section("freeze"))

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig.for_family(self.family, **self.section("train"))
        except ValueError as e:
            raise ConfigError(f"invalid train settings: {e}") from e

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(**self.section("synth"))
        except ValueError as e:
            raise ConfigError(f"invalid synth settings: {e}") from e

    def dataset_settings(self) -> Dict[str, Any]:
        """Export settings; workers None means one per CPU"""
        dataset = self.section("dataset")
        if dataset["workers"] is None:
            dataset["workers"] = os.cpu_count() or 1
        for key, minimum in (("gap_threshold", 1), ("workers", 1), ("index_base", 0), ("preview_clips", 0)):
            if not isinstance(dataset[key], int) or dataset[key] < minimum:
                raise ConfigError(f"dataset.{key} must be an integer >= {minimum}, got {dataset[key]!r}")
        return dataset

    def to_dict(self) -> Dict:
        return {"config": unflatten(self.values), "provenance": dict(sorted(self.provenance.items()))}

    def config_hash(self) -> str:
        encoded = json.dumps(self.values, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha1(encoded).hexdigest()[:8]

    def create_run_dir(self, runs_root=None) -> str:
        """<runs_root>/<YYYYmmdd-HHMMSS>-<hash8>/ with the resolved config echoed into it"""
        runs_root = runs_root or self.values["paths.runs_root"]
        run_dir = os.path.join(runs_root, f"{time.strftime('%Y%m%d-%H%M%S')}-{self.config_hash()}")
        return self.write_config(run_dir)

    def write_config(self, directory) -> str:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, CONFIG_FILE), "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return directory


def load_config(path: Optional[str] = None, flags: Optional[Dict[str, tuple]] = None,
                environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """Resolve defaults -> family defaults -> file -> environment -> flags

    flags maps dotted keys to (value, flag_name); None values are skipped.
    """
    flags = {k: v for k, v in (flags or {}).items() if v[0] is not None}
    environ = os.environ if environ is None else environ
    for dotted in flags:
        section, _, key = dotted.partition(".")
        if key not in DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown config key {dotted}")

    values = flatten(copy.deepcopy(DEFAULTS), source="defaults")
    provenance = {key: "default" for key in values}

    file_values = read_config_file(path) if path else {}
    family = flags.get("model.family", (file_values.get("model.family", values["model.family"]),))[0]
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r} (valid: {', '.join(FAMILIES)})")
    for key, value in FAMILY_DEFAULTS[family].items():
        values[key] = value
        provenance[key] = f"family:{family}"

    for key, value in file_values.items():
        values[key] = value
        provenance[key] = f"file:{path}"

    for name, (key, convert) in ENV_OVERRIDES.items():
        if environ.get(name):
            try:
                values[key] = convert(environ[name])
            except ValueError as e:
                raise ConfigError(f"{name}={environ[name]!r}: {e}") from e
            provenance[key] = f"env:{name}"

    for key, (value, flag_name) in flags.items():
        values[key] = value
        provenance[key] = f"flag:{flag_name}"

    config = RunConfig(values, provenance)
    # Conversions validate eagerly so a bad value fails before any work starts
    config.model_spec()
    config.freeze_policy()
    config.train_config()
    config.synth_config()
    config.dataset_settings()
    return config
