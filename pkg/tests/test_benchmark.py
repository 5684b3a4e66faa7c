import logging

import pytest
from logzero import logger

from benchmark import benchmark_family, relative_improvements


class RecordList(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.ERROR)
        self.records = []

    def emit(self, record):
        self.records.append(record)


def test_failed_family_is_reported_once(flat_dataset, tmp_path, capsys):
    manifest = flat_dataset({("train", "drone"): 2, ("train", "bird"): 2})
    flags = {"model.base_width": (4, "--base-width")}
    handler = RecordList()
    logger.addHandler(handler)
    try:
        result = benchmark_family(None, "resnet18_lstm", manifest, str(tmp_path), flags)
    finally:
        logger.removeHandler(handler)

    assert "empty val split" in result["error"]
    assert "ERROR" not in capsys.readouterr().out
    assert [r.getMessage().split(":")[0] for r in handler.records] == ["resnet18_lstm failed"]


def test_relative_improvements_skip_errors_and_zero_baseline():
    results = [
        {"family": "image_resnet18", "f1_bird": 0.0, "f1_macro": 0.4},
        {"family": "resnet18_lstm", "f1_bird": 0.5, "f1_macro": 0.6},
        {"family": "resnet18_mlp", "error": "boom"},
    ]
    improvements = relative_improvements(results)
    assert list(improvements) == ["resnet18_lstm"]
    assert improvements["resnet18_lstm"]["bird"] is None
    assert improvements["resnet18_lstm"]["macro"] == pytest.approx(50.0)
    assert relative_improvements(results[1:]) == {}
