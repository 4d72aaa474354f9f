from __future__ import annotations

import datetime
import json
import tempfile
from pathlib import Path

import pytest

from src.config import Config
from src.errors import DataError, ValidationError
from src.harness.experiment import ExperimentConfig
from src.predictor import ModelVariant, PredictorConfig


def test_defaults() -> None:
    config = Config.load()
    assert config["interval_minutes"] == 5
    assert config["k"] == 5
    assert config["lambda"] == 100.0
    assert config["t_max"] == 600
    assert config["train_fraction"] == 0.4
    assert config["steps"] == [1, 2, 3, 4, 5, 6]
    assert len(config["trial_hours"]) == 24
    assert set(Config.schema()["properties"]) == set(config)


def test_file_then_overrides() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir_s:
        path = Path(tmp_dir_s) / "config.json"
        path.write_text(json.dumps({"k": 3, "seed": 9}), encoding="utf-8")
        config = Config.load(path, {"seed": 4, "t_max": None})
    assert config["k"] == 3
    assert config["seed"] == 4
    assert config["t_max"] == 600
    assert config.replace(k=7)["k"] == 7


def test_invalid_configuration() -> None:
    with pytest.raises(ValidationError, match="k"):
        Config.load(overrides={"k": 0})
    with pytest.raises(ValidationError):
        Config.load(overrides={"unknown_key": 1})
    with pytest.raises(ValidationError, match="1440"):
        Config.load(overrides={"interval_minutes": 7})
    with pytest.raises(ValidationError):
        Config.load().replace(variants=["gp", "svm"])
    with tempfile.TemporaryDirectory() as tmp_dir_s:
        path = Path(tmp_dir_s) / "broken.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ValidationError):
            Config.load(path)
        with pytest.raises(DataError):
            Config.load(Path(tmp_dir_s) / "missing.json")


def test_typed_configurations() -> None:
    config = Config.load(
        overrides={"gp_starts": 2, "squared_kernel": True, "test_date": "2024-01-08"}
    )
    predictor = PredictorConfig.from_config(config, "lgr+")
    assert predictor.variant is ModelVariant.LGR_SIDE
    assert predictor.gp.starts == 2 and predictor.gp.squared
    assert predictor.nmf_config().lam == 100.0
    experiment = ExperimentConfig.from_config(config, output="out")
    assert experiment.variants == tuple(ModelVariant)
    assert experiment.test_date == datetime.date(2024, 1, 8)
    assert experiment.output == Path("out")
    experiment.validate()
    with pytest.raises(ValidationError):
        ExperimentConfig.from_config(config.replace(test_date="2024-01-06")).validate()
