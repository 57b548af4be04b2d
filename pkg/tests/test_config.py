import os

import pytest

from flowrestore.config import (
    CONFIG_PATH_ENV,
    ConfigError,
    load_run_config,
    parse_run_config,
    resolve_config_path,
)


def test_defaults_without_file():
    cfg, raw = load_run_config(None)
    assert raw == ""
    assert cfg.adapter.rank == 32
    assert cfg.sampler.epsilon == 0.05
    assert cfg.loss.alpha == 1.0
    assert cfg.generation.guidance_scale == 4.0
    assert cfg.generation.steps == 20
    assert cfg.restore.steps == 20
    assert cfg.restore.guidance_scale == 1.0
    assert cfg.degradation.scale == 4
    assert cfg.adapter_train.learning_rate == 1e-5


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="codec"):
        parse_run_config({"codec": {"zpatial_factor": 2}})
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_run_config({"degradation": {"stage1": {"blur": {"sigma": 1}}}})


def test_nested_tuples_coerced():
    cfg = parse_run_config(
        {"degradation": {"stage1": {"jpeg": {"quality_range": [10, 50]}}}}
    )
    assert cfg.degradation.stage1.jpeg.quality_range == (10, 50)


def test_section_value_validation_propagates():
    with pytest.raises(ConfigError):
        parse_run_config({"sampler": {"epsilon": 0.7}})


def test_yaml_file_roundtrip(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("adapter: {rank: 8}\nrestore: {steps: 7}\n")
    cfg, raw = load_run_config(str(path))
    assert cfg.adapter.rank == 8
    assert cfg.restore.steps == 7
    assert "rank: 8" in raw


def test_non_mapping_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_env_search_path(tmp_path, monkeypatch):
    sub = tmp_path / "configs"
    sub.mkdir()
    (sub / "run.yaml").write_text("adapter: {rank: 4}\n")
    monkeypatch.setenv(CONFIG_PATH_ENV, str(sub))
    assert resolve_config_path("run.yaml") == str(sub / "run.yaml")
    cfg, _ = load_run_config("run.yaml")
    assert cfg.adapter.rank == 4
    with pytest.raises(ConfigError):
        resolve_config_path("missing.yaml")
