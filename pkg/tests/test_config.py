"""Experiment config parsing: strict keys, section validation, YAML loading."""

from __future__ import annotations

import json

import pytest
import yaml

from geomark.config import (
    DEFAULT_PHASES,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    load_config,
)


def test_defaults_match_reference_experiment():
    cfg = ExperimentConfig()
    assert cfg.seed == 0
    assert cfg.phases == DEFAULT_PHASES
    assert cfg.backends == ("mlp", "voxel")
    assert cfg.message.n_bits == 48
    assert cfg.scene.n_views == 28
    assert cfg.scene.resolution == 64
    assert cfg.train.stage2_steps == 5000


def test_empty_dict_gives_defaults():
    cfg = config_from_dict({})
    assert cfg.seed == ExperimentConfig().seed
    assert cfg.field_mlp.kind == "mlp"
    assert cfg.field_voxel.kind == "voxel"


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown top-level"):
        config_from_dict({"sneed": 1})


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError, match="scene"):
        config_from_dict({"scene": {"n_view": 10}})


def test_section_must_be_mapping():
    with pytest.raises(ConfigError, match="mapping"):
        config_from_dict({"scene": 7})
    with pytest.raises(ConfigError, match="mapping"):
        config_from_dict([1, 2])


def test_bad_section_value_is_config_error():
    with pytest.raises(ConfigError, match="train"):
        config_from_dict({"train": {"patch_size": 8}})


def test_message_bits_must_be_positive_multiple_of_four():
    with pytest.raises(ConfigError, match="n_bits"):
        config_from_dict({"message": {"n_bits": 6}})
    with pytest.raises(ConfigError, match="n_bits"):
        config_from_dict({"message": {"n_bits": 0}})
    assert config_from_dict({"message": {"n_bits": 8}}).message.n_bits == 8


def test_unknown_phase_and_backend_rejected():
    with pytest.raises(ConfigError, match="phase"):
        config_from_dict({"phases": ["data", "teapot"]})
    with pytest.raises(ConfigError, match="backend"):
        config_from_dict({"backends": ["mlp", "hash"]})


def test_field_kind_is_forced_per_section():
    cfg = config_from_dict({"field_voxel": {"kind": "mlp", "grid_resolution": 32}})
    assert cfg.field_voxel.kind == "voxel"
    assert cfg.field_voxel.grid_resolution == 32


def test_background_and_channels_become_tuples():
    cfg = config_from_dict({
        "render": {"background": [1.0, 0.0, 0.0]},
        "extractor": {"channels": [16, 32]},
    })
    assert cfg.render.background == (1.0, 0.0, 0.0)
    assert cfg.extractor.channels == (16, 32)


def test_field_config_lookup():
    cfg = ExperimentConfig()
    assert cfg.field_config("mlp") is cfg.field_mlp
    assert cfg.field_config("voxel") is cfg.field_voxel
    with pytest.raises(ConfigError):
        cfg.field_config("octree")


def test_to_dict_is_json_serializable():
    d = ExperimentConfig().to_dict()
    json.dumps(d)
    assert d["phases"] == list(DEFAULT_PHASES)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")


def test_load_config_invalid_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("scene: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(p)


def test_load_config_round_trip(tmp_path):
    doc = {
        "seed": 11,
        "phases": ["data", "backends"],
        "backends": ["voxel"],
        "scene": {"n_views": 8, "resolution": 32, "ssaa": 2},
        "train": {"stage1_steps": 10, "stage2_steps": 5, "patch_size": 32},
    }
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(doc))
    cfg = load_config(p)
    assert cfg.seed == 11
    assert cfg.phases == ("data", "backends")
    assert cfg.backends == ("voxel",)
    assert cfg.scene.n_views == 8
    assert cfg.train.stage1_steps == 10


def test_load_config_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert cfg.seed == 0
