"""
設定読み込みのテスト
"""

import json
import logging

import pytest

from renoscan.utils.config import (
    CONFIG_DIR,
    HogConfig,
    NormalizationConfig,
    PipelineConfig,
    deep_merge,
    hash_payload,
    load_config,
    load_settings,
)
from renoscan.exceptions import ValidationError


class TestPipelineConfig:
    def test_default_file_matches_dataclasses(self):
        with open(CONFIG_DIR / "default_params.json", "r", encoding="utf-8") as f:
            assert json.load(f) == PipelineConfig().to_dict()

    def test_load_with_override_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"svm": {"c": 10}, "cross_validation": {"k": 5}}), encoding="utf-8")
        cfg = load_config(path)
        assert cfg.svm.c == 10.0
        assert isinstance(cfg.svm.c, float)
        assert cfg.cross_validation.k == 5
        assert cfg.cross_validation.repeats == 100

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "absent.json")

    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="svm.gamma"):
            PipelineConfig.from_dict({"svm": {"gamma": 1.0}})

    def test_merged_keeps_other_sections(self):
        cfg = PipelineConfig().merged({"hog": {"channel": "g"}})
        assert cfg.hog.channel == "g"
        assert cfg.hog.cell_divisor == 10
        assert cfg.normalization == NormalizationConfig()

    def test_hash_tracks_values(self):
        base = PipelineConfig()
        assert base.config_hash() == PipelineConfig().config_hash()
        assert base.config_hash() != base.merged({"svm": {"eps": 0.01}}).config_hash()

    def test_stage_dict(self):
        stage = PipelineConfig().stage_dict("normalization")
        assert stage == {"normalization": {"n0": 227, "margin": 0.9, "scaling": "anisotropic"}}

    @pytest.mark.parametrize("section", [
        {"normalization": {"n0": 16}},
        {"normalization": {"scaling": "stretch"}},
        {"feature_maps": {"canny": {"low_frac": 0.5, "high_frac": 0.2}}},
        {"svm": {"c": -1}},
        {"cross_validation": {"k": 1}},
    ])
    def test_invalid_values(self, section):
        with pytest.raises(ValidationError):
            PipelineConfig().merged(section)

    def test_hog_cell_size(self):
        assert HogConfig().cell_size(227) == 22
        assert HogConfig().cell_size(64) == 6


class TestHelpers:
    def test_deep_merge(self):
        merged = deep_merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"c": 5}})
        assert merged == {"a": {"b": 1, "c": 5}, "d": 3}

    def test_hash_payload_ignores_key_order(self):
        assert hash_payload({"a": 1, "b": 2}) == hash_payload({"b": 2, "a": 1})

    def test_settings(self):
        settings = load_settings()
        assert settings.name == "renoscan"
        assert settings.max_threads >= 1
        assert settings.log_level == "INFO"

    def test_config_dir_without_files(self, tmp_path, monkeypatch, caplog):
        monkeypatch.setenv("RENOSCAN_CONFIG_DIR", str(tmp_path))
        with caplog.at_level(logging.DEBUG, logger="renoscan.utils.config"):
            cfg = load_config()
            settings = load_settings()
        assert cfg.to_dict() == PipelineConfig().to_dict()
        assert settings.log_level == "INFO"
        assert "default_params.json" in caplog.text
        assert "user_settings.json" in caplog.text

    def test_config_dir_override(self, tmp_path, monkeypatch):
        (tmp_path / "default_params.json").write_text(json.dumps({"svm": {"c": 3.0}}), encoding="utf-8")
        (tmp_path / "user_settings.json").write_text(
            json.dumps({"user_preferences": {"log_level": "WARNING"}}), encoding="utf-8")
        monkeypatch.setenv("RENOSCAN_CONFIG_DIR", str(tmp_path))
        assert load_config().svm.c == 3.0
        assert load_settings().log_level == "WARNING"
