"""Config tree: defaults, file loading, overrides, and the mode audit diff."""

import json

import pytest

from clvc.config import (
    MODE_DPF,
    MODE_MPPG,
    PipelineConfig,
    config_diff,
    load_config,
    toy_config,
)


class TestDefaults:
    def test_full_scale_dims(self):
        cfg = PipelineConfig()
        assert cfg.features.stacked_dim == 600
        assert cfg.features.hop_samples == 240
        assert cfg.features.win_samples == 768
        assert cfg.acoustic.hidden_per_direction == 512
        assert cfg.acoustic.dpf_dim == 1024
        assert cfg.content_dim == 72

    def test_dpf_content_dim(self):
        cfg = PipelineConfig(mode=MODE_DPF)
        assert cfg.content_dim == 1024 + 2

    def test_hidden_total_switch(self):
        cfg = PipelineConfig()
        cfg.acoustic.hidden_is_per_direction = False
        assert cfg.acoustic.hidden_per_direction == 256
        assert cfg.acoustic.dpf_dim == 512

    def test_invalid_mode(self):
        with pytest.raises(ValueError, match="mode"):
            PipelineConfig(mode="ppg").content_dim


class TestLoadConfig:
    def test_defaults_when_no_file(self):
        cfg = load_config(None)
        assert cfg.mode == MODE_MPPG
        assert cfg.seed == 1234

    def test_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({
            "mode": "dpf",
            "seed": 99,
            "acoustic": {"hidden_size": 64, "num_layers": 2},
        }))
        cfg = load_config(path)
        assert cfg.mode == MODE_DPF
        assert cfg.seed == 99
        assert cfg.acoustic.hidden_size == 64
        assert cfg.acoustic.num_layers == 2
        # untouched sections keep defaults
        assert cfg.conversion.window_left == 30

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("mode: mppg\nfeatures:\n  sample_rate: 16000\n")
        cfg = load_config(path)
        assert cfg.features.sample_rate == 16000

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"acoustic": {"hiden_size": 64}}))
        with pytest.raises(ValueError, match="hiden_size"):
            load_config(path)

    def test_overrides_after_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 5}))
        cfg = load_config(path, overrides={"seed": 11, "mode": "dpf"})
        assert cfg.seed == 11
        assert cfg.mode == MODE_DPF

    def test_round_trip_through_to_dict(self, tmp_path):
        cfg = toy_config(mode=MODE_DPF)
        path = tmp_path / "dump.json"
        path.write_text(json.dumps(cfg.to_dict()))
        reloaded = load_config(path)
        assert config_diff(cfg, reloaded) == []


class TestConfigDiff:
    def test_identical_configs_empty_diff(self):
        assert config_diff(PipelineConfig(), PipelineConfig()) == []

    def test_mode_pair_differs_only_in_expected_paths(self):
        a = toy_config(mode=MODE_MPPG)
        b = toy_config(mode=MODE_DPF)
        diff = config_diff(a, b)
        assert set(diff) == {"mode", "conversion.content_dim"}

    def test_detects_nested_change(self):
        a = PipelineConfig()
        b = PipelineConfig()
        b.conversion.window_left = 10
        assert "conversion.window_left" in config_diff(a, b)


class TestToyConfig:
    def test_toy_is_small(self):
        cfg = toy_config()
        assert cfg.acoustic.hidden_size < 128
        assert cfg.features.sample_rate == 16000
        assert cfg.conversion.speaker_dim == cfg.speaker.embedding_dim

    def test_toy_content_dims(self):
        mppg = toy_config(mode=MODE_MPPG)
        dpf = toy_config(mode=MODE_DPF)
        assert mppg.content_dim == mppg.acoustic.num_phonemes + 2
        assert dpf.content_dim == 2 * dpf.acoustic.hidden_per_direction + 2
