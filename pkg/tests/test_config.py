"""Config file parsing, validation, and round trips."""

import pytest

from quantlm.config import ExperimentConfig, load_config
from quantlm.exceptions import ConfigError


def write_cfg(tmp_path, text):
    p = tmp_path / "exp.cfg"
    p.write_text(text, encoding="utf-8")
    return p


class TestDefaults:
    def test_defaults_valid(self):
        cfg = ExperimentConfig()
        assert cfg.candidates == (1, 2, 4, 8)
        assert cfg.mode == "char"

    def test_all_positive_enforced(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(d_model=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(epochs=-1)
        with pytest.raises(ConfigError):
            ExperimentConfig(budget=0.0)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(d_model=30, n_heads=4)

    def test_candidate_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(candidates=(2, 1))
        with pytest.raises(ConfigError):
            ExperimentConfig(candidates=(4, 4))
        with pytest.raises(ConfigError):
            ExperimentConfig(candidates=(0, 2))
        with pytest.raises(ConfigError):
            ExperimentConfig(candidates=())

    def test_mode_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(mode="byte")

    def test_window_minimum(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(window=1)


class TestLoading:
    def test_partial_file_fills_defaults(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\nd_model = 16\n\n[train]\nseed = 9\n")
        cfg = load_config(p)
        assert cfg.d_model == 16
        assert cfg.seed == 9
        assert cfg.d_ff == ExperimentConfig().d_ff

    def test_every_type_parses(self, tmp_path):
        p = write_cfg(tmp_path, "\n".join([
            "[model]", "label = tiny", "tie_embeddings = true",
            "[quant]", "candidates = 2,4", "budget = 3.5",
            "quantize_embeddings = false",
            "manual_bits = layer0.attn=4,layer0.ffn=2",
            "[paths]", "mode = word", "workdir = out",
        ]))
        cfg = load_config(p)
        assert cfg.label == "tiny"
        assert cfg.tie_embeddings is True
        assert cfg.candidates == (2, 4)
        assert cfg.budget == 3.5
        assert cfg.quantize_embeddings is False
        assert cfg.manual_bits == {"layer0.attn": 4, "layer0.ffn": 2}
        assert cfg.mode == "word"

    def test_unknown_section_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[mystery]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\nwidth = 4\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_bad_value_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\nd_model = wide\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_bad_bool_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\ntie_embeddings = maybe\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_malformed_ini_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "no section here\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_keys_case_sensitive(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\nD_MODEL = 16\n")
        with pytest.raises(ConfigError):
            load_config(p)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        cfg = ExperimentConfig(d_model=16, n_heads=4, candidates=(1, 4),
                               manual_bits={"layer0.attn": 2}, seed=5,
                               label="rt", budget=1.5, mode="word")
        path = tmp_path / "rt.cfg"
        cfg.save(path)
        assert load_config(path) == cfg

    def test_default_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        path = tmp_path / "d.cfg"
        cfg.save(path)
        assert load_config(path) == cfg
