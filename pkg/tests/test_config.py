"""Config parsing, shipped defaults, and environment interpolation."""

from __future__ import annotations

import pytest

from featforge.config import (
    ConfigError,
    config_from_dict,
    default_config,
    load_config,
    parse_flat_toml,
)


class TestParseFlatToml:
    def test_scalars_booleans_and_arrays(self):
        doc = parse_flat_toml(
            '\n'.join(
                [
                    '# a comment',
                    'name = "run one"',
                    'count = 3',
                    'rate = 0.75',
                    'tiny = 1e-6',
                    'flag = true',
                    'tags = ["a", "b"]',
                    'answer = 42  # trailing comment',
                    'hashy = "a # inside string"',
                ]
            )
        )
        assert doc == {
            "name": "run one",
            "count": 3,
            "rate": 0.75,
            "tiny": 1e-6,
            "flag": True,
            "tags": ["a", "b"],
            "answer": 42,
            "hashy": "a # inside string",
        }

    def test_rejects_bad_lines(self):
        with pytest.raises(ConfigError, match="expected key"):
            parse_flat_toml("just words")
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_flat_toml("x = unquoted")
        with pytest.raises(ConfigError, match="duplicate key"):
            parse_flat_toml("x = 1\nx = 2")
        with pytest.raises(ConfigError, match="nested"):
            parse_flat_toml('x = {"a": 1}')


class TestRunConfig:
    def test_shipped_defaults_match_reference_setup(self):
        config = default_config()
        assert config.n_example_sets == 16
        assert config.examples_per_set == 16
        assert config.n_feedback_rounds == 1
        assert config.lambda_ == 0.75
        assert config.annotation_size == 512
        assert config.train_per_class == 16
        assert config.proposer_temperature == 0.75
        assert config.proposer_top_p == 0.95
        assert config.helper_temperature == 0.0  # greedy for all other modules
        assert config.resolved_n_iter() == 256  # max(16^2, 128)
        assert config.proposer_params().greedy is False
        assert config.helper_params().greedy is True

    def test_lambda_key_maps_to_field(self):
        config = config_from_dict({"lambda": 0.5})
        assert config.lambda_ == 0.5
        assert config.to_doc()["lambda"] == 0.5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            config_from_dict({"lambada": 1})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"lambda": -0.1})
        with pytest.raises(ConfigError):
            config_from_dict({"n_example_sets": 0})
        with pytest.raises(ConfigError):
            config_from_dict({"proposer_mode": "psychic"})

    def test_env_interpolation(self, monkeypatch):
        monkeypatch.setenv("FF_TEST_MODEL", "m-7")
        config = config_from_dict({"model_id": "${FF_TEST_MODEL}"})
        assert config.model_id == "m-7"
        with pytest.raises(ConfigError, match="FF_MISSING_VAR"):
            config_from_dict({"model_id": "${FF_MISSING_VAR}"})

    def test_digest_stable_and_sensitive(self):
        a = config_from_dict({"seed": 1})
        b = config_from_dict({"seed": 1})
        c = config_from_dict({"seed": 2})
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_api_key_env_lookup(self, monkeypatch):
        monkeypatch.setenv("FF_KEY", "sk-abc")
        config = config_from_dict(
            {"endpoint_base_url": "http://lm", "model_id": "m", "api_key_env": "FF_KEY"}
        )
        assert config.endpoint().api_key == "sk-abc"


class TestLoadConfig:
    def test_dataset_path_resolved_and_checked(self, tmp_path):
        dataset = tmp_path / "data.jsonl"
        dataset.write_text('{"text": "t", "label": "a"}\n')
        cfg_file = tmp_path / "run.toml"
        cfg_file.write_text('dataset_path = "data.jsonl"\n')
        config = load_config(cfg_file)
        assert config.dataset_path == str(dataset)

    def test_missing_dataset_rejected_at_load(self, tmp_path):
        cfg_file = tmp_path / "run.toml"
        cfg_file.write_text('dataset_path = "missing.jsonl"\n')
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(cfg_file)
        assert load_config(cfg_file, check_files=False).dataset_path.endswith("missing.jsonl")

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="config file"):
            load_config(tmp_path / "nope.toml")
