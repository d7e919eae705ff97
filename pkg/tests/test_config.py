"""Tests for config loading, overrides and the resolved-config echo."""

import json
import re
from pathlib import Path

import pytest

from mmdr.config import (
    DIMS_PRESETS,
    WORKERS_ENV,
    ModelConfig,
    RunConfig,
    SyntheticGenConfig,
    TrainConfig,
    config_digest,
    eval_workers,
    load_resolved_config,
    load_run_config,
    parse_override,
    save_resolved_config,
)
from mmdr.errors import ConfigError
from mmdr.models import Protocol


class TestDefaults:
    def test_run_config_defaults(self):
        config = RunConfig()
        assert config.model.temperature == 0.01
        assert config.model.dropout == 0.2
        assert config.model.max_len == 128
        assert config.train.batch_size == 64
        assert config.train.learning_rate == 1e-3
        assert config.eval.pool_size == 50
        assert config.eval.protocols == list(Protocol)

    def test_epoch_budget(self):
        epochs = TrainConfig().epochs
        assert (epochs.intent, epochs.text, epochs.image, epochs.joint) == (10, 10, 20, 20)

    def test_reference_learning_rate(self):
        assert TrainConfig(lr_preset="reference").learning_rate == 5e-5
        assert TrainConfig(lr_preset="reference", base_lr=0.1).learning_rate == 0.1

    def test_alias_names_the_same_rate(self):
        assert TrainConfig(lr_preset="paper").learning_rate == TrainConfig(lr_preset="reference").learning_rate

    def test_size_presets(self):
        assert ModelConfig().resolved_dims == DIMS_PRESETS["small"]
        assert ModelConfig(size="large").resolved_dims.d_joint == 64


class TestSyntheticGenConfig:
    def test_default_intent_is_topic_parity(self):
        config = SyntheticGenConfig()
        assert config.intent_probability(0) == 1.0
        assert config.intent_probability(3) == 0.0

    def test_explicit_prior(self):
        config = SyntheticGenConfig(n_topics=2, intent_prior=[0.3, 0.9])
        assert config.intent_probability(1) == 0.9

    def test_prior_length(self):
        with pytest.raises(ValueError):
            SyntheticGenConfig(n_topics=3, intent_prior=[0.5, 0.5])

    def test_inverted_range(self):
        with pytest.raises(ValueError):
            SyntheticGenConfig(utterance_tokens=(5, 3))

    def test_bank_must_cover_topics(self):
        with pytest.raises(ValueError):
            SyntheticGenConfig(n_topics=8, image_bank_size=4)


class TestParseOverride:
    def test_numbers_keep_their_type(self):
        assert parse_override("train.batch_size=32") == ("train.batch_size", 32)
        assert parse_override("model.temperature=0.05") == ("model.temperature", 0.05)

    def test_lists(self):
        assert parse_override("data.image_dims=[4, 4, 3]") == ("data.image_dims", [4, 4, 3])

    def test_whitespace_around_value(self):
        assert parse_override("data.seed= 7") == ("data.seed", 7)

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_override("train.batch_size")


class TestLoadRunConfig:
    def test_no_file_gives_defaults(self):
        assert load_run_config() == RunConfig()

    def test_yaml_file_with_overrides(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("train:\n  batch_size: 16\nmodel:\n  size: large\n")
        config = load_run_config(path, {"train.eval_every": 5})
        assert config.train.batch_size == 16
        assert config.train.eval_every == 5
        assert config.model.size == "large"

    def test_json_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"eval": {"pool_size": 20, "shared_pool": True}}))
        config = load_run_config(path)
        assert config.eval.pool_size == 20
        assert config.eval.shared_pool

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "missing.yaml")

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"train.intent_label_noise": 0.7})

    def test_unknown_protocol(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"eval.protocols": ["audio"]})

    def test_override_through_scalar(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"train.batch_size": 8, "train.batch_size.x": 1})

    def test_data_preset(self):
        config = load_run_config(overrides={"data.preset": "mmdial", "data.seed": 4})
        assert config.data.image_bank_size == 120
        assert config.data.seed == 4

    def test_unknown_data_preset(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"data.preset": "nope"})

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_run_config(path)


class TestResolvedConfig:
    def test_round_trip(self, tmp_path):
        config = load_run_config(overrides={"train.seed": 3, "model.size": "large"})
        path = save_resolved_config(config, tmp_path / "run")
        payload = json.loads(path.read_text())
        assert payload["config_hash"] == config.config_hash()
        assert load_resolved_config(tmp_path / "run") == config

    def test_hash_changes_with_any_field(self):
        assert RunConfig().config_hash() != load_run_config(overrides={"eval.seed": 1}).config_hash()

    def test_hash_is_stable(self):
        assert RunConfig().config_hash() == RunConfig().config_hash()
        assert len(config_digest(SyntheticGenConfig())) == 64

    def test_missing_resolved_config(self, tmp_path):
        with pytest.raises(ConfigError):
            load_resolved_config(tmp_path)


class TestEvalWorkers:
    def test_default(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert eval_workers() == 1

    def test_from_environment(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "4")
        assert eval_workers() == 4

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_invalid(self, monkeypatch, raw):
        monkeypatch.setenv(WORKERS_ENV, raw)
        with pytest.raises(ConfigError):
            eval_workers()


class TestCheckScript:
    ROOT = Path(__file__).resolve().parent.parent

    @pytest.mark.parametrize("variable", ["SOURCES", "LINTED"])
    def test_every_checked_path_holds_python(self, variable):
        script = (self.ROOT / "check.sh").read_text()
        match = re.search(rf'^{variable}="([^"]+)"$', script, re.MULTILINE)
        assert match, variable
        for target in match.group(1).split():
            assert any((self.ROOT / target).rglob("*.py")), target
