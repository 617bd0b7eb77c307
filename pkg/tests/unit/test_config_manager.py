#!/usr/bin/env python3
"""
Unit tests for the configuration layer
"""

import json

import pytest
import yaml

from progq.config_manager import SEED_ENV, ConfigManager, RunConfig, available_threads
from progq.errors import ConfigurationError
from progq.model import Hyperparameters


class TestDefaults:
    """Test the built-in configuration"""

    def test_default_sections(self):
        config = ConfigManager(environ={})
        assert config.get("general.log_level") == "WARNING"
        assert config.get("search.k") == 10
        assert config.hyperparameters() == Hyperparameters()

    def test_defaults_validate_cleanly(self):
        assert ConfigManager(environ={}).validate_config()["errors"] == []

    def test_get_missing_key(self):
        assert ConfigManager(environ={}).get("search.nothing", "fallback") == "fallback"

    def test_available_threads(self):
        assert available_threads() >= 1


class TestConfigFiles:
    """Test JSON and YAML loading"""

    def test_yaml_merges_over_defaults(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"hyperparameters": {"gamma": 5.0, "L": 2}, "search": {"k": 3}}))
        config = ConfigManager(str(path), environ={})
        hyper = config.hyperparameters()
        assert (hyper.gamma, hyper.L, hyper.K) == (5.0, 2, 256)
        assert config.get("search.k") == 3 and config.get("search.map_cutoff") == 1000

    def test_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"general": {"threads": 2}}))
        assert ConfigManager(str(path), environ={}).get("general.threads") == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError) as exc:
            ConfigManager(str(tmp_path / "absent.json"), environ={})
        assert exc.value.suggestion

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"general\": ")
        with pytest.raises(ConfigurationError) as exc:
            ConfigManager(str(path), environ={})
        assert "JSON" in exc.value.message

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("general: [unclosed")
        with pytest.raises(ConfigurationError):
            ConfigManager(str(path), environ={})

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError):
            ConfigManager(str(path), environ={})

    def test_save_and_reload(self, tmp_path):
        config = ConfigManager(environ={})
        config.set("hyperparameters.epochs", 3)
        path = str(tmp_path / "saved.yaml")
        config.save_config(path)
        with open(path) as f:
            assert "_metadata" in yaml.safe_load(f)
        again = ConfigManager(path, environ={})
        assert again.get("hyperparameters.epochs") == 3
        assert again.get("_metadata") is None


class TestSeedEnvironment:
    """Test PROGQ_SEED precedence"""

    def test_environment_seed_applies(self):
        assert ConfigManager(environ={SEED_ENV: "42"}).hyperparameters().seed == 42

    def test_file_seed_wins(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"hyperparameters": {"seed": 7}}))
        assert ConfigManager(str(path), environ={SEED_ENV: "42"}).hyperparameters().seed == 7

    def test_flag_overrides_environment(self):
        config = ConfigManager(environ={SEED_ENV: "42"})
        config.apply_overrides({"hyperparameters.seed": 3})
        assert config.hyperparameters().seed == 3

    def test_non_integer_seed(self):
        with pytest.raises(ConfigurationError):
            ConfigManager(environ={SEED_ENV: "abc"})

    def test_process_environment_is_default(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "11")
        assert ConfigManager().hyperparameters().seed == 11


class TestRunConfig:
    """Test resolution into a RunConfig"""

    def test_overrides_skip_none(self):
        config = ConfigManager(environ={})
        config.apply_overrides({"search.k": None, "paths.model": "m.pqm"})
        run = config.to_run_config()
        assert run.k == 10 and run.model == "m.pqm"

    def test_zero_threads_means_all_cores(self):
        config = ConfigManager(environ={})
        config.set("general.threads", 0)
        assert config.to_run_config().threads == available_threads()

    def test_errors_are_collected(self):
        config = ConfigManager(environ={})
        config.set("general.log_level", "LOUD")
        config.set("search.R", [0])
        config.set("hyperparameters.K", 3)
        issues = config.validate_config()
        assert len(issues["errors"]) == 3
        with pytest.raises(ConfigurationError):
            config.to_run_config()

    def test_missing_dataset_is_a_warning(self, tmp_path):
        config = ConfigManager(environ={})
        config.set("paths.dataset", str(tmp_path / "nowhere"))
        assert config.validate_config()["warnings"]

    def test_zero_epochs_noted(self):
        config = ConfigManager(environ={})
        config.set("hyperparameters.epochs", 0)
        assert config.validate_config()["info"]

    def test_require(self):
        run = RunConfig(Hyperparameters(), dataset="data")
        run.require("dataset")
        with pytest.raises(ConfigurationError) as exc:
            run.require("dataset", "pr_report")
        assert "--pr-report" in exc.value.suggestion
