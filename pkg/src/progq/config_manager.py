"""
Run configuration: defaults, JSON/YAML files, environment and flags.

Precedence, lowest first: built-in defaults, the config file, PROGQ_SEED
(only when the file sets no seed), command-line overrides.
"""

import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import yaml

from . import __version__
from .errors import ConfigurationError
from .model import Hyperparameters

try:
    import psutil
    PSUTIL_AVAILABLE = True
except ImportError:
    PSUTIL_AVAILABLE = False

SEED_ENV = "PROGQ_SEED"
VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


def available_threads() -> int:
    """Physical cores when psutil can tell, else the logical count"""
    if PSUTIL_AVAILABLE:
        count = psutil.cpu_count(logical=False)
        if count:
            return count
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI command needs, fully resolved"""

    hyper: Hyperparameters
    dataset: str = ""
    model: str = ""
    codes: str = ""
    report: str = ""
    pr_report: str = ""
    output: str = ""
    k: int = 10
    l_active: int = 0
    R_values: Tuple[int, ...] = (100,)
    map_cutoff: int = 1000
    recall_k: int = 10
    threads: int = 1
    log_level: str = "WARNING"

    def require(self, *names: str) -> None:
        missing = [n for n in names if not getattr(self, n)]
        if missing:
            raise ConfigurationError(f"Missing path(s): {', '.join(missing)}",
                                     f"Pass --{missing[0].replace('_', '-')} or set paths.{missing[0]} in the config")


class ConfigManager:
    """Nested configuration with dot-path access"""

    def __init__(self, config_path: Optional[str] = None, environ: Optional[Dict[str, str]] = None):
        self.logger = logging.getLogger(__name__)
        self.config_path = config_path
        self.environ = os.environ if environ is None else environ
        self.config = self._get_default_config()
        self._file_config: Dict[str, Any] = {}
        if config_path:
            self.load_config(config_path)
        self._apply_environment()

    def _get_default_config(self) -> Dict[str, Any]:
        hyper = Hyperparameters().to_dict()
        return {
            "general": {
                "version": __version__,
                "log_level": "WARNING",
                "threads": 1,
            },
            "hyperparameters": hyper,
            "paths": {
                "dataset": "",
                "model": "",
                "codes": "",
                "report": "",
                "pr_report": "",
                "output": "",
            },
            "search": {
                "k": 10,
                "l_active": 0,
                "R": [100],
                "map_cutoff": 1000,
                "recall_k": 10,
            },
        }

    def _merge_configs(self, default: Dict, user: Dict) -> Dict:
        """Recursively merge user config with defaults"""
        result = default.copy()
        for key, value in user.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._merge_configs(result[key], value)
            else:
                result[key] = value
        return result

    def load_config(self, path: str) -> None:
        """Merge a JSON (.json) or YAML (.yaml/.yml) file over the current values"""
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file not found: {path}", "Check the --config path")
        try:
            with open(path) as f:
                if path.endswith((".yaml", ".yml")):
                    data = yaml.safe_load(f) or {}
                else:
                    data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file has invalid JSON: {e}", f"Fix the JSON syntax in {path}")
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Config file has invalid YAML: {e}", f"Fix the YAML syntax in {path}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a mapping at the top level")
        data.pop("_metadata", None)
        self._file_config = data
        self.config = self._merge_configs(self.config, data)
        self.logger.info(f"Configuration loaded from {path}")

    def _apply_environment(self) -> None:
        seed = self.environ.get(SEED_ENV)
        if seed is None or "seed" in self._file_config.get("hyperparameters", {}):
            return
        try:
            self.set("hyperparameters.seed", int(seed))
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV}={seed!r} is not an integer")
        self.logger.debug(f"Seed {seed} taken from {SEED_ENV}")

    def save_config(self, path: str) -> None:
        data = dict(self.config)
        data["_metadata"] = {"created": datetime.now().isoformat(), "version": __version__}
        with open(path, "w") as f:
            if path.endswith((".yaml", ".yml")):
                yaml.safe_dump(data, f, sort_keys=True)
            else:
                json.dump(data, f, indent=2, sort_keys=True)
        self.logger.info(f"Configuration saved to {path}")

    def get(self, key_path: str, default: Any = None) -> Any:
        """Get configuration value using dot notation (e.g. 'hyperparameters.gamma')"""
        value = self.config
        for key in key_path.split("."):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value: Any) -> None:
        keys = key_path.split(".")
        ref = self.config
        for key in keys[:-1]:
            ref = ref.setdefault(key, {})
        ref[keys[-1]] = value

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Dot-path overrides from the command line; None means 'not given'"""
        for key_path, value in overrides.items():
            if value is not None:
                self.set(key_path, value)

    def validate_config(self) -> Dict[str, List[str]]:
        issues: Dict[str, List[str]] = {"errors": [], "warnings": [], "info": []}
        try:
            Hyperparameters.from_dict(self.get("hyperparameters", {}))
        except ConfigurationError as e:
            issues["errors"].append(e.message)
        if self.get("general.log_level") not in VALID_LOG_LEVELS:
            issues["errors"].append(f"Invalid log level: {self.get('general.log_level')}")
        threads = self.get("general.threads")
        if not isinstance(threads, int) or threads < 0:
            issues["errors"].append(f"threads must be a nonnegative integer, got {threads!r}")
        elif threads > available_threads():
            issues["warnings"].append(f"threads={threads} exceeds the {available_threads()} available cores")
        for key in ("k", "map_cutoff", "recall_k"):
            value = self.get(f"search.{key}")
            if not isinstance(value, int) or value < 1:
                issues["errors"].append(f"search.{key} must be a positive integer")
        R = self.get("search.R")
        if not isinstance(R, list) or not all(isinstance(r, int) and r >= 1 for r in R):
            issues["errors"].append("search.R must be a list of positive integers")
        dataset = self.get("paths.dataset")
        if dataset and not os.path.exists(dataset):
            issues["warnings"].append(f"Dataset path does not exist: {dataset}")
        if self.get("hyperparameters.epochs") == 0:
            issues["info"].append("epochs=0: training returns the initialised model")
        return issues

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters.from_dict(self.get("hyperparameters", {}))

    def to_run_config(self) -> RunConfig:
        issues = self.validate_config()
        if issues["errors"]:
            raise ConfigurationError("Invalid configuration: " + "; ".join(issues["errors"]),
                                     details={"errors": issues["errors"]})
        for warning in issues["warnings"]:
            self.logger.warning(warning)
        threads = self.get("general.threads") or available_threads()
        paths = self.get("paths", {})
        search = self.get("search", {})
        return RunConfig(
            hyper=self.hyperparameters(),
            dataset=paths.get("dataset", ""),
            model=paths.get("model", ""),
            codes=paths.get("codes", ""),
            report=paths.get("report", ""),
            pr_report=paths.get("pr_report", ""),
            output=paths.get("output", ""),
            k=search["k"],
            l_active=search["l_active"],
            R_values=tuple(search["R"]),
            map_cutoff=search["map_cutoff"],
            recall_k=search["recall_k"],
            threads=threads,
            log_level=self.get("general.log_level"),
        )
