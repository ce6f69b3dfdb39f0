"""
Process-level configuration for the URA feedback simulator.
Values come from environment variables (optionally loaded from a .env file by the CLI)
and named experiment presets come from a YAML file.
"""
import os
import logging
from typing import Dict, Any, Optional
from dataclasses import dataclass, field
from enum import Enum

import yaml

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Configuration error."""
    pass


class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


@dataclass
class LoggingConfig:
    """Log level and optional log file."""
    level: str = field(default_factory=lambda: os.getenv("URA_LOG_LEVEL", "INFO"))
    file: Optional[str] = field(default_factory=lambda: os.getenv("URA_LOG_FILE") or None)


@dataclass
class RunnerConfig:
    """Defaults for experiment runs started from the command line."""
    output_dir: str = field(default_factory=lambda: os.getenv("URA_OUTPUT_DIR", "results"))
    jobs: int = field(default_factory=lambda: int(os.getenv("URA_JOBS", "1")))


@dataclass
class Config:
    """Main configuration object."""
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    runner: RunnerConfig = field(default_factory=RunnerConfig)

    presets_path: str = field(default_factory=lambda: os.getenv("URA_PRESETS_PATH", "presets.yaml"))

    def __post_init__(self):
        if self.logging.level.upper() not in LogLevel.__members__:
            raise ConfigError(
                f"URA_LOG_LEVEL must be one of {list(LogLevel.__members__)}, got {self.logging.level!r}"
            )
        if self.runner.jobs < 1:
            raise ConfigError(f"URA_JOBS must be >= 1, got {self.runner.jobs}")

    def load_presets(self, path: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
        """
        Loads named experiment presets from the YAML file.
        Returns a mapping preset name -> flat dictionary of ExperimentConfig keys.
        """
        path = path or self.presets_path
        if not os.path.exists(path):
            raise ConfigError(f"Presets file not found at: {path}")

        try:
            with open(path, 'r') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Error parsing YAML presets {path}: {e}") from e

        presets = data.get('presets', {})
        if not isinstance(presets, dict):
            raise ConfigError(f"'presets' in {path} must be a mapping of name -> settings")
        logger.debug(f"Loaded {len(presets)} presets from {path}")
        return presets


# Global configuration instance
_config_instance: Optional[Config] = None


def get_config() -> Config:
    """Get or create the global configuration instance."""
    global _config_instance
    if _config_instance is None:
        _config_instance = Config()
    return _config_instance


def reload_config() -> Config:
    """Reload configuration from environment variables."""
    global _config_instance
    _config_instance = Config()
    return _config_instance
