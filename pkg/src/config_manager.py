"""
Configuration manager for the SuperLoRA project.
"""

import copy
import json
import os
from typing import Dict, Any, Optional
import logging

from errors import InvalidInputError


SEED_ENV_VAR = "SUPERLORA_SEED"


class ConfigManager:
    """
    Configuration manager for runtime settings and toy-training files.

    Settings are nested JSON sections read with dot-notation keys,
    e.g. ``config.get('grouping.max_ratio')``.
    """

    DEFAULT_CONFIG: Dict[str, Any] = {
        "logging": {
            "level": "INFO",
            "file": None
        },
        "seed": {
            "default": 0
        },
        "grouping": {
            "max_ratio": 4.0
        },
        "train": {
            "steps": 500,
            "batch_size": 32,
            "learning_rate": 0.2,
            "grad_check_interval": 0,
            "eval_interval": 25,
            "target_loss_ratio": 1.0
        },
        "model": {
            "layers": 2,
            "width": 16,
            "classes": 4,
            "ffn_width": 32,
            "head_scale": 3.0
        },
        "task": {
            "seq_len": 8,
            "vocab": 32,
            "train_samples": 512,
            "eval_samples": 256,
            "shift_rank": 1,
            "shift_scale": 2.0
        }
    }

    def __init__(self, config_file: Optional[str] = "config/superlora.json"):
        """
        Initialize configuration manager.

        Args:
            config_file (str, optional): Path to configuration file; None uses defaults only
        """
        self.config_file = config_file
        self.config: Dict[str, Any] = {}
        self.logger = logging.getLogger(__name__)
        self.load_config()

    def load_config(self) -> None:
        """Load configuration from file, layered over the defaults."""
        self._create_default_config()
        if not self.config_file:
            return
        if not os.path.exists(self.config_file):
            self.logger.warning(f"Configuration file {self.config_file} not found, using defaults")
            return
        with open(self.config_file, 'r', encoding='utf-8') as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise InvalidInputError(f"Configuration file {self.config_file} must hold a JSON object")
        self._merge(self.config, loaded)
        self.logger.info(f"Configuration loaded from {self.config_file}")

    def _create_default_config(self) -> None:
        """Create default configuration."""
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)

    @staticmethod
    def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> None:
        for key, value in override.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                ConfigManager._merge(base[key], value)
            else:
                base[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value.

        Args:
            key (str): Configuration key (use dot notation for nested keys)
            default (Any): Default value if key not found

        Returns:
            Any: Configuration value
        """
        keys = key.split('.')
        value = self.config

        try:
            for k in keys:
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any) -> None:
        """
        Set configuration value.

        Args:
            key (str): Configuration key (use dot notation for nested keys)
            value (Any): Value to set
        """
        keys = key.split('.')
        config = self.config

        # Navigate to the parent of the target key
        for k in keys[:-1]:
            if k not in config:
                config[k] = {}
            config = config[k]

        config[keys[-1]] = value

    def get_logging_settings(self) -> Dict[str, Any]:
        return {
            'level': self.get('logging.level', 'INFO'),
            'file': self.get('logging.file')
        }

    def get_grouping_settings(self) -> Dict[str, float]:
        return {
            'max_ratio': float(self.get('grouping.max_ratio', 4.0))
        }

    def get_default_seed(self) -> int:
        """
        Default seed: environment variable first, then the file.

        Returns:
            int: Seed
        """
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed not in (None, ''):
            try:
                return int(env_seed)
            except ValueError:
                raise InvalidInputError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")
        return int(self.get('seed.default', 0))

    def get_train_settings(self) -> Dict[str, Any]:
        return dict(self.get('train', {}))

    def get_model_settings(self) -> Dict[str, Any]:
        return dict(self.get('model', {}))

    def get_task_settings(self) -> Dict[str, Any]:
        return dict(self.get('task', {}))
