"""
Tests for runtime and training settings
"""

import json
import os

import pytest

from config_manager import SEED_ENV_VAR, ConfigManager
from errors import InvalidInputError


def test_missing_file_uses_defaults(tmp_path):
    config = ConfigManager(str(tmp_path / "absent.json"))
    assert config.get_grouping_settings() == {'max_ratio': 4.0}
    assert config.get_logging_settings() == {'level': 'INFO', 'file': None}
    assert config.get_train_settings()["steps"] == 500


def test_file_is_merged_over_defaults(tmp_path):
    path = tmp_path / "runtime.json"
    path.write_text(json.dumps({"grouping": {"max_ratio": 2.0}, "train": {"steps": 7}}))
    config = ConfigManager(str(path))
    assert config.get('grouping.max_ratio') == 2.0
    train = config.get_train_settings()
    assert train["steps"] == 7
    assert train["learning_rate"] == 0.2
    assert config.get('train.momentum', 'none') == 'none'


def test_set_creates_nested_keys():
    config = ConfigManager(None)
    config.set('task.shift_scale', 4.0)
    config.set('extra.depth.value', 1)
    assert config.get_task_settings()["shift_scale"] == 4.0
    assert config.get('extra.depth.value') == 1


def test_defaults_are_not_shared():
    first = ConfigManager(None)
    first.set('model.width', 99)
    assert ConfigManager(None).get('model.width') == 16


def test_seed_environment_override(monkeypatch, tmp_path):
    path = tmp_path / "runtime.json"
    path.write_text(json.dumps({"seed": {"default": 3}}))
    config = ConfigManager(str(path))
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    assert config.get_default_seed() == 3
    monkeypatch.setenv(SEED_ENV_VAR, "11")
    assert config.get_default_seed() == 11
    monkeypatch.setenv(SEED_ENV_VAR, "eleven")
    with pytest.raises(InvalidInputError):
        config.get_default_seed()


def test_non_object_file_is_rejected(tmp_path):
    path = tmp_path / "list.json"
    path.write_text("[1, 2]")
    with pytest.raises(InvalidInputError):
        ConfigManager(str(path))


def test_bundled_runtime_config_loads(config_dir):
    config = ConfigManager(os.path.join(config_dir, 'superlora.json'))
    assert config.get_grouping_settings()['max_ratio'] == 4.0
