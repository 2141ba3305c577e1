"""JSON config files and environment overrides."""

import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Optional, Type, TypeVar, Union

from loguru import logger

from .errors import ConfigError
from .losses import LossWeights
from .segmenter import ModelConfig
from .tracker import TrackerConfig
from .trainer import TrainConfig

try:
    from dotenv import load_dotenv
    env_path = Path(__file__).parent.parent / ".env"
    if env_path.exists():
        load_dotenv(env_path)
except ImportError:
    pass

SEED_ENV = "ROVIS_SEED"

T = TypeVar("T")
_NESTED = {"model": ModelConfig, "loss": LossWeights}


def _check_keys(data: dict, cls: Type, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown config keys {unknown}")


def config_from_dict(data: dict, cls: Type[T], where: str = "config") -> T:
    _check_keys(data, cls, where)
    kwargs = dict(data)
    for key, nested_cls in _NESTED.items():
        if key in kwargs and key in {f.name for f in fields(cls)}:
            _check_keys(kwargs[key], nested_cls, f"{where}.{key}")
            kwargs[key] = nested_cls(**kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _read(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def seed_override() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def load_train_config(path: Optional[Union[str, Path]] = None) -> TrainConfig:
    config = config_from_dict(_read(path), TrainConfig, str(path)) if path else TrainConfig()
    seed = seed_override()
    if seed is not None:
        logger.info(f"{SEED_ENV}={seed} overrides config seed {config.seed}")
        config.seed = seed
    return config


def load_tracker_config(path: Optional[Union[str, Path]] = None) -> TrackerConfig:
    return config_from_dict(_read(path), TrackerConfig, str(path)) if path else TrackerConfig()
