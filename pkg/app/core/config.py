from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from app.core.errors import ConfigError

LOGGER_NAME = "jointmodel"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

ModelT = TypeVar("ModelT", bound=BaseModel)


def load_environment() -> None:
    load_dotenv(override=True)


def env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"Environment variable {name} must be an integer, got '{raw}'.") from exc


def env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def default_seed() -> int:
    return env_int("JM_DEFAULT_SEED", 20240101)


def default_threads() -> int:
    return max(1, env_int("JM_THREADS", 1))


def show_progress() -> bool:
    return env_flag("JM_SHOW_PROGRESS", False)


def get_logger() -> logging.Logger:
    logger = logging.getLogger(LOGGER_NAME)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
        logger.setLevel(os.getenv("JM_LOG_LEVEL", "INFO").upper())
        logger.propagate = False
    return logger


def load_json_config(path: str | Path | None, model: type[ModelT]) -> ModelT:
    """Validate a JSON config file into ``model``; ``None`` yields the model defaults."""
    if path is None:
        return model()

    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file '{config_path}' does not exist.")

    try:
        payload = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file '{config_path}' is not valid JSON: {exc}") from exc

    try:
        return model.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config '{config_path}': {exc.errors()}") from exc
