from __future__ import annotations

from pathlib import Path
from typing import Any

import yaml
from loguru import logger
from pydantic import ValidationError

from stfusion.core.entities import ConfigError, TrainConfig


def parse_flat_config(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {line_number}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"Line {line_number}: empty key")
        values[key] = value
    return values


def read_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must contain a mapping")
        return data
    return parse_flat_config(text)


def resolve_train_config(
    config_file: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> TrainConfig:
    """
    Merge defaults, the config file and CLI overrides (in increasing precedence).
    Overrides whose value is None were not given on the command line and are ignored.
    """
    file_values = read_config_file(config_file)
    known = set(TrainConfig.__fields__)
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    if isinstance(file_values.get("betas"), str):
        file_values["betas"] = tuple(float(b) for b in file_values["betas"].split(","))
    merged = {**file_values, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    try:
        config = TrainConfig.parse_obj(merged)
    except ValidationError as e:
        raise ConfigError(str(e))
    logger.debug(f"Resolved train config:\n{config.to_yaml()}")
    return config
