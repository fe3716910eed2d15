"""Run configuration layering and environment defaults."""

from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from pydantic import ValidationError

from hippofusion.errors import ConfigError, MissingFileError
from hippofusion.models import RunConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "HIPPOFUSION_"

# Default settings, overridable through HIPPOFUSION_<KEY>
DEFAULT_SETTINGS = {
    "output_dir": "runs",
    "workers": 1,
    "log_level": "WARNING",
}

# ROI centers have no default; an empty section makes a missing key report as roi.centers
BASE_LAYER: Dict[str, Any] = {"roi": {}}


def _parse_value(value: str) -> Any:
    """JSON when it parses, otherwise the raw string."""
    try:
        return json.loads(value)
    except (json.JSONDecodeError, TypeError):
        if value.lower() in ("true", "false"):
            return value.lower() == "true"
        return value


def get_setting(key: str, default: Any = None) -> Any:
    """Environment setting ``HIPPOFUSION_<KEY>``, else the built-in default."""
    value = os.environ.get(ENV_PREFIX + key.upper())
    if value is None or value == "":
        return DEFAULT_SETTINGS.get(key, default)
    return _parse_value(value)


def get_output_dir(explicit: Optional[Union[str, Path]] = None) -> Path:
    return Path(explicit) if explicit else Path(str(get_setting("output_dir")))


def get_workers(explicit: Optional[int] = None) -> int:
    if explicit is not None:
        return explicit
    workers = get_setting("workers")
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"{ENV_PREFIX}WORKERS must be a positive integer, got {workers!r}", key_path="workers")
    return workers


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``a.b.c=value`` → (["a", "b", "c"], parsed value)."""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override must look like key.path=value, got {text!r}", key_path=key or text)
    path = key.split(".")
    if any(not part for part in path):
        raise ConfigError(f"empty segment in override key {key!r}", key_path=key)
    return path, _parse_value(value)


def apply_override(layer: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    node = layer
    for depth, part in enumerate(path[:-1]):
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            raise ConfigError(
                f"cannot set {'.'.join(path)}: {'.'.join(path[:depth + 1])} is not a section",
                key_path=".".join(path),
            )
        node = child
    node[path[-1]] = value


def deep_merge(base: Dict[str, Any], layer: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in layer.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"config file not found: {path}", path=str(path))
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}", key_path="") from None
    # config echoes wrap the resolved config next to the derived seeds
    if isinstance(payload, dict) and set(payload) == {"config", "seeds"}:
        payload = payload["config"]
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a JSON object", key_path="")
    return payload


def validation_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    key_path = ".".join(str(part) for part in first["loc"])
    return ConfigError(
        f"{key_path}: {first['msg']}" if key_path else first["msg"],
        key_path=key_path,
        errors=len(exc.errors()),
    )


def resolve_config(
    layer: Optional[Dict[str, Any]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """model defaults < ``layer`` < ``--set`` overrides < ``seed``."""
    merged = deep_merge(BASE_LAYER, layer or {})
    for text in overrides:
        path, value = parse_override(text)
        apply_override(merged, path, value)
    if seed is not None:
        merged["seed"] = seed
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise validation_error(exc) from None


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    layer = read_config_file(path) if path else {}
    run = resolve_config(layer, overrides, seed)
    logger.info(f"Resolved config {run.run_key} (seed {run.seed})")
    return run


def run_config_schema() -> Dict[str, Any]:
    schema = RunConfig.model_json_schema()
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    return schema
