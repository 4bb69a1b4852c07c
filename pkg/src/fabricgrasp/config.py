"""JSON run-configuration loading and dataclass construction."""

import json
from dataclasses import fields
from pathlib import Path

from .core import ConfigError, InvalidArgumentError


def load_config(path=None) -> dict:
    """Parse a JSON config file; None means an empty config."""
    if path is None:
        return {}
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config top level must be a JSON object")
    return cfg


def section(cfg: dict, name: str) -> dict:
    got = cfg.get(name, {})
    if not isinstance(got, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return got


def build(cls, *layers, **overrides):
    """Construct dataclass cls from dict layers (later wins), then overrides.

    None-valued overrides are skipped so absent CLI flags fall through to
    the config file. Unknown keys are config errors, not silent typos;
    JSON arrays are coerced to the tuples the dataclasses expect.
    """
    merged = {}
    for layer in layers:
        if layer:
            merged.update(layer)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in merged.items()}
    try:
        return cls(**kwargs)
    except InvalidArgumentError as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None
