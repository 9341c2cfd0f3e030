"""Flat key=value run configuration with strict keys and a stable hash.

Precedence when resolving: built-in defaults, then the config file, then
command-line flag overrides. Unknown keys anywhere are an error; value
types are coerced to the type of each key's default."""

from __future__ import annotations

import hashlib
import json

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path) -> dict[str, str]:
    """Read `key = value` lines; blank lines and `#`-prefixed lines are
    skipped. Values stay strings until resolve_config types them."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', "
                                  f"got {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{ln}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            out[key] = val.strip()
    return out


def _coerce(key: str, value, default):
    if isinstance(value, type(default)) and not isinstance(value, str):
        return value
    text = str(value)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: {err}") from err


def resolve_config(defaults: dict, file_values: dict | None = None,
                   flag_values: dict | None = None) -> dict:
    """Merge defaults < config file < flags; reject unknown keys; coerce
    every value to the type of its default."""
    resolved = dict(defaults)
    for source, values in (("config file", file_values),
                           ("flag", flag_values)):
        if not values:
            continue
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown {source} key {key!r}")
            if value is None:
                continue
            resolved[key] = _coerce(key, value, defaults[key])
    return resolved


def config_hash(resolved: dict) -> str:
    """Stable short digest of a resolved config, embedded in artifacts."""
    payload = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
