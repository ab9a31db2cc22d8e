"""Flat ``key = value`` configuration files mapped onto nested dataclasses.

Nested fields are addressed with dotted keys (``adc.interval = 100``).
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


class UnknownKey(ConfigError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    return parse_text(Path(path).read_text(encoding="utf-8"), str(path))


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _convert(text: str, hint, key: str):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", "null", "") and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {hint.__name__}") from None
    raise ConfigError(f"{key}: unsupported type {hint}")


def apply(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with dotted-key ``values`` applied."""
    known = flatten(obj)
    for key in values:
        if key not in known:
            raise UnknownKey(f"unknown config key {key!r}")
    return _apply(obj, values, "")


def _apply(obj, values, prefix):
    hints = _hints(type(obj))
    changes = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        cur = getattr(obj, f.name)
        if dataclasses.is_dataclass(cur):
            sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
            if sub:
                changes[f.name] = _apply(cur, sub, key + ".")
        elif key in values:
            changes[f.name] = _convert(values[key], hints[f.name], key)
    if not changes:
        return obj
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolved_text(obj) -> str:
    """Every key of ``obj``, sorted, one ``key = value`` per line."""
    flat = flatten(obj)
    return "".join(f"{k} = {_fmt(flat[k])}\n" for k in sorted(flat))


def config_hash(obj) -> str:
    return hashlib.sha256(resolved_text(obj).encode()).hexdigest()[:16]
