"""Flat ``key = value`` configuration files.

A file may hold several sections distinguished by key prefixes, e.g.
``env.kp = 12`` or ``train.iterations = 300``. Values are coerced to the type
of the target dataclass field's default; tuples use Python literal syntax.
"""

from __future__ import annotations

import ast
import dataclasses


class ConfigError(ValueError):
    """Malformed configuration or an inconsistent setting."""


def read_flat(text: str) -> dict:
    """Ordered mapping of raw string values; duplicate keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _field_default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def coerce(value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return value.strip("'\"")
        if isinstance(default, tuple):
            parsed = ast.literal_eval(value)
            if not isinstance(parsed, (tuple, list)):
                raise ValueError(value)
            return tuple(tuple(p) if isinstance(p, list) else p for p in parsed)
        return ast.literal_eval(value)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse {value!r} as {type(default).__name__}") from exc


def build(cls, raw: dict, base=None):
    """Instantiate ``cls`` from raw string values, starting from ``base`` if given."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = coerce(value, _field_default(fields[key]))
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)


def split_sections(raw: dict, sections) -> dict:
    """Group prefixed keys (``section.key``) by section; other keys are errors."""
    out = {name: {} for name in sections}
    for key, value in raw.items():
        prefix, _, rest = key.partition(".")
        if not rest or prefix not in out:
            raise ConfigError(f"unknown key {key!r}; expected one of the prefixes {sorted(out)}")
        out[prefix][rest] = value
    return out


def dump(cfg, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            continue
        lines.append(f"{prefix}{f.name} = {value!r}\n" if isinstance(value, (tuple, str)) else
                     f"{prefix}{f.name} = {value}\n")
    return "".join(lines)
