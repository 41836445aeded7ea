"""``key = value`` config files with ``#`` comments, mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import os
import types
import typing


class ConfigError(ValueError):
    pass


def _convert(raw: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        annotation = args[0]
        origin = typing.get_origin(annotation)
    if annotation is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if annotation is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if origin is tuple:
        args = typing.get_args(annotation)
        if len(args) == 2 and args[1] is Ellipsis:
            inner = args[0]
            sep = ";" if typing.get_origin(inner) is tuple else ","
            return tuple(_convert(part.strip(), inner, key) for part in raw.split(sep) if part.strip())
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(_convert(p, a, key) for p, a in zip(parts, args))
    return raw


def parse_kv(text: str, cls, source: str = "<config>"):
    """Parse config text into an instance of dataclass ``cls``; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(raw, hints[key], key)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_kv(path: str | os.PathLike, cls):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), cls, os.fspath(path))


def dump_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple) and value and isinstance(value[0], tuple):
            text = "; ".join(",".join(repr(x) for x in item) for item in value)
        elif isinstance(value, tuple):
            text = ",".join(repr(x) for x in value)
        elif value is None:
            text = "none"
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
