"""Plain-text ``key=value`` configuration over nested dataclasses (dotted keys)."""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from pathlib import Path
from typing import Any


def flatten(obj: Any, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = format_value(value)
    return out


def format_value(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(obj: Any) -> str:
    return "".join(f"{k}={v}\n" for k, v in flatten(obj).items())


def parse_lines(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_file(path: str | Path) -> dict[str, str]:
    return parse_lines(Path(path).read_text(encoding="utf-8"))


def _coerce(hint: Any, raw: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _coerce(args[0], raw)
    if origin in (tuple, list):
        (inner, *_) = typing.get_args(hint) or (str,)
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(_coerce(inner, s.strip()) for s in items)
    if hint is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint(raw)
    if hint in (int, float, str):
        return hint(raw)
    return raw


def set_value(obj: Any, key: str, raw: str) -> None:
    head, _, rest = key.partition(".")
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise KeyError(f"unknown config key {key!r}")
    if rest:
        child = getattr(obj, head)
        if not dataclasses.is_dataclass(child):
            raise KeyError(f"{head!r} has no nested keys")
        set_value(child, rest, raw)
        return
    hints = typing.get_type_hints(type(obj))
    setattr(obj, head, _coerce(hints[head], raw))


def apply(obj: Any, values: dict[str, str]) -> Any:
    for key, raw in values.items():
        set_value(obj, key, raw)
    if hasattr(obj, "__post_init__"):
        obj.__post_init__()
    return obj
