"""Flat ``key = value`` text files used for dataset descriptors and run configs."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse a flat key-value file. Blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        elif ":" in line:
            key, value = line.split(":", 1)
        else:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_kv(path: str | Path, values: Mapping[str, Any]) -> None:
    lines = [f"{k} = {_format(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def coerce(value: str, target: Any) -> Any:
    """Convert ``value`` to the type of the default ``target``."""
    if isinstance(target, bool):
        lowered = value.strip().lower()
        if lowered in {"1", "true", "yes", "on"}:
            return True
        if lowered in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(float(v) for v in value.split(","))
    if isinstance(target, list):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def apply_overrides(obj: Any, values: Mapping[str, Any], *, strict: bool = False) -> Any:
    """Return a copy of dataclass ``obj`` with matching keys replaced (strings are coerced)."""
    names = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in names:
            if strict:
                raise KeyError(f"unknown setting {key!r}")
            continue
        if value is None:
            continue
        changes[key] = coerce(value, names[key]) if isinstance(value, str) else value
    return dataclasses.replace(obj, **changes)
