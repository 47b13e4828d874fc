"""Plain ``key = value`` run configuration with typed defaults.

Lines starting with ``#`` are comments.  Values are coerced to the type of
the matching default; tuples are written comma-separated.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "parse_config", "read_config", "format_config", "resolve",
           "RunConfig"]


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from exc
    return value


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(values: dict) -> str:
    return "".join(f"{k} = {_render(values[k])}\n" for k in sorted(values))


def resolve(defaults: dict, file_values: dict | None = None,
            overrides: dict | None = None) -> dict:
    """Defaults, then the file, then explicit flags (``None`` means unset)."""
    merged = dict(defaults)
    for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, defaults[key])
    return merged


@dataclass
class RunConfig:
    values: dict
    output: Path

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.output / "resolved.cfg"
        path.write_text(format_config(self.values))
        return path

    def __getitem__(self, key):
        return self.values[key]
