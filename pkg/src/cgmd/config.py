"""Key-value config files for TrainConfig and SynthConfig.

One ``key = value`` pair per line; ``#`` starts a comment.  Keys must name
fields of the target dataclass and values are parsed with the field's type.
"""

from __future__ import annotations

from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Mapping, TypeVar

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_value(raw: str, kind: type) -> Any:
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from exc


def read_pairs(path: str | Path) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def apply_pairs(base: T, pairs: Mapping[str, str], strict: bool = True) -> T:
    """Return ``base`` with the named fields replaced; unknown keys raise when strict."""
    types = type(base).field_types()
    updates = {}
    for key, raw in pairs.items():
        if key not in types:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        updates[key] = parse_value(raw, types[key])
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(cfg: Any) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
