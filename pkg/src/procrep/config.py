"""Flat key-value config files with includes, provenance hashing, seed derivation.

Config files are diff-friendly text: one ``key = value`` per line, ``#``
comments, and ``include other.cfg`` directives resolved relative to the
including file. Later assignments override earlier ones, so includes act as
defaults.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

from .errors import ConfigError


def load_config(path: str | Path) -> dict[str, str]:
    """Read a flat key-value config file, resolving ``include`` directives."""
    return _load(Path(path), seen=set())


def _load(path: Path, seen: set[Path]) -> dict[str, str]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"circular include of {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    seen.add(path)

    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("include "):
            target = line[len("include "):].strip()
            values.update(_load(path.parent / target, seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def config_hash(values: Mapping[str, object]) -> str:
    """Stable sha256 over a canonical JSON rendering of the mapping."""
    canonical = json.dumps(values, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(base: int, *parts: object) -> int:
    """Derive a reproducible sub-seed for a named purpose.

    Hash-based so that adding a new consumer never shifts the streams of
    existing ones.
    """
    text = "|".join([str(int(base)), *[str(p) for p in parts]])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_weights(text: str) -> dict[str, float]:
    """Parse ``name:weight,name:weight`` mappings used for archetype mixes."""
    out: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"expected 'name:weight', got {part!r}")
        name, _, weight = part.partition(":")
        try:
            out[name.strip()] = float(weight)
        except ValueError as exc:
            raise ConfigError(f"bad weight in {part!r}") from exc
    if not out:
        raise ConfigError(f"empty weight mapping: {text!r}")
    return out


def parse_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]
