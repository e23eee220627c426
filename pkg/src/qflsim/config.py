"""Flat ``section.key = value`` configuration files.

Sections: ``federation``, ``attack``, ``crafting``, ``defense``, ``dataset``
and ``grid``. Blank lines and ``#`` comments are ignored. Example::

    federation.n_clients = 5
    federation.q = 0.2
    attack.kind = grover
    attack.poison_prob = 0.9
    defense.rule = mkrum
    grid.q_values = 0.0, 0.2
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .attacks import AttackConfig
from .crafting import CraftingConfig
from .data import DatasetSpec
from .federation import FederationConfig
from .qsim import ConfigurationError

DEFENSE_KEYS = {
    "rule": "defense",
    "krum_f": "krum_f",
    "mkrum_select": "mkrum_select",
    "foolsgold_confidence": "foolsgold_confidence",
    "mudhog_separation": "mudhog_separation",
    "flguardian_z": "flguardian_z",
}
NESTED = {"attack": AttackConfig, "crafting": CraftingConfig, "dataset": DatasetSpec}
GRID_KEYS = ("attacks", "defenses", "q_values", "rho_values", "seeds")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigurationError(f"{source}:{lineno}: key {key!r} lacks a section prefix")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if raw.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0], key)
    if origin is tuple:
        elem = args[0] if args else str
        return tuple(_coerce(part.strip(), elem, key) for part in raw.split(",") if part.strip())
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from None
    return raw


def _apply(cls, base, updates: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    changes = {}
    for key, raw in updates.items():
        if key not in known:
            raise ConfigurationError(f"unknown key {section}.{key}")
        changes[key] = _coerce(raw, hints[key], f"{section}.{key}")
    return dataclasses.replace(base, **changes) if changes else base


def build_config(entries: dict[str, str], base: FederationConfig | None = None) -> FederationConfig:
    """Apply ``section.key`` entries on top of ``base`` (defaults when omitted)."""
    cfg = base or FederationConfig()
    grouped: dict[str, dict[str, str]] = {}
    for key, value in entries.items():
        section, name = key.split(".", 1)
        grouped.setdefault(section, {})[name] = value
    for section in grouped:
        if section not in ("federation", "defense", "grid", *NESTED):
            raise ConfigurationError(f"unknown config section {section!r}")
    top = dict(grouped.get("federation", {}))
    for name in ("attack", "crafting", "dataset", "defense"):
        if name in top and name != "defense":
            raise ConfigurationError(f"federation.{name} is a section; use {name}.* keys")
    for name, raw in grouped.get("defense", {}).items():
        if name not in DEFENSE_KEYS:
            raise ConfigurationError(f"unknown key defense.{name}")
        top[DEFENSE_KEYS[name]] = raw
    nested = {
        name: _apply(cls, getattr(cfg, name), grouped.get(name, {}), name) for name, cls in NESTED.items()
    }
    cfg = _apply(FederationConfig, cfg, top, "federation")
    return dataclasses.replace(cfg, **nested)


def grid_entries(entries: dict[str, str]) -> dict[str, list[str]]:
    out = {}
    for key, value in entries.items():
        section, name = key.split(".", 1)
        if section != "grid":
            continue
        if name not in GRID_KEYS:
            raise ConfigurationError(f"unknown key grid.{name}")
        out[name] = [v.strip() for v in value.split(",") if v.strip()]
    return out


def echo(cfg: FederationConfig) -> dict[str, object]:
    """Every effective setting as ``section.key -> value`` in a stable order."""
    inverse = {v: k for k, v in DEFENSE_KEYS.items()}
    out: dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in NESTED:
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = _plain(getattr(value, sub.name))
        elif f.name in inverse:
            out[f"defense.{inverse[f.name]}"] = _plain(value)
        else:
            out[f"federation.{f.name}"] = _plain(value)
    return out


def _plain(value):
    return list(value) if isinstance(value, tuple) else value
