"""Scenario configuration files (YAML or JSON) and dotted-path overrides.

A file mirrors :class:`~hebbmem.harness.ScenarioConfig`; the nested sections
``data``, ``training``, ``adaptation`` and ``mixture`` mirror their dataclasses.
Every field is optional and unknown keys are rejected::

    kind: online
    methods: [parametric, mbpa, hebb]
    seeds: [0, 1, 2]
    adaptation: {lam: 50.0, steps: 1, eta: 5.0, beta: 0.6}
"""

from __future__ import annotations

import copy
import dataclasses
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .adaptation import AdaptationConfig
from .baselines import MixtureConfig
from .data import GaussianBlobs
from .harness import KINDS, ScenarioConfig, TrainingConfig

SECTIONS = {
    "data": GaussianBlobs,
    "training": TrainingConfig,
    "adaptation": AdaptationConfig,
    "mixture": MixtureConfig,
}
_TUPLE_FIELDS = {"methods", "seeds", "pretrain_classes", "imbalance"}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _check_type(path: str, value, default):
    """Reject obviously wrong scalar types; range checks are left to the dataclasses."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def _parse_imbalance(value):
    if isinstance(value, str):
        try:
            major, minor = (int(p) for p in value.split(":"))
        except ValueError:
            raise ConfigError(f"imbalance: expected 'major:minor' or [major, minor], got {value!r}") from None
        return (major, minor)
    return value


def _build(cls, values: Mapping, prefix: str):
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        head = msg.split(":", 1)[0]
        if head in _fields(cls):
            raise ConfigError(f"{prefix}{msg}") from None
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {msg}") from None


def default_dict() -> dict:
    """Plain-data view of the default configuration."""
    return to_dict(ScenarioConfig())


def to_dict(cfg: ScenarioConfig) -> dict:
    out = {}
    for name in _fields(ScenarioConfig):
        v = getattr(cfg, name)
        if name in SECTIONS:
            out[name] = {k: getattr(v, k) for k in _fields(SECTIONS[name])}
        elif isinstance(v, tuple):
            out[name] = list(v)
        else:
            out[name] = v
    return out


def merge(base: dict, update: Mapping, prefix: str = "") -> dict:
    """Recursive merge of ``update`` into a copy of ``base``; unknown keys raise."""
    if not isinstance(update, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping, got {type(update).__name__}")
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(out[key], dict):
            out[key] = merge(out[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def from_dict(values: Mapping) -> ScenarioConfig:
    """Build a validated :class:`ScenarioConfig` from (possibly partial) plain data."""
    full = merge(default_dict(), values)
    defaults = ScenarioConfig()
    kwargs: dict[str, Any] = {}
    for name, f in _fields(ScenarioConfig).items():
        value = full[name]
        if name in SECTIONS:
            cls = SECTIONS[name]
            section_defaults = {k: _default(sf) for k, sf in _fields(cls).items()}
            checked = {k: _check_type(f"{name}.{k}", v, section_defaults[k]) for k, v in value.items()}
            kwargs[name] = _build(cls, checked, f"{name}.")
            continue
        if name == "imbalance":
            value = _parse_imbalance(value)
        value = _check_type(name, value, getattr(defaults, name))
        if name in _TUPLE_FIELDS and value is not None:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}: expected a list, got {value!r}")
            value = tuple(value)
        kwargs[name] = value
    return _build(ScenarioConfig, kwargs, "")


def parse_override(item: str) -> tuple[str, Any]:
    """``"adaptation.eta=0.5"`` -> ``("adaptation.eta", 0.5)``; the value is read as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r}: empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}: {exc}") from None
    return key, value


def nest(dotted: Mapping[str, Any]) -> dict:
    """``{"adaptation.eta": 1}`` -> ``{"adaptation": {"eta": 1}}``."""
    out: dict = {}
    for key, value in dotted.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicts with a scalar override")
        node[parts[-1]] = value
    return out


def read_file(path) -> dict:
    """Parse a YAML/JSON config file into plain data (an empty file is an empty mapping)."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    """Defaults, then the file at ``path`` (if any), then dotted ``overrides``."""
    values = read_file(path) if path is not None else {}
    if overrides:
        values = merge(merge(default_dict(), values), nest(overrides))
    return from_dict(values)


def preset_path(kind: str) -> Path:
    """Packaged desk-scale configuration tuned for ``kind``."""
    if kind not in KINDS:
        raise ValueError(f"no preset for {kind!r}; choose from {KINDS}")
    return Path(str(resources.files("hebbmem") / "presets" / f"{kind}.yaml"))


def load_preset(kind: str, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    return load_config(preset_path(kind), overrides)


def dump(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
