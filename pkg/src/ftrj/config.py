"""Flat ``key = value`` experiment configuration with validation and defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    hint: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _in(*choices):
    return lambda v: v in choices


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, _nonneg, ">= 0"),
    "data.source": Key(str, "synthetic", _in("synthetic", "csv"), "synthetic | csv"),
    "data.path": Key(str, ""),
    "data.heldout": Key(list, []),
    "synthetic.dim": Key(int, 2, lambda v: v >= 2, ">= 2"),
    "synthetic.std": Key(float, 0.1, _pos, "> 0"),
    "synthetic.n_endpoint": Key(int, 500, _pos, ">= 1"),
    "synthetic.n_intermediate": Key(int, 25, _pos, ">= 1"),
    "synthetic.offset": Key(float, 0.95, _pos, "> 0"),
    "lineage.path": Key(str, ""),
    "lineage.transitive_closure": Key(bool, False),
    "net.hidden": Key(int, 256, _pos, ">= 1"),
    "net.layers": Key(int, 3, _pos, ">= 1"),
    "net.activation": Key(str, "silu", _in("silu", "tanh", "softplus", "relu"), "silu | tanh | softplus | relu"),
    "classifier.smoothing": Key(float, 0.05, lambda v: 0 <= v < 0.5, "in [0, 0.5)"),
    "classifier.batch": Key(int, 512, _pos, ">= 1"),
    "classifier.max_epochs": Key(int, 300, _pos, ">= 1"),
    "classifier.patience": Key(int, 20, _pos, ">= 1"),
    "classifier.lr": Key(float, 1e-3, _pos, "> 0"),
    "classifier.train_on": Key(str, "all", _in("all", "endpoints"), "all | endpoints"),
    "finsler.lambda": Key(float, 1.0, _nonneg, ">= 0"),
    "metric.base": Key(str, "euclidean", _in("euclidean", "rbf"), "euclidean | rbf"),
    "metric.clusters": Key(int, 100, _pos, ">= 1"),
    "metric.kappa": Key(float, 1.0, _pos, "> 0"),
    "metric.epsilon": Key(float, 0.05, _pos, "> 0"),
    "embed.latent_dim": Key(int, 32, _pos, ">= 1"),
    "geodesic.stop_gradient_jacobian": Key(bool, False),
    "geodesic.restarts": Key(int, 1, _pos, ">= 1"),
    "geodesic.restart_bend": Key(float, 1.0, _nonneg, ">= 0"),
    "train.iters": Key(int, 300, _pos, ">= 1"),
    "train.batch": Key(int, 2048, _pos, ">= 1"),
    "train.lr": Key(float, 1e-3, _pos, "> 0"),
    "flow.iters": Key(int, 300, _pos, ">= 1"),
    "flow.batch": Key(int, 256, _pos, ">= 1"),
    "flow.lr": Key(float, 1e-3, _pos, "> 0"),
    "flow.steps": Key(int, 100, _pos, ">= 1"),
    "eval.n_trajectories": Key(int, 50, _pos, ">= 1"),
    "eval.grid": Key(int, 21, lambda v: v >= 2, ">= 2"),
    "eval.allowed_classes": Key(list, []),
}


class ExperimentConfig(Mapping):
    """Validated flat mapping of dotted keys; every schema key is present."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = {k: s.default for k, s in SCHEMA.items()}
        for k, v in (values or {}).items():
            merged[k] = _coerce(k, v)
        self._values = merged

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with overrides; keyword names use ``__`` for dots."""
        vals = dict(self._values)
        vals.update({k.replace("__", "."): v for k, v in updates.items()})
        return ExperimentConfig(vals)

    def with_values(self, updates: Mapping[str, Any]) -> "ExperimentConfig":
        vals = dict(self._values)
        vals.update(updates)
        return ExperimentConfig(vals)

    def hidden(self) -> tuple[int, ...]:
        return (self["net.hidden"],) * self["net.layers"]

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self._values.items())

    def as_dict(self) -> dict:
        return dict(self._values)


def _coerce(key: str, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    spec = SCHEMA[key]
    if spec.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if spec.type is not bool and isinstance(value, bool) or not isinstance(value, spec.type):
        raise ConfigError(f"{key}: expected {spec.type.__name__}, got {value!r}")
    if not spec.check(value):
        raise ConfigError(f"{key}: value {value!r} out of range ({spec.hint})")
    return value


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("'\"")


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw)
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
