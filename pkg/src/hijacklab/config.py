"""Strict TOML run configuration.

Tables: ``flow``, ``train``, ``weights``, ``trigger``, ``poison``.  Missing
keys take defaults; unknown tables or keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import tomli

from . import envbench as eb
from .flowmatch import FlowConfig
from .hijack import ATTACK_STEPS, LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainTable:
    steps: int = TrainConfig.steps
    attack_steps: int = ATTACK_STEPS
    batch_size: int = TrainConfig.batch_size
    lr: float = TrainConfig.lr
    seed: int = 0
    weight_decay: float = TrainConfig.weight_decay
    betas: tuple[float, float] = TrainConfig.betas
    jitter_copies: int = 4
    jitter: float = 0.05
    demos_per_task: int = 50

    def train_config(self, steps: int | None = None, **drops) -> TrainConfig:
        return TrainConfig(
            steps=self.steps if steps is None else steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            weight_decay=self.weight_decay,
            betas=self.betas,
            **drops,
        )


@dataclass(frozen=True)
class PoisonTable:
    strategy: str = "pose_lock"
    rate: float = 0.10
    a_const: tuple = ()
    delta: tuple = ()

    def spec(self) -> eb.PoisonSpec:
        kw: dict[str, Any] = {"strategy": self.strategy, "rate": self.rate}
        if self.a_const:
            kw["a_const"] = np.array(self.a_const, dtype=float)
        if self.delta:
            kw["delta"] = np.array(self.delta, dtype=float)
        return eb.PoisonSpec(**kw)


@dataclass(frozen=True)
class RunConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainTable = field(default_factory=TrainTable)
    weights: LossWeights = field(default_factory=LossWeights)
    trigger: eb.TriggerSpec = field(default_factory=eb.TriggerSpec)
    poison: PoisonTable = field(default_factory=PoisonTable)

    def to_dict(self) -> dict:
        return {
            "flow": self.flow.to_dict(),
            "train": _plain(asdict(self.train)),
            "weights": _plain(asdict(self.weights)),
            "trigger": _plain(asdict(self.trigger)),
            "poison": _plain(asdict(self.poison)),
        }


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (tuple, list)):
        return [_plain(v) for v in d]
    if isinstance(d, np.ndarray):
        return d.tolist()
    return d


TABLES = {
    "flow": FlowConfig,
    "train": TrainTable,
    "weights": LossWeights,
    "trigger": eb.TriggerSpec,
    "poison": PoisonTable,
}

_TUPLE_KEYS = {"tau_beta_params", "action_scale", "angle_channels", "betas", "state_band", "attribute_band"}


def _coerce(table: str, key: str, value, default):
    where = f"{table}.{key}"
    if key in _TUPLE_KEYS:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected an array")
        return tuple(value)
    if key in ("a_const", "delta"):
        arr = np.asarray(value, dtype=float)
        if arr.shape != (eb.ACTION_DIM, eb.HORIZON):
            raise ConfigError(f"{where}: expected a {eb.ACTION_DIM}x{eb.HORIZON} array, got shape {arr.shape}")
        return tuple(map(tuple, arr.tolist()))
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{where}: must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def resolve(data: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from parsed tables, rejecting unknown names."""
    unknown = sorted(set(data) - set(TABLES))
    if unknown:
        raise ConfigError(f"unknown table(s): {', '.join(unknown)}; expected {', '.join(TABLES)}")
    built = {}
    for name, cls in TABLES.items():
        table = data.get(name, {})
        if not isinstance(table, Mapping):
            raise ConfigError(f"{name}: expected a table")
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        bad = sorted(set(table) - set(defaults))
        if bad:
            raise ConfigError(f"unknown key(s) {', '.join(f'{name}.{k}' for k in bad)}")
        kw = {k: _coerce(name, k, v, defaults[k]) for k, v in table.items()}
        try:
            built[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    cfg = RunConfig(**built)
    try:
        cfg.poison.spec()
    except ValueError as exc:
        raise ConfigError(f"poison: {exc}") from exc
    for key in ("steps", "attack_steps", "batch_size", "demos_per_task"):
        if getattr(cfg.train, key) < 1:
            raise ConfigError(f"train.{key} must be >= 1")
    if cfg.train.jitter_copies < 0 or cfg.train.jitter < 0:
        raise ConfigError("train.jitter_copies and train.jitter must be >= 0")
    try:
        cfg.train.train_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        # tomli reports "(at line L, column C)"
        raise ConfigError(f"{p}: {exc}") from exc
    return resolve(data)
