"""Experiment configuration and its validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

PROTOCOLS = ("morph", "epidemic", "static_mh", "fully_connected")
MODELS = ("softmax", "mlp")
EL_VARIANTS = ("local", "oracle")
EVAL_SCHEDULES = ("fixed", "staged")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str
    n: int
    rounds: int
    seed: int = 1
    # topology
    view_size: int = 3
    k_out: int | None = None  # defaults to view_size
    d_r: int = 2
    beta: float = 500.0
    delta_r: int = 5
    el_variant: str = "local"
    # learning
    gamma: float = 0.05
    batch_size: int = 8
    model: str = "softmax"
    hidden: int = 16
    init_scale: float = 0.1
    # data
    alpha: float = 0.1
    num_classes: int = 10
    examples_per_class: int = 200
    feature_dim: int = 16
    cluster_spread: float = 1.0
    test_fraction: float = 0.2
    # evaluation and gossip
    eval_every: int = 10
    eval_schedule: str = "fixed"
    gossip_similarities: int = 64
    gossip_peers: int = 16
    staleness_factor: int = 10
    record_topology: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def capacity(self) -> int:
        return self.view_size if self.k_out is None else self.k_out

    @property
    def biased_count(self) -> int:
        return max(0, self.view_size - self.d_r)

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise ConfigError(name, msg)

        need(self.protocol in PROTOCOLS, "protocol", f"must be one of {PROTOCOLS}")
        need(self.model in MODELS, "model", f"must be one of {MODELS}")
        need(self.el_variant in EL_VARIANTS, "el_variant", f"must be one of {EL_VARIANTS}")
        need(self.eval_schedule in EVAL_SCHEDULES, "eval_schedule", f"must be one of {EVAL_SCHEDULES}")
        need(self.n >= 1, "n", "must be >= 1")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.view_size >= 0, "view_size", "must be >= 0")
        need(self.protocol not in ("morph", "static_mh") or self.view_size >= 1, "view_size", "must be >= 1")
        need(self.view_size <= max(self.n - 1, 0), "view_size", "must be <= n - 1")
        need(self.capacity >= 1 or self.protocol != "morph", "k_out", "must be >= 1")
        need(0 <= self.d_r <= self.view_size, "d_r", "must satisfy 0 <= d_r <= view_size")
        need(self.beta >= 0, "beta", "must be >= 0")
        need(self.delta_r >= 1, "delta_r", "must be >= 1")
        need(self.gamma >= 0, "gamma", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.hidden >= 1, "hidden", "must be >= 1")
        need(self.init_scale > 0, "init_scale", "must be > 0")
        need(self.alpha > 0, "alpha", "must be > 0")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.examples_per_class >= 1, "examples_per_class", "must be >= 1")
        need(self.feature_dim >= 1, "feature_dim", "must be >= 1")
        need(self.cluster_spread > 0, "cluster_spread", "must be > 0")
        need(0 < self.test_fraction < 1, "test_fraction", "must be in (0, 1)")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(self.gossip_similarities >= 0, "gossip_similarities", "must be >= 0")
        need(self.gossip_peers >= 0, "gossip_peers", "must be >= 0")
        need(self.staleness_factor >= 1, "staleness_factor", "must be >= 1")
        need(
            self.protocol != "static_mh" or (self.n * self.view_size) % 2 == 0,
            "view_size", "n * view_size must be even for a regular static graph",
        )

    def is_eval_round(self, t: int) -> bool:
        if t == self.rounds:
            return True
        if self.eval_schedule == "staged":
            return t % 20 == 0 if t <= 1000 else t % 40 == 0
        return t % self.eval_every == 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


REQUIRED = tuple(f.name for f in dataclasses.fields(ExperimentConfig) if f.default is dataclasses.MISSING)
_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = _TYPES[name]
    if value is None and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {kind}, got {value!r}") from None
    return value


def config_from_mapping(data: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a mapping of field names to values")
    unknown = sorted(set(data) - set(_TYPES))
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    missing = [name for name in REQUIRED if name not in data]
    if missing:
        raise ConfigError(missing[0], "missing required field")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in data.items()})


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) config file."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_mapping(data if data is not None else {})
