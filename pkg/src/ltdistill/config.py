"""Experiment configuration: one YAML file drives every stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the field."""


@dataclass
class DataConfig:
    num_classes: int = 10
    dim: int = 8
    separation: float = 1.0
    variance: float = 1.0
    base_count: int = 500
    imbalance_factor: float = 100.0
    test_per_class: int = 200
    train_file: str | None = None
    test_file: str | None = None


@dataclass
class NetConfig:
    hidden: int = 0
    activation: str = "relu"
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    resample: bool = False


@dataclass
class DistillSection:
    ipc: int = 10
    steps: int = 100
    learning_rate: float = 0.1
    reg_weight: float = 1.0
    init: str = "class_mean_plus_noise"
    init_scale: float = 0.1


@dataclass
class RelabelSection:
    epochs: int = 1
    jitter: float = 0.05
    num_teachers: int = 1


@dataclass
class CalibrateSection:
    lo: float = 0.0
    hi: float = 3.0
    step: float = 0.01
    refine: bool = True


@dataclass
class EvalSection:
    net: NetConfig = field(default_factory=lambda: NetConfig(epochs=100, batch_size=32))
    variants: list = field(default_factory=lambda: ["raw", "adsa"])


@dataclass
class MetricsSection:
    head_threshold: float = 100.0
    tail_threshold: float = 20.0
    reference_count: float = 500.0


@dataclass
class PerturbSection:
    total_budget: int = 1000
    num_varied: int = 2
    sweep: list = field(default_factory=lambda: [10, 25, 50, 100])
    configs: list = field(default_factory=lambda: ["C1", "C2", "C3", "C4"])


@dataclass
class BoundSection:
    nx: int = 4
    num_classes: int = 3
    num_dd: int = 100
    seed: int = 0
    loss_bound_constant: float = 1.0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: NetConfig = field(default_factory=NetConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    relabel: RelabelSection = field(default_factory=RelabelSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    bound: BoundSection = field(default_factory=BoundSection)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "ExperimentConfig":
        d, t = self.data, self.teacher
        _require(d.num_classes >= 2, "data.num_classes", "must be >= 2")
        _require(d.dim >= 1, "data.dim", "must be >= 1")
        _require(d.variance > 0, "data.variance", "must be > 0")
        _require(d.imbalance_factor >= 1, "data.imbalance_factor", "must be >= 1")
        _require(d.base_count >= d.imbalance_factor, "data.base_count", "must be >= data.imbalance_factor")
        _require(d.test_per_class >= 1, "data.test_per_class", "must be >= 1")
        for name, net in (("teacher", t), ("eval.net", self.eval.net)):
            _require(net.hidden >= 0, f"{name}.hidden", "must be >= 0")
            _require(net.activation in ("relu", "tanh"), f"{name}.activation", "must be relu or tanh")
            _require(net.epochs >= 1, f"{name}.epochs", "must be >= 1")
            _require(net.batch_size >= 1, f"{name}.batch_size", "must be >= 1")
            _require(net.learning_rate >= 0, f"{name}.learning_rate", "must be >= 0")
            _require(0 <= net.momentum < 1, f"{name}.momentum", "must lie in [0, 1)")
            _require(net.weight_decay >= 0, f"{name}.weight_decay", "must be >= 0")
        _require(self.distill.ipc >= 1, "distill.ipc", "must be >= 1")
        _require(self.distill.steps >= 0, "distill.steps", "must be >= 0")
        _require(self.distill.reg_weight >= 0, "distill.reg_weight", "must be >= 0")
        _require(self.distill.init in ("noise", "class_mean_plus_noise"), "distill.init",
                 "must be noise or class_mean_plus_noise")
        _require(self.relabel.epochs >= 1, "relabel.epochs", "must be >= 1")
        _require(self.relabel.jitter >= 0, "relabel.jitter", "must be >= 0")
        _require(self.relabel.num_teachers >= 1, "relabel.num_teachers", "must be >= 1")
        c = self.calibrate
        _require(0 <= c.lo < c.hi, "calibrate.lo", "need 0 <= lo < hi")
        _require(c.step > 0, "calibrate.step", "must be > 0")
        _require(set(self.eval.variants) <= {"raw", "adsa"} and self.eval.variants,
                 "eval.variants", "must be a non-empty subset of [raw, adsa]")
        _require(self.metrics.head_threshold > self.metrics.tail_threshold > 0,
                 "metrics.tail_threshold", "need head_threshold > tail_threshold > 0")
        p = self.perturb
        _require(0 < p.num_varied < d.num_classes, "perturb.num_varied", "must lie in (0, num_classes)")
        _require(all(a * p.num_varied <= p.total_budget for a in p.sweep), "perturb.sweep",
                 "num_varied * a must not exceed total_budget")
        _require(set(p.configs) <= {"C1", "C2", "C3", "C4"}, "perturb.configs", "unknown config id")
        b = self.bound
        _require(b.nx >= 1, "bound.nx", "must be >= 1")
        _require(b.num_classes >= 2, "bound.num_classes", "must be >= 2")
        _require(b.num_dd >= 1, "bound.num_dd", "must be >= 1")
        _require(b.seed >= 0, "bound.seed", "must be >= 0")
        _require(b.loss_bound_constant > 0, "bound.loss_bound_constant", "must be > 0")
        _require(bool(self.seeds) and all(isinstance(s, int) and s >= 0 for s in self.seeds),
                 "seeds", "must be a non-empty list of non-negative integers")
        for key in ("train_file", "test_file"):
            path = getattr(d, key)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"data.{key}: file {path} does not exist")
        return self


def _require(cond, name, msg):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def _build(default, raw: Any, prefix: str):
    """Overlay ``raw`` onto the dataclass instance ``default``."""
    if raw is None:
        return default
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(default)}
    kwargs = {}
    for key, value in raw.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"{name}: unknown field")
        current = getattr(default, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(current, value, name)
        else:
            kwargs[key] = _coerce(value, current, name)
    return dataclasses.replace(default, **kwargs)


def _coerce(value, default, name):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string")
    return value


def from_dict(raw: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig(), raw or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    return from_dict(raw)
