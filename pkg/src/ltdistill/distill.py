"""Distilled-set synthesis by gradient descent in input space.

Per item the objective is ``CE(f(x), y) + reg_weight * ||g(x) - mu_y||^2``
where ``g`` is the teacher backbone and ``mu_y`` the class feature mean
on the teacher's training data. The teacher stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .longtail import LabeledSet
from .model import MlpModel, _forward_cache, backward, extract_features
from .numcore import CapacityError, DomainError, NumericError, RngStream, finite_diff_check, log_softmax

MAX_HALVINGS = 10


@dataclass
class DistilledSet:
    features: np.ndarray
    labels: np.ndarray
    ipc: int

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DomainError("features and labels disagree in length")
        counts = np.bincount(self.labels)
        if self.labels.size and (self.labels.size != counts.size * self.ipc or np.any(counts != self.ipc)):
            raise DomainError("distilled set must hold exactly ipc items per class")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def as_labeled(self) -> LabeledSet:
        return LabeledSet(self.features, self.labels, self.num_classes)


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 200
    learning_rate: float = 0.1
    reg_weight: float = 1.0
    init: str = "class_mean_plus_noise"
    init_scale: float = 0.1
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        if self.reg_weight < 0:
            raise DomainError("reg_weight must be >= 0")
        if self.init not in ("noise", "class_mean_plus_noise"):
            raise DomainError(f"unknown init {self.init!r}")


def round_robin_labels(num_classes: int, ipc: int) -> np.ndarray:
    return np.tile(np.arange(num_classes, dtype=np.int64), ipc)


def class_means(data: LabeledSet) -> np.ndarray:
    """Per-class mean of the raw inputs (K x D)."""
    x = np.asarray(data.features, dtype=np.float64)
    out = np.zeros((data.num_classes, x.shape[1]))
    for k in range(data.num_classes):
        rows = x[data.labels == k]
        if rows.shape[0] == 0:
            raise CapacityError(f"class {k} has no samples")
        out[k] = rows.mean(axis=0)
    return out


def class_feature_stats(teacher: MlpModel, data: LabeledSet) -> np.ndarray:
    """Mean backbone feature g(x) per class (K x H, or K x D when H == 0)."""
    feats = extract_features(teacher, data.features)
    out = np.zeros((data.num_classes, feats.shape[1]))
    for k in range(data.num_classes):
        rows = feats[data.labels == k]
        if rows.shape[0] == 0:
            raise CapacityError(f"class {k} has no samples")
        out[k] = rows.mean(axis=0)
    return out


def inversion_objective(teacher: MlpModel, x, y, stats, reg_weight: float,
                        ce_weight: float = 1.0):
    """Summed objective over items and its gradient w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    cache = _forward_cache(teacher, x)
    logits, feats, _ = cache
    logp = log_softmax(logits, axis=1)
    rows = np.arange(x.shape[0])
    diff = feats - stats[y]
    value = -ce_weight * float(logp[rows, y].sum()) + reg_weight * float(np.sum(diff * diff))
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits *= ce_weight
    _, dx = backward(teacher, x, cache, dlogits, dfeatures=2.0 * reg_weight * diff)
    return value, dx


def _descend(teacher, x, y, stats, cfg: DistillConfig, trace):
    lr = cfg.learning_rate / max(1.0, cfg.reg_weight)
    value, grad = inversion_objective(teacher, x, y, stats, cfg.reg_weight)
    trace.append(value)
    for step in range(cfg.steps):
        for _ in range(MAX_HALVINGS + 1):
            cand = x - lr * grad
            cand_value, cand_grad = inversion_objective(teacher, cand, y, stats, cfg.reg_weight)
            if np.isfinite(cand_value) and cand_value <= value:
                break
            lr *= 0.5
        else:
            # no decrease reachable within the halving budget: stationary
            break
        if not np.all(np.isfinite(cand)):
            raise NumericError(f"distillation diverged at step {step}")
        x, value, grad = cand, cand_value, cand_grad
        trace.append(value)
    return x


def distill_images(teacher: MlpModel, stats, ipc: int, cfg: DistillConfig,
                   init_centers=None, scale: float = 1.0,
                   traces: dict | None = None) -> DistilledSet:
    """Synthesize ``ipc`` items per class, class by class.

    ``init_centers`` (K x D input-space class means) is required for the
    ``class_mean_plus_noise`` init; noise std is ``cfg.init_scale * scale``.
    Pure ``noise`` init draws N(0, scale^2). The step size is divided by
    ``max(1, reg_weight)`` and halved whenever a step would increase the
    objective, so the objective never increases.
    """
    stats = np.asarray(stats, dtype=np.float64)
    k = teacher.num_classes
    if stats.shape[0] != k:
        raise DomainError(f"stats has {stats.shape[0]} rows, teacher has {k} classes")
    if ipc < 1:
        raise DomainError("ipc must be >= 1")
    d = teacher.dims[0]
    labels = round_robin_labels(k, ipc)
    out = np.zeros((labels.size, d))
    for c in range(k):
        g = cfg.rng.child("class", c).generator()
        noise = g.standard_normal((ipc, d))
        if cfg.init == "class_mean_plus_noise":
            if init_centers is None:
                raise DomainError("class_mean_plus_noise init needs init_centers")
            x0 = np.asarray(init_centers, dtype=np.float64)[c] + cfg.init_scale * scale * noise
        else:
            x0 = scale * noise
        y = np.full(ipc, c, dtype=np.int64)
        trace = []
        out[labels == c] = _descend(teacher, x0, y, stats, cfg, trace)
        if traces is not None:
            traces[c] = trace
    return DistilledSet(out.astype(np.float32), labels, ipc)


def input_grad_check(teacher: MlpModel, x, y, reg_weight: float, stats,
                     ce_weight: float = 1.0, grad_multiplier: float = 1.0,
                     step: float = 1e-5) -> float:
    """Finite-difference check of the inversion gradient w.r.t. the inputs.

    ``grad_multiplier`` scales the analytic gradient so a broken gradient
    can be fed to the detector deliberately.
    """
    x = np.asarray(x, dtype=np.float64)
    stats = np.asarray(stats, dtype=np.float64)
    _, grad = inversion_objective(teacher, x, y, stats, reg_weight, ce_weight)

    def f(v):
        return inversion_objective(teacher, v.reshape(x.shape), y, stats, reg_weight, ce_weight)[0]

    return finite_diff_check(f, x.ravel(), grad_multiplier * grad.ravel(), step)
