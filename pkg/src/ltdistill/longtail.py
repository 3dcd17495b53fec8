"""Long-tailed dataset construction and synthetic Gaussian-mixture data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import CapacityError, DomainError, RngStream


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    base_count: int
    imbalance_factor: float = 1.0
    scheme: str = "exponential"
    # perturbation scheme only
    head_count: int = 0
    total_budget: int = 0
    num_varied: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError("num_classes must be >= 2")
        if self.scheme not in ("exponential", "perturbation"):
            raise DomainError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "exponential":
            if self.imbalance_factor < 1:
                raise DomainError("imbalance_factor must be >= 1")
            if self.base_count < self.imbalance_factor:
                raise DomainError("base_count must be >= imbalance_factor so the tail keeps a sample")
        else:
            if not self.num_varied < self.num_classes:
                raise DomainError("num_varied must be < num_classes")
            if self.num_varied * self.head_count > self.total_budget:
                raise DomainError("num_varied * head_count exceeds total_budget")

    def counts(self) -> np.ndarray:
        if self.scheme == "exponential":
            return exponential_counts(self.num_classes, self.base_count, self.imbalance_factor)
        return perturbation_counts(self.head_count, self.total_budget, self.num_varied, self.num_classes)


@dataclass
class LabeledSet:
    """Features (N x D) with integer labels in [0, K)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DomainError(
                f"features {self.features.shape} do not match labels {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError("labels out of range [0, K)")
        self.class_counts = np.bincount(self.labels, minlength=self.num_classes)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class MixtureSpec:
    """Per-class diagonal Gaussians: means (K x D), variances (K x D)."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if means.ndim != 2 or means.shape != var.shape:
            raise DomainError("means and variances must both be K x D")
        if not np.all(var > 0):
            raise DomainError("all variances must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def random(cls, num_classes: int, dim: int, separation: float, rng: RngStream,
               variance: float = 1.0) -> "MixtureSpec":
        """Class means drawn i.i.d. N(0, separation^2 I); shared isotropic variance."""
        g = rng.generator()
        means = g.normal(0.0, separation, size=(num_classes, dim))
        return cls(means, np.full((num_classes, dim), float(variance)))


def exponential_counts(num_classes: int, base_count: int, imbalance_factor: float) -> np.ndarray:
    """n_i = round(n0 * r^(-i/(K-1))), clamped to >= 1."""
    if imbalance_factor < 1:
        raise DomainError("imbalance_factor must be >= 1")
    if num_classes < 2:
        raise DomainError("num_classes must be >= 2")
    i = np.arange(num_classes, dtype=np.float64)
    raw = base_count * np.power(float(imbalance_factor), -i / (num_classes - 1))
    # round-half-up rather than numpy's banker's rounding
    return np.maximum(np.floor(raw + 0.5), 1).astype(np.int64)


def perturbation_counts(head_count: int, total_budget: int, num_varied: int,
                        num_classes: int) -> np.ndarray:
    """First ``num_varied`` classes get ``head_count``; the rest share the remainder."""
    if num_classes <= num_varied:
        raise DomainError("num_classes must exceed num_varied")
    if head_count < 0 or num_varied * head_count > total_budget:
        raise DomainError(
            f"{num_varied} x {head_count} varied images exceed the budget of {total_budget}"
        )
    rest = (total_budget - num_varied * head_count) / (num_classes - num_varied)
    counts = np.empty(num_classes, dtype=np.int64)
    counts[:num_varied] = head_count
    counts[num_varied:] = int(np.floor(rest + 0.5))
    return counts


def class_prior(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise DomainError("counts must be a non-empty vector")
    if np.any(counts < 1):
        raise DomainError(f"class {int(np.argmax(counts < 1))} has zero count; prior must be positive")
    return counts / counts.sum()


def subsample_longtail(base: LabeledSet, counts, rng: RngStream) -> LabeledSet:
    """Draw ``counts[k]`` samples of class k without replacement.

    Output is grouped by class in ascending order; within a class the
    selection order is the random draw order.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (base.num_classes,):
        raise DomainError(f"expected {base.num_classes} counts, got {counts.shape}")
    picks = []
    for k in range(base.num_classes):
        pool = np.flatnonzero(base.labels == k)
        if counts[k] > pool.size:
            raise CapacityError(f"class {k} has {pool.size} samples, {counts[k]} requested")
        g = rng.child("class", k).generator()
        picks.append(pool[g.permutation(pool.size)[: counts[k]]])
    idx = np.concatenate(picks) if picks else np.empty(0, dtype=np.int64)
    return LabeledSet(base.features[idx], base.labels[idx], base.num_classes)


def gaussian_mixture_generate(mix: MixtureSpec, counts, rng: RngStream) -> LabeledSet:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (mix.num_classes,):
        raise DomainError(f"expected {mix.num_classes} counts, got {counts.shape}")
    feats, labels = [], []
    for k in range(mix.num_classes):
        g = rng.child("class", k).generator()
        z = g.standard_normal((int(counts[k]), mix.dim))
        feats.append(mix.means[k] + z * np.sqrt(mix.variances[k]))
        labels.append(np.full(int(counts[k]), k, dtype=np.int64))
    return LabeledSet(np.concatenate(feats).astype(np.float32), np.concatenate(labels), mix.num_classes)


def balanced_counts(num_classes: int, per_class: int) -> np.ndarray:
    return np.full(num_classes, int(per_class), dtype=np.int64)


def feature_scale(data: LabeledSet) -> float:
    """Root-mean per-dimension variance of the features."""
    x = np.asarray(data.features, dtype=np.float64)
    return float(np.sqrt(np.mean(np.var(x, axis=0))))
