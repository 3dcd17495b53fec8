"""Probability primitives, seeded RNG streams and a finite-difference checker.

Bulk tensors are stored as float32 on disk; everything here reduces in
float64 so the probability tolerances (1e-6 on row sums, 1e-12 on
identities) hold.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """Input outside the domain of an operation."""


class CapacityError(ValueError):
    """Not enough samples/items to satisfy a request."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class InfiniteKLError(ArithmeticError):
    """KL divergence is infinite because p has mass where q has none.

    ``where`` carries the offending index (or (x, y) pair for joints).
    """

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


RNG_ALGORITHM = "philox4x64-seedseq"


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise DomainError(f"stream key must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by numpy's counter-based Philox generator keyed through a
    ``SeedSequence``; OS entropy is never consulted. ``stream_id`` is a
    tuple of non-negative ints; string keys are hashed with crc32.
    """

    seed: int
    stream_id: tuple = ()
    algorithm: str = RNG_ALGORITHM

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream_id)
        return np.random.Generator(np.random.Philox(ss))


def _as_finite_vector(v, name="input") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise DomainError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def log_sum_exp(logits, axis: int = -1) -> np.ndarray | float:
    x = _as_finite_vector(logits, "logits")
    m = np.max(x, axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = _as_finite_vector(logits, "logits")
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``; works row-wise on matrices."""
    x = _as_finite_vector(logits, "logits")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def check_prob_vector(p, name="p", atol: float = 1e-6) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise DomainError(f"{name} entries must lie in [0, 1]")
    if abs(arr.sum() - 1.0) > atol:
        raise DomainError(f"{name} sums to {arr.sum():.9g}, expected 1")
    return arr


def kl_divergence(p, q) -> float:
    """sum p_i ln(p_i / q_i) with 0 ln 0 = 0.

    Raises InfiniteKLError when q_i == 0 < p_i.
    """
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    if p.shape != q.shape:
        raise DomainError(f"length mismatch: {p.size} vs {q.size}")
    support = p > 0
    bad = np.flatnonzero(support & (q <= 0))
    if bad.size:
        raise InfiniteKLError(f"q has no mass at index {int(bad[0])} where p > 0", int(bad[0]))
    return max(float(np.sum(p[support] * np.log(p[support] / q[support]))), 0.0)


def shannon_entropy(p) -> float:
    p = check_prob_vector(p, "p")
    nz = p[p > 0]
    return max(float(-np.sum(nz * np.log(nz))), 0.0)


def row_entropy(probs) -> np.ndarray:
    """Entropy of every row of a probability matrix (no validation)."""
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy_soft(logits, target) -> float:
    logits = _as_finite_vector(logits, "logits")
    target = check_prob_vector(target, "target")
    if logits.shape != target.shape:
        raise DomainError(f"length mismatch: {logits.size} vs {target.size}")
    return float(-np.sum(target * log_softmax(logits)))


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    params: Sequence[float],
    analytic_grad: Sequence[float],
    step: float = 1e-5,
) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    The relative error per coordinate is |a - n| / max(|n|, 1e-8), measured
    against the numerical reference, so a gradient off by 2x reports 1.0.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    x = np.array(params, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise DomainError(f"gradient has {g.size} entries, parameters have {x.size}")
    numeric = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        hi = float(loss_fn(x.copy()))
        x[i] = orig - step
        lo = float(loss_fn(x.copy()))
        x[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise DomainError(f"loss is non-finite near coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.abs(numeric), 1e-8)
    return float(np.max(np.abs(g - numeric) / denom))
