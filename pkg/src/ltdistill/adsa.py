"""Adaptive soft-label alignment.

Soft labels are logit-adjusted, ``softmax(f(x) - tau * log(pi))``, and
``tau`` is picked to make the class-wise mean confidence on the distilled
set as uniform as possible (population std across classes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import CapacityError, DomainError, softmax
from .softlabel import SoftLabelSet

INV_PHI = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class TauGrid:
    lo: float = 0.0
    hi: float = 3.0
    step: float = 0.01

    def __post_init__(self):
        if not (0 <= self.lo < self.hi) or self.step <= 0:
            raise DomainError(f"invalid tau grid lo={self.lo} hi={self.hi} step={self.step}")

    def points(self) -> np.ndarray:
        n = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(n)


@dataclass
class CalibrationResult:
    tau_star: float
    objective_value: float
    taus: np.ndarray
    objectives: np.ndarray
    objective_at_zero: float
    confidence_pre: np.ndarray
    confidence_post: np.ndarray
    inert: bool = False

    @property
    def trace(self) -> list[tuple[float, float]]:
        return list(zip(self.taus.tolist(), self.objectives.tolist()))


def _log_prior_offset(prior) -> np.ndarray:
    pi = np.asarray(prior, dtype=np.float64)
    if pi.ndim != 1 or np.any(~np.isfinite(pi)) or np.any(pi <= 0):
        raise DomainError("class prior must be strictly positive")
    logp = np.log(pi)
    # shifting by the max changes nothing after softmax but keeps a uniform prior exactly inert
    return logp - logp.max()


def adjust_logits(logits, prior, tau: float) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    offset = _log_prior_offset(prior)
    if logits.shape[-1] != offset.size:
        raise DomainError(f"logits have {logits.shape[-1]} classes, prior has {offset.size}")
    if tau == 0:
        return logits.copy()
    return logits - tau * offset


def calibrate_logits(logits, prior, tau: float) -> np.ndarray:
    """Row-wise ``softmax(logits - tau * log(prior))``."""
    return softmax(adjust_logits(logits, prior, tau), axis=-1)


def class_mean_confidence(probs, labels, num_classes: int) -> np.ndarray:
    """Mean of ``probs[m, labels[m]]`` over items of each class.

    A leading label-epoch axis, if present, is averaged out first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 3:
        # identical slices (zero jitter) must reduce exactly to one slice
        probs = probs[0] if np.all(probs == probs[0]) else probs.mean(axis=0)
    labels = np.asarray(labels, dtype=np.int64)
    conf = probs[np.arange(labels.size), labels]
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts[:num_classes] == 0):
        raise CapacityError(f"class {int(np.argmin(counts[:num_classes]))} has no items")
    return np.bincount(labels, weights=conf, minlength=num_classes) / counts


def confidence_spread(conf) -> float:
    conf = np.asarray(conf, dtype=np.float64)
    return float(np.sqrt(np.mean((conf - conf.mean()) ** 2)))


def adsa_objective(logits, labels, prior, tau: float) -> float:
    k = np.asarray(prior).size
    return confidence_spread(class_mean_confidence(calibrate_logits(logits, prior, tau), labels, k))


def golden_section(f, a: float, b: float, tol: float = 1e-6, max_iter: int = 100):
    """Minimize a unimodal ``f`` on ``[a, b]``; returns every (x, f(x)) evaluated."""
    evals = []
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    evals += [(c, fc), (d, fd)]
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
            evals.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
            evals.append((d, fd))
    return evals


def optimize_tau(logits, labels, prior, grid: TauGrid | None = None,
                 refine: bool = True) -> CalibrationResult:
    """Grid search over ``grid`` then a golden-section pass within one step.

    Ties go to the smallest tau. The refined point replaces the grid
    argmin only when strictly better, so the result never loses to any
    grid point.
    """
    grid = grid or TauGrid()
    k = np.asarray(prior).size
    labels = np.asarray(labels, dtype=np.int64)

    def objective(t):
        return adsa_objective(logits, labels, prior, t)

    taus = grid.points()
    values = np.array([objective(t) for t in taus])
    best = int(np.argmin(values))
    inert = best == 0 and float(values.max() - values.min()) <= 1e-12
    extra = []
    if refine and not inert:
        a = max(grid.lo, taus[best] - grid.step)
        b = min(grid.hi, taus[best] + grid.step)
        extra = golden_section(objective, a, b, tol=grid.step * 1e-3)
    all_taus = np.concatenate([taus, [t for t, _ in extra]])
    all_vals = np.concatenate([values, [v for _, v in extra]])
    order = np.lexsort((all_taus, all_vals))
    star = int(order[0])
    tau_star = float(all_taus[star])
    base = calibrate_logits(logits, prior, 0.0)
    return CalibrationResult(
        tau_star=tau_star,
        objective_value=float(all_vals[star]),
        taus=all_taus,
        objectives=all_vals,
        objective_at_zero=objective(0.0),
        confidence_pre=class_mean_confidence(base, labels, k),
        confidence_post=class_mean_confidence(calibrate_logits(logits, prior, tau_star), labels, k),
        inert=inert,
    )


def calibrate_softlabel_set(sl: SoftLabelSet, prior, result: CalibrationResult | float) -> SoftLabelSet:
    """Fold the adjustment at ``tau_star`` into every label slice.

    The returned set stores adjusted logits, so ``.probs()`` yields the
    calibrated probability rows.
    """
    tau = result.tau_star if isinstance(result, CalibrationResult) else float(result)
    if sl.logits.shape[-1] != np.asarray(prior).size:
        raise DomainError("soft-label class count does not match the prior")
    return SoftLabelSet(adjust_logits(sl.logits, prior, tau), sl.jitter_sigma,
                        sl.teacher_ids, sl.tau + tau)
