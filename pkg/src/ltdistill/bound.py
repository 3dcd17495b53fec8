"""Exact and Monte-Carlo evaluators for the imbalance-aware bound terms.

For finite joints p(x, y) the discrepancy between the (balanced) test
distribution and a distilled distribution can be written two ways:

* class-wise:  KL(p_te(y) || p_dd(y)) + sum_y p_te(y) KL(p_tr(x|y) || p_dd(x|y))
* posterior:   E_x KL(p_te(y|x) || p_dd(y|x)) + KL(p_te(x) || p_dd(x)) + const

when p_te only reweights the class prior of p_tr. ``form_equivalence_check``
confirms numerically that the difference does not depend on p_dd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numcore import DomainError, InfiniteKLError, NumericError, RngStream, kl_divergence

REWEIGHT_TOL = 1e-10


@dataclass(frozen=True)
class DiscreteJoint:
    """Probability table over (x, y), shape (Nx, K)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.size == 0:
            raise DomainError("joint table must be a non-empty Nx x K matrix")
        if np.any(~np.isfinite(t)) or np.any(t < 0):
            raise DomainError("joint entries must be finite and non-negative")
        if abs(t.sum() - 1.0) > 1e-9:
            raise DomainError(f"joint sums to {t.sum():.12g}, expected 1")
        object.__setattr__(self, "table", t)

    @property
    def shape(self):
        return self.table.shape

    def px(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def py(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def x_given_y(self) -> np.ndarray:
        py = self.py()
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(py > 0, self.table / py, 0.0)

    def y_given_x(self) -> np.ndarray:
        px = self.px()[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(px > 0, self.table / px, 0.0)

    @classmethod
    def random(cls, nx: int, k: int, rng: RngStream, concentration: float = 1.0) -> "DiscreteJoint":
        """Full-support joint drawn from a flat Dirichlet."""
        g = rng.generator()
        t = g.dirichlet(np.full(nx * k, concentration)).reshape(nx, k)
        t = np.maximum(t, 1e-12)
        return cls(t / t.sum())


def reweight_prior(p_tr: DiscreteJoint, new_prior) -> DiscreteJoint:
    """p(x, y) * new_prior(y) / p_tr(y): same class-conditionals, new prior."""
    prior = np.asarray(new_prior, dtype=np.float64)
    py = p_tr.py()
    if prior.shape != py.shape:
        raise DomainError("prior length does not match the joint")
    if np.any((prior > 0) & (py <= 0)):
        raise DomainError("cannot reweight onto a class p_tr never observes")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(py > 0, prior / py, 0.0)
    return DiscreteJoint(p_tr.table * w)


def _kl_rows_weighted(p_rows, q_rows, weights, axis_name):
    """sum_i w_i KL(p_i || q_i) with infinite-support detection per cell."""
    total = 0.0
    for i, w in enumerate(weights):
        if w <= 0:
            continue
        p, q = p_rows[i], q_rows[i]
        bad = np.flatnonzero((p > 0) & (q <= 0))
        if bad.size:
            raise InfiniteKLError(f"p_dd has no mass at {axis_name}", (i, int(bad[0])))
        nz = p > 0
        total += w * float(np.sum(p[nz] * np.log(p[nz] / q[nz])))
    return total


def _kl_or_flag(p, q, where):
    try:
        return kl_divergence(p / p.sum(), q / q.sum())
    except InfiniteKLError as exc:
        raise InfiniteKLError(f"p_dd has no mass at {where}={exc.where}", exc.where) from None


@dataclass
class ClasswiseTerms:
    value: float
    prior_term: float
    conditional_terms: np.ndarray
    weighted_conditional: float


def form_classwise(p_tr: DiscreteJoint, p_dd: DiscreteJoint, p_te_prior) -> ClasswiseTerms:
    p_te_prior = np.asarray(p_te_prior, dtype=np.float64)
    if p_tr.shape != p_dd.shape or p_te_prior.size != p_tr.shape[1]:
        raise DomainError("joint shapes and prior length must agree")
    prior_term = _kl_or_flag(p_te_prior, p_dd.py(), "y")
    ctr, cdd = p_tr.x_given_y().T, p_dd.x_given_y().T
    cond = np.zeros(p_tr.shape[1])
    for y in range(p_tr.shape[1]):
        if p_te_prior[y] > 0:
            bad = np.flatnonzero((ctr[y] > 0) & (cdd[y] <= 0))
            if bad.size:
                raise InfiniteKLError("p_dd(x|y) has no mass where p_tr(x|y) does", (int(bad[0]), y))
            nz = ctr[y] > 0
            cond[y] = float(np.sum(ctr[y][nz] * np.log(ctr[y][nz] / cdd[y][nz])))
    weighted = float(np.dot(p_te_prior, cond))
    return ClasswiseTerms(prior_term + weighted, prior_term, cond, weighted)


@dataclass
class PosteriorTerms:
    value_without_const: float
    posterior_term: float
    marginal_term: float


def form_posterior(p_tr: DiscreteJoint, p_dd: DiscreteJoint, p_te: DiscreteJoint) -> PosteriorTerms:
    """The two p_dd-dependent terms of the posterior form; the constant is excluded."""
    if not (p_tr.shape == p_dd.shape == p_te.shape):
        raise DomainError("joint shapes must agree")
    px_te = p_te.px()
    try:
        post = _kl_rows_weighted(p_te.y_given_x(), p_dd.y_given_x(), px_te, "(x, y)")
    except InfiniteKLError as exc:
        raise InfiniteKLError(f"p_dd(y|x) has no mass at (x, y)={exc.where}", exc.where) from None
    marg = _kl_or_flag(px_te, p_dd.px(), "x")
    return PosteriorTerms(post + marg, post, marg)


def check_reweighting(p_tr: DiscreteJoint, p_te: DiscreteJoint) -> None:
    if p_tr.shape != p_te.shape:
        raise DomainError("joint shapes must agree")
    py_te = p_te.py()
    mask = py_te > 0
    if np.any(mask & (p_tr.py() <= 0)):
        raise DomainError("p_te puts mass on a class absent from p_tr")
    diff = np.abs(p_tr.x_given_y() - p_te.x_given_y())[:, mask]
    if diff.size and diff.max() > REWEIGHT_TOL:
        raise DomainError(
            f"p_te is not a prior reweighting of p_tr (class-conditional gap {diff.max():.3g})"
        )


def form_gap(p_tr, p_dd, p_te) -> float:
    """class-wise form minus the p_dd-dependent part of the posterior form."""
    return form_classwise(p_tr, p_dd, p_te.py()).value - form_posterior(p_tr, p_dd, p_te).value_without_const


def form_equivalence_check(p_tr: DiscreteJoint, p_te: DiscreteJoint, dd_list) -> float:
    """max_i |gap(p_dd_i) - gap(p_dd_0)|; zero when the two forms agree up to a constant."""
    check_reweighting(p_tr, p_te)
    if not dd_list:
        raise DomainError("dd_list is empty")
    gaps = np.array([form_gap(p_tr, dd, p_te) for dd in dd_list])
    return float(np.max(np.abs(gaps - gaps[0])))


def gaussian_kl_diag(mu1, var1, mu2, var2) -> float:
    """KL(N(mu1, diag var1) || N(mu2, diag var2))."""
    mu1, var1, mu2, var2 = (np.asarray(a, dtype=np.float64) for a in (mu1, var1, mu2, var2))
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise DomainError("variances must be positive")
    return max(float(0.5 * np.sum(np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0)), 0.0)


def gaussian_log_ratio(mu1, var1, mu2, var2) -> Callable[[np.ndarray], np.ndarray]:
    """x -> log N(x; mu1, var1) - log N(x; mu2, var2) for diagonal Gaussians."""
    mu1, var1, mu2, var2 = (np.asarray(a, dtype=np.float64) for a in (mu1, var1, mu2, var2))
    const = 0.5 * np.sum(np.log(var2 / var1))

    def log_ratio(x):
        return const - 0.5 * np.sum((x - mu1) ** 2 / var1 - (x - mu2) ** 2 / var2, axis=1)

    return log_ratio


def mc_kl_estimate(sampler: Callable[[np.random.Generator, int], np.ndarray],
                   log_ratio: Callable[[np.ndarray], np.ndarray],
                   n: int, rng: RngStream, block: int = 100_000) -> tuple[float, float]:
    """Mean and standard error of ``log_ratio`` over ``n`` draws from ``sampler``.

    Draws come in fixed-size blocks, each from its own child stream, and
    are reduced in block order.
    """
    if n < 1000:
        raise DomainError("n must be >= 1000")
    total = 0.0
    total_sq = 0.0
    done = 0
    b = 0
    while done < n:
        m = min(block, n - done)
        vals = np.asarray(log_ratio(sampler(rng.child("block", b).generator(), m)), dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"non-finite log-ratio in block {b}")
        total += float(vals.sum())
        total_sq += float(np.dot(vals, vals))
        done += m
        b += 1
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, math.sqrt(var / n)


def gaussian_sampler(mu, var):
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.sqrt(np.asarray(var, dtype=np.float64))

    def sample(g: np.random.Generator, m: int) -> np.ndarray:
        return mu + sd * g.standard_normal((m, mu.size))

    return sample


def label_prior_gap(counts, test_prior=None) -> float:
    """KL(test prior || training prior); the test prior defaults to uniform."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise DomainError("every class needs a positive count")
    q = counts / counts.sum()
    p = np.full(q.size, 1.0 / q.size) if test_prior is None else np.asarray(test_prior, dtype=np.float64)
    return kl_divergence(p, q)


@dataclass
class BoundReport:
    prior_term: float
    conditional_terms: np.ndarray
    weighted_conditional: float
    posterior_term: float
    marginal_term: float
    l_dd: float
    loss_bound_constant: float = 1.0
    infinite: dict = field(default_factory=dict)

    @property
    def discrepancy(self) -> float:
        if self.infinite.get("prior_term") or self.infinite.get("weighted_conditional"):
            return math.inf
        return self.prior_term + self.weighted_conditional

    @property
    def bound(self) -> float:
        r = self.discrepancy
        if math.isinf(r):
            return math.inf
        return self.l_dd + self.loss_bound_constant / (2 * math.sqrt(2)) * math.sqrt(r)

    def rows(self) -> list[tuple[str, float, bool]]:
        out = [("prior_term", self.prior_term, bool(self.infinite.get("prior_term")))]
        for y, v in enumerate(self.conditional_terms):
            out.append((f"conditional_term_{y}", float(v), bool(self.infinite.get(f"conditional_term_{y}"))))
        out += [
            ("weighted_conditional", self.weighted_conditional, bool(self.infinite.get("weighted_conditional"))),
            ("posterior_term", self.posterior_term, bool(self.infinite.get("posterior_term"))),
            ("marginal_term", self.marginal_term, bool(self.infinite.get("marginal_term"))),
            ("l_dd_empirical", self.l_dd, False),
            ("discrepancy", self.discrepancy, math.isinf(self.discrepancy)),
            ("bound_empirical", self.bound, math.isinf(self.bound)),
        ]
        return out


def bound_report(p_tr: DiscreteJoint, p_dd: DiscreteJoint, p_te: DiscreteJoint,
                 l_dd: float, loss_bound_constant: float = 1.0) -> BoundReport:
    """Assemble every term; support violations become flagged infinities."""
    if loss_bound_constant <= 0:
        raise DomainError("loss_bound_constant must be positive")
    k = p_tr.shape[1]
    infinite = {}
    prior_te = p_te.py()
    try:
        prior_term = _kl_or_flag(prior_te, p_dd.py(), "y")
    except InfiniteKLError:
        prior_term, infinite["prior_term"] = math.inf, True
    ctr, cdd = p_tr.x_given_y().T, p_dd.x_given_y().T
    cond = np.zeros(k)
    for y in range(k):
        if prior_te[y] <= 0:
            continue
        if np.any((ctr[y] > 0) & (cdd[y] <= 0)):
            cond[y], infinite[f"conditional_term_{y}"] = math.inf, True
            infinite["weighted_conditional"] = True
            continue
        nz = ctr[y] > 0
        cond[y] = float(np.sum(ctr[y][nz] * np.log(ctr[y][nz] / cdd[y][nz])))
    weighted = math.inf if infinite.get("weighted_conditional") else float(np.dot(prior_te, cond))
    try:
        posterior_term = _kl_rows_weighted(p_te.y_given_x(), p_dd.y_given_x(), p_te.px(), "(x, y)")
    except InfiniteKLError:
        posterior_term, infinite["posterior_term"] = math.inf, True
    try:
        marginal_term = _kl_or_flag(p_te.px(), p_dd.px(), "x")
    except InfiniteKLError:
        marginal_term, infinite["marginal_term"] = math.inf, True
    return BoundReport(prior_term, cond, weighted, posterior_term, marginal_term,
                       float(l_dd), float(loss_bound_constant), infinite)
