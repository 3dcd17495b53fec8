"""Acceptance criteria 1-11, each at its stated tolerance and runtime budget."""

import filecmp
import time

import mpmath
import numpy as np
import pytest

from conftest import report_criterion
from ltdistill.adsa import TauGrid, adsa_objective, calibrate_logits, optimize_tau
from ltdistill.bound import (
    DiscreteJoint,
    form_equivalence_check,
    form_gap,
    gaussian_kl_diag,
    gaussian_log_ratio,
    gaussian_sampler,
    label_prior_gap,
    mc_kl_estimate,
    reweight_prior,
)
from ltdistill.cli import main
from ltdistill.config import from_dict
from ltdistill.distill import input_grad_check
from ltdistill.harness import entropy_trend, run_pipeline
from ltdistill.longtail import exponential_counts
from ltdistill.model import init_mlp, loss_and_grad
from ltdistill.numcore import RngStream, finite_diff_check, kl_divergence, softmax

mpmath.mp.dps = 50

DEFAULT_SEEDS = [0, 1, 2, 3, 4]


class TestCalibration:
    def test_c01_identity_and_invariance(self):
        t0 = time.perf_counter()
        g = np.random.default_rng(101)
        z = g.normal(scale=3.0, size=(1000, 10))
        prior = g.dirichlet(np.ones(10))
        err_identity = np.max(np.abs(calibrate_logits(z, prior, 0.0) - softmax(z, axis=1)))
        err_uniform = max(np.max(np.abs(calibrate_logits(z, np.full(10, 0.1), tau) - softmax(z, axis=1)))
                          for tau in (0.0, 0.37, 1.0, 2.5, 3.0))
        elapsed = time.perf_counter() - t0
        ok = err_identity < 1e-12 and err_uniform < 1e-12 and elapsed < 1.0
        report_criterion(1, ok, f"tau=0 err {err_identity:.1e}, uniform-prior err {err_uniform:.1e}, "
                                f"{elapsed:.2f}s")
        assert ok

    def test_c02_tau_recovery(self):
        t0 = time.perf_counter()
        prior = np.array([0.4, 0.25, 0.15, 0.1, 0.06, 0.04])
        labels = np.repeat(np.arange(6), 4)
        results = []
        for c in (0.5, 1.0, 1.5, 2.0, 2.5):
            logits = np.tile(c * np.log(prior), (labels.size, 1))
            res = optimize_tau(logits, labels, prior)
            results.append((c, res.tau_star, res.objective_value))
        elapsed = time.perf_counter() - t0
        ok = all(abs(t - c) <= 0.01 and v < 1e-8 for c, t, v in results) and elapsed < 5.0
        worst = max(abs(t - c) for c, t, _ in results)
        report_criterion(2, ok, f"max |tau*-c| {worst:.1e}, max objective "
                                f"{max(v for *_, v in results):.1e}, {elapsed:.2f}s")
        assert ok

    def test_c03_argmin_dominance(self):
        grid = TauGrid().points()
        violations = 0
        for i in range(50):
            g = np.random.default_rng(300 + i)
            k = int(g.integers(2, 8))
            prior = g.dirichlet(np.ones(k))
            labels = np.arange(5 * k) % k
            logits = g.normal(scale=2.0, size=(labels.size, k)) + g.uniform(0, 3) * np.log(prior)
            res = optimize_tau(logits, labels, prior)
            star = adsa_objective(logits, labels, prior, res.tau_star)
            violations += int(any(star > adsa_objective(logits, labels, prior, t) for t in grid))
        ok = violations == 0
        report_criterion(3, ok, f"{violations} of 50 fixtures with a grid point below objective(tau*)")
        assert ok


class TestGradients:
    def test_c04_finite_differences(self):
        t0 = time.perf_counter()
        param_errs = []
        for i in range(24):
            g = np.random.default_rng(400 + i)
            d, h, k = int(g.integers(2, 6)), int(g.integers(0, 7)), int(g.integers(2, 6))
            model = init_mlp((d, h, k), ("relu", "tanh")[i % 2], RngStream(400 + i))
            X = g.normal(size=(int(g.integers(2, 9)), d))
            targets = g.dirichlet(np.ones(k), size=X.shape[0]) if i % 3 else g.integers(0, k, size=X.shape[0])
            wd = float(g.choice([0.0, 1e-3, 1e-2]))
            _, grads = loss_and_grad(model, X, targets, wd)
            param_errs.append(finite_diff_check(
                lambda v: loss_and_grad(model.with_flat(v), X, targets, wd)[0],
                model.flat(), np.concatenate([q.ravel() for q in grads])))
        input_errs = []
        for i in range(12):
            g = np.random.default_rng(500 + i)
            d, h, k = int(g.integers(2, 6)), int(g.integers(0, 7)), int(g.integers(2, 6))
            teacher = init_mlp((d, h, k), ("tanh", "relu")[i % 2], RngStream(500 + i))
            feat_dim = h if h else d
            x = g.normal(size=(int(g.integers(1, 5)), d))
            y = g.integers(0, k, size=x.shape[0])
            input_errs.append(input_grad_check(teacher, x, y, float(g.uniform(0.1, 2.0)),
                                               g.normal(size=(k, feat_dim))))
        elapsed = time.perf_counter() - t0
        ok = max(param_errs) < 1e-4 and max(input_errs) < 1e-4 and elapsed < 30
        report_criterion(4, ok, f"{len(param_errs)} param checks max {max(param_errs):.1e}, "
                                f"{len(input_errs)} input checks max {max(input_errs):.1e}, {elapsed:.1f}s")
        assert ok


class TestBound:
    def test_c05_form_equivalence(self):
        t0 = time.perf_counter()
        root = RngStream(5).child("acceptance")
        p_tr = reweight_prior(DiscreteJoint.random(4, 3, root.child("train")), [0.6, 0.3, 0.1])
        p_te = reweight_prior(p_tr, np.full(3, 1 / 3))
        dds = [DiscreteJoint.random(4, 3, root.child("dd", i)) for i in range(100)]
        dev = form_equivalence_check(p_tr, p_te, dds)
        matched = max(abs(form_gap(p_te, dd, p_te)) for dd in dds)
        elapsed = time.perf_counter() - t0
        ok = dev < 1e-9 and matched < 1e-9 and elapsed < 5
        report_criterion(5, ok, f"max deviation {dev:.1e}, matched-prior |gap| {matched:.1e}, {elapsed:.2f}s")
        assert ok

    def test_c06_kl_oracles(self):
        t0 = time.perf_counter()
        disc = []
        for i in range(20):
            g = np.random.default_rng(600 + i)
            k = int(g.integers(2, 12))
            p, q = g.dirichlet(np.ones(k)), g.dirichlet(np.ones(k))
            oracle = mpmath.fsum(mpmath.mpf(a) * mpmath.log(mpmath.mpf(a) / mpmath.mpf(b)) for a, b in zip(p, q))
            disc.append(abs(kl_divergence(p, q) - float(oracle)))
        z_scores = []
        for i in range(10):
            g = np.random.default_rng(650 + i)
            dim = int(g.integers(1, 6))
            mu1, mu2 = g.normal(size=dim), g.normal(size=dim)
            v1, v2 = g.uniform(0.5, 2.0, dim), g.uniform(0.5, 2.0, dim)
            est, se = mc_kl_estimate(gaussian_sampler(mu1, v1), gaussian_log_ratio(mu1, v1, mu2, v2),
                                     10**6, RngStream(650 + i))
            z_scores.append(abs(est - gaussian_kl_diag(mu1, v1, mu2, v2)) / se)
        elapsed = time.perf_counter() - t0
        ok = max(disc) < 1e-12 and max(z_scores) < 3 and elapsed < 60
        report_criterion(6, ok, f"discrete max err {max(disc):.1e}, Gaussian max |z| {max(z_scores):.2f} "
                                f"over 10 pairs, {elapsed:.1f}s")
        assert ok

    def test_c07_prior_gap_monotone(self):
        gaps = {k: [label_prior_gap(exponential_counts(k, 5000, r)) for r in (2, 10, 50, 100)] for k in (10, 100)}
        ok = all(all(b > a for a, b in zip(v, v[1:])) for v in gaps.values())
        detail = "; ".join(f"K={k}: " + ", ".join(f"{x:.4f}" for x in v) for k, v in gaps.items())
        report_criterion(7, ok, detail)
        assert ok


@pytest.mark.slow
class TestEndToEnd:
    def test_c08_adsa_vs_raw(self):
        t0 = time.perf_counter()
        cfg = from_dict({"seeds": DEFAULT_SEEDS})
        tail_raw, tail_adsa, all_raw, all_adsa = [], [], [], []
        for seed in cfg.seeds:
            m = run_pipeline(cfg, seed, variants=["raw", "adsa"]).metrics
            tail_raw.append(m["raw"].split_accuracy["tail"])
            tail_adsa.append(m["adsa"].split_accuracy["tail"])
            all_raw.append(m["raw"].overall_accuracy)
            all_adsa.append(m["adsa"].overall_accuracy)
        wins = sum(a > r for a, r in zip(tail_adsa, tail_raw))
        elapsed = time.perf_counter() - t0
        ok = wins >= 4 and np.median(all_adsa) >= np.median(all_raw) and elapsed < 300
        report_criterion(8, ok, f"tail wins {wins}/5, median overall raw {np.median(all_raw):.3f} "
                                f"adsa {np.median(all_adsa):.3f}, {elapsed:.1f}s")
        assert ok

    def test_c09_entropy_trend(self):
        t0 = time.perf_counter()
        cfg = from_dict({"seeds": DEFAULT_SEEDS})
        rhos = [entropy_trend(cfg, seed, "C3", [10, 25, 50, 100])[1] for seed in cfg.seeds]
        negative = sum(r < 0 for r in rhos)
        elapsed = time.perf_counter() - t0
        ok = negative >= 4 and elapsed < 600
        report_criterion(9, ok, f"negative Spearman in {negative}/5 seeds "
                                f"({', '.join(f'{r:.2f}' for r in rhos)}), {elapsed:.1f}s")
        assert ok

    def test_c10_epk_budget(self):
        base = {"seeds": DEFAULT_SEEDS, "relabel": {"epochs": 100}}
        cfg0 = from_dict({**base, "relabel": {"epochs": 100, "jitter": 0.0}})
        exact = True
        for seed in cfg0.seeds:
            a = run_pipeline(cfg0, seed, schedule_k=1)
            b = run_pipeline(cfg0, seed, schedule_k=100)
            exact &= all(np.array_equal(a.models[v].flat(), b.models[v].flat()) for v in a.models)
        cfg = from_dict({**base, "relabel": {"epochs": 100, "jitter": 0.05}})
        diffs = {"raw": [], "adsa": []}
        for seed in cfg.seeds:
            full = run_pipeline(cfg, seed, schedule_k=100).metrics
            short = run_pipeline(cfg, seed, schedule_k=10).metrics
            for v in diffs:
                diffs[v].append(short[v].overall_accuracy - full[v].overall_accuracy)
        med = {v: float(np.median(d)) for v, d in diffs.items()}
        ok = exact and all(abs(m) <= 0.02 for m in med.values())
        report_criterion(10, ok, f"jitter 0 bit-exact: {exact}; median acc(k=10) - acc(k=100): "
                                 f"raw {med['raw']:+.4f}, adsa {med['adsa']:+.4f}")
        assert ok


@pytest.mark.slow
class TestDeterminism:
    def test_c11_smoke_byte_identical(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        codes = [main(["run", "--config", "smoke", "--out", str(o)]) for o in outs]
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        same = [filecmp.cmp(outs[0] / f, outs[1] / f, shallow=False) for f in files]
        second = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
        csvs = [f for f in files if f.suffix == ".csv"]
        ok = codes == [0, 0] and files == second and all(same) and csvs and (outs[0] / "manifest.json").exists()
        report_criterion(11, ok, f"{sum(same)}/{len(files)} files identical "
                                 f"({len(csvs)} CSVs, manifest included)")
        assert ok
