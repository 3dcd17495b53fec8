import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltdistill import artifacts
from ltdistill.adsa import (
    TauGrid,
    adsa_objective,
    calibrate_logits,
    calibrate_softlabel_set,
    class_mean_confidence,
    confidence_spread,
    golden_section,
    optimize_tau,
)
from ltdistill.numcore import CapacityError, DomainError, softmax
from ltdistill.softlabel import SoftLabelSet


def constructed_fixture(c, prior, per_class=3):
    k = len(prior)
    labels = np.repeat(np.arange(k), per_class)
    logits = np.tile(c * np.log(prior), (labels.size, 1))
    return logits, labels


class TestCalibrateLogits:
    def test_tau_zero_is_softmax(self, rng):
        z = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(calibrate_logits(z, [0.4, 0.3, 0.2, 0.1], 0.0), softmax(z, axis=1))

    @pytest.mark.parametrize("tau", [0.3, 1.0, 2.7])
    def test_uniform_prior_inert(self, tau, rng):
        z = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(calibrate_logits(z, np.full(4, 0.25), tau), softmax(z, axis=1))

    def test_known_value(self):
        np.testing.assert_allclose(calibrate_logits([[0.0, 0.0]], [0.8, 0.2], 1.0), [[0.2, 0.8]], atol=1e-15)

    def test_bad_prior(self):
        with pytest.raises(DomainError):
            calibrate_logits([[0.0, 0.0]], [1.0, 0.0], 1.0)
        with pytest.raises(DomainError):
            calibrate_logits([[0.0, 0.0, 0.0]], [0.5, 0.5], 1.0)


class TestClassMeanConfidence:
    def test_identity_rows(self):
        np.testing.assert_array_equal(class_mean_confidence(np.eye(3), [0, 1, 2], 3), [1, 1, 1])

    def test_uniform(self):
        np.testing.assert_allclose(class_mean_confidence(np.full((6, 3), 1 / 3), [0, 1, 2] * 2, 3), 1 / 3)

    def test_group_by_oracle(self, rng):
        p = rng.dirichlet(np.ones(4), size=40)
        y = rng.integers(0, 4, size=40)
        y[:4] = np.arange(4)
        oracle = [np.mean([p[i, k] for i in range(40) if y[i] == k]) for k in range(4)]
        np.testing.assert_allclose(class_mean_confidence(p, y, 4), oracle, atol=1e-12)

    def test_slices_averaged(self, rng):
        p = rng.dirichlet(np.ones(3), size=(2, 6))
        y = np.arange(6) % 3
        np.testing.assert_allclose(class_mean_confidence(p, y, 3), class_mean_confidence(p.mean(axis=0), y, 3))

    def test_empty_class(self):
        with pytest.raises(CapacityError, match="class 2"):
            class_mean_confidence(np.full((2, 3), 1 / 3), [0, 1], 3)


class TestObjective:
    def test_single_class(self):
        assert adsa_objective(np.zeros((2, 1)), [0, 0], [1.0], 1.3) == 0.0

    def test_population_std(self):
        assert confidence_spread([0.9, 0.5]) == pytest.approx(0.2, abs=1e-15)

    def test_uniform_prior_constant(self, rng):
        z, y = rng.normal(size=(9, 3)), np.arange(9) % 3
        vals = {adsa_objective(z, y, np.full(3, 1 / 3), t) for t in np.linspace(0, 3, 13)}
        assert len(vals) == 1


class TestOptimizeTau:
    def test_uniform_prior_ties_to_lo(self, rng):
        z, y = rng.normal(size=(9, 3)), np.arange(9) % 3
        res = optimize_tau(z, y, np.full(3, 1 / 3))
        assert res.tau_star == 0.0 and res.inert

    @pytest.mark.parametrize("c", [0.5, 1.0, 1.5, 2.0, 2.5])
    def test_constructed_recovery(self, c):
        prior = np.array([0.5, 0.3, 0.15, 0.05])
        z, y = constructed_fixture(c, prior)
        res = optimize_tau(z, y, prior)
        assert abs(res.tau_star - c) <= 0.01
        assert res.objective_value < 1e-8

    @pytest.mark.parametrize("seed", range(3))
    def test_dense_brute_force(self, seed):
        g = np.random.default_rng(seed)
        prior = g.dirichlet(np.ones(4) * 2)
        y = np.arange(40) % 4
        z = g.normal(size=(40, 4)) + 2 * np.log(prior)
        dense = TauGrid(0.0, 3.0, 1e-4).points()
        brute = dense[np.argmin([adsa_objective(z, y, prior, t) for t in dense])]
        assert abs(optimize_tau(z, y, prior).tau_star - brute) <= 0.01

    def test_never_worse_than_grid(self, rng):
        prior = np.array([0.6, 0.3, 0.1])
        z, y = rng.normal(size=(12, 3)), np.arange(12) % 3
        res = optimize_tau(z, y, prior)
        grid_vals = [adsa_objective(z, y, prior, t) for t in TauGrid().points()]
        assert res.objective_value <= min(grid_vals)

    def test_trace_and_confidences(self, rng):
        prior = np.array([0.6, 0.3, 0.1])
        z, y = rng.normal(size=(12, 3)), np.arange(12) % 3
        res = optimize_tau(z, y, prior, refine=False)
        assert len(res.trace) == 301
        assert res.objective_at_zero == pytest.approx(confidence_spread(res.confidence_pre))
        assert res.objective_value == pytest.approx(confidence_spread(res.confidence_post))

    def test_grid_validation(self):
        with pytest.raises(DomainError):
            TauGrid(2.0, 1.0)
        assert TauGrid().points().size == 301


class TestGoldenSection:
    @given(st.floats(0.1, 2.9))
    @settings(max_examples=50, deadline=None)
    def test_quadratic(self, x0):
        evals = golden_section(lambda t: (t - x0) ** 2, 0.0, 3.0, tol=1e-8)
        best = min(evals, key=lambda e: e[1])[0]
        assert abs(best - x0) < 1e-6


class TestCalibrateSet:
    def test_uniform_prior_identity(self, rng):
        sl = SoftLabelSet(rng.normal(size=(2, 6, 3)))
        y = np.arange(6) % 3
        res = optimize_tau(sl.logits, y, np.full(3, 1 / 3))
        np.testing.assert_array_equal(calibrate_softlabel_set(sl, np.full(3, 1 / 3), res).probs(), sl.probs())

    def test_slicewise(self, rng):
        prior = np.array([0.7, 0.2, 0.1])
        sl = SoftLabelSet(rng.normal(size=(3, 6, 3)))
        out = calibrate_softlabel_set(sl, prior, 0.8)
        assert out.num_epochs == 3 and out.tau == 0.8
        for e in range(3):
            np.testing.assert_allclose(out.probs()[e], calibrate_logits(sl.logits[e], prior, 0.8), atol=1e-15)

    def test_round_trip_bit_stable(self, rng, tmp_path):
        prior = np.array([0.7, 0.2, 0.1])
        sl = SoftLabelSet(rng.normal(size=(2, 6, 3)).astype(np.float32).astype(np.float64))
        res = optimize_tau(sl.logits, np.arange(6) % 3, prior)
        cal = calibrate_softlabel_set(sl, prior, res)
        artifacts.write_softlabels(tmp_path / "a.ltsl", cal)
        back = artifacts.read_softlabels(tmp_path / "a.ltsl")
        artifacts.write_softlabels(tmp_path / "b.ltsl", back)
        assert (tmp_path / "a.ltsl").read_bytes() == (tmp_path / "b.ltsl").read_bytes()
        assert back.tau == cal.tau
        np.testing.assert_array_equal(back.logits, cal.logits.astype(np.float32))
