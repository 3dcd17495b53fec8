import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltdistill.longtail import (
    LabeledSet,
    LongTailSpec,
    MixtureSpec,
    balanced_counts,
    class_prior,
    exponential_counts,
    feature_scale,
    gaussian_mixture_generate,
    perturbation_counts,
    subsample_longtail,
)
from ltdistill.model import TrainConfig, init_mlp, predict_proba, train
from ltdistill.numcore import CapacityError, DomainError, RngStream

mpmath.mp.dps = 40


def _mp_round_half_up(x):
    return int(mpmath.floor(x + mpmath.mpf("0.5")))


class TestExponentialCounts:
    def test_tail_is_n0_over_r(self):
        assert exponential_counts(10, 5000, 10)[9] == 500

    def test_second_class_extended_precision(self):
        oracle = _mp_round_half_up(5000 * mpmath.power(10, mpmath.mpf(-1) / 9))
        assert oracle == 3871
        assert exponential_counts(10, 5000, 10)[1] == oracle

    def test_balanced_degenerate(self):
        np.testing.assert_array_equal(exponential_counts(7, 300, 1.0), np.full(7, 300))

    @pytest.mark.parametrize("k, n0, r", [(10, 5000, 10), (10, 500, 100), (100, 500, 50), (5, 37, 3.5)])
    def test_every_entry_matches_mpmath(self, k, n0, r):
        oracle = [max(_mp_round_half_up(n0 * mpmath.power(mpmath.mpf(r), -mpmath.mpf(i) / (k - 1))), 1)
                  for i in range(k)]
        np.testing.assert_array_equal(exponential_counts(k, n0, r), oracle)

    @given(st.integers(2, 50), st.integers(1, 5000), st.floats(1, 200))
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_positive(self, k, n0, r):
        c = exponential_counts(k, n0, r)
        assert c[0] == n0
        assert np.all(c >= 1)
        assert np.all(np.diff(c) <= 0)

    def test_invalid(self):
        with pytest.raises(DomainError):
            exponential_counts(10, 100, 0.5)
        with pytest.raises(DomainError):
            LongTailSpec(10, 5, 10)

    def test_spec_object(self):
        np.testing.assert_array_equal(LongTailSpec(10, 5000, 10).counts(), exponential_counts(10, 5000, 10))


class TestPerturbationCounts:
    def test_balance_point(self):
        np.testing.assert_array_equal(perturbation_counts(100, 10000, 20, 100), np.full(100, 100))

    def test_nearest_round(self):
        c = perturbation_counts(25, 10000, 20, 100)
        assert np.all(c[:20] == 25) and np.all(c[20:] == 119)

    def test_zero_varied(self):
        c = perturbation_counts(0, 10000, 20, 100)
        assert np.all(c[:20] == 0) and np.all(c[20:] == 125)

    def test_over_budget(self):
        with pytest.raises(DomainError):
            perturbation_counts(600, 10000, 20, 100)

    def test_spec_object(self):
        spec = LongTailSpec(100, 0, scheme="perturbation", head_count=25, total_budget=10000, num_varied=20)
        np.testing.assert_array_equal(spec.counts(), perturbation_counts(25, 10000, 20, 100))


class TestClassPrior:
    @pytest.mark.parametrize("counts, expected", [([500, 500], [0.5, 0.5]), ([900, 100], [0.9, 0.1])])
    def test_values(self, counts, expected):
        np.testing.assert_allclose(class_prior(counts), expected, atol=1e-15)

    def test_cifar_like_tail(self):
        c = exponential_counts(10, 5000, 10)
        assert class_prior(c)[-1] == pytest.approx(500 / c.sum(), abs=1e-15)

    def test_zero_count(self):
        with pytest.raises(DomainError):
            class_prior([3, 0, 2])


def _base():
    x = np.arange(20, dtype=np.float32).reshape(10, 2)
    return LabeledSet(x, np.array([0, 1] * 5), 2)


class TestSubsample:
    def test_full_counts_is_permutation(self):
        base = _base()
        out = subsample_longtail(base, base.class_counts, RngStream(1))
        assert sorted(out.features[:, 0].tolist()) == sorted(base.features[:, 0].tolist())
        np.testing.assert_array_equal(out.class_counts, base.class_counts)

    def test_one_per_class(self):
        out = subsample_longtail(_base(), [1, 1], RngStream(2))
        assert out.labels.tolist() == [0, 1]

    def test_golden(self):
        # recorded once from this implementation, then frozen
        out = subsample_longtail(_base(), [3, 2], RngStream(7))
        assert (out.features[:, 0] / 2).astype(int).tolist() == [8, 4, 6, 1, 9]
        assert out.labels.tolist() == [0, 0, 0, 1, 1]

    def test_capacity_names_class(self):
        with pytest.raises(CapacityError, match="class 1"):
            subsample_longtail(_base(), [2, 6], RngStream(0))


class TestMixture:
    def test_degenerate_variance(self):
        mix = MixtureSpec(np.array([[1.0, -2.0], [3.0, 4.0]]), np.full((2, 2), 1e-12))
        data = gaussian_mixture_generate(mix, [5, 5], RngStream(0))
        for k in range(2):
            np.testing.assert_allclose(data.features[data.labels == k], np.tile(mix.means[k], (5, 1)), atol=1e-4)

    def test_single_class_clt(self):
        mu = np.array([0.5, -1.5, 2.0])
        mix = MixtureSpec(mu[None], np.ones((1, 3)))
        data = gaussian_mixture_generate(mix, [10000], RngStream(4))
        assert np.all(np.abs(data.features.mean(axis=0) - mu) < 4 / np.sqrt(10000))

    def test_separated_classes_linearly_separable(self):
        means = np.array([[0.0, 0.0], [10.0, 0.0]])
        mix = MixtureSpec(means, np.ones((2, 2)))
        tr = gaussian_mixture_generate(mix, [500, 500], RngStream(1))
        te = gaussian_mixture_generate(mix, [500, 500], RngStream(2))
        model = train(init_mlp((2, 0, 2), rng=RngStream(0)), tr.features, tr.labels,
                      TrainConfig(epochs=20, learning_rate=0.05))
        acc = np.mean(np.argmax(predict_proba(model, te.features), axis=1) == te.labels)
        # Bayes error at 10 sigma separation is Phi(-5) ~ 3e-7
        assert acc >= 0.99

    def test_float32_output_and_counts(self):
        mix = MixtureSpec.random(3, 4, 1.0, RngStream(0))
        data = gaussian_mixture_generate(mix, [3, 2, 1], RngStream(1))
        assert data.features.dtype == np.float32
        assert data.class_counts.tolist() == [3, 2, 1]

    def test_invalid_variance(self):
        with pytest.raises(DomainError):
            MixtureSpec(np.zeros((2, 2)), np.zeros((2, 2)))


class TestLabeledSet:
    def test_rejects_bad_labels(self):
        with pytest.raises(DomainError):
            LabeledSet(np.zeros((2, 2)), np.array([0, 3]), 2)

    def test_helpers(self):
        data = _base()
        assert len(data) == 10 and data.dim == 2
        assert balanced_counts(3, 4).tolist() == [4, 4, 4]
        assert feature_scale(data) == pytest.approx(np.sqrt(np.mean(np.var(data.features.astype(float), axis=0))))
