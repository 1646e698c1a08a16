"""Posterior head: KL, sampling, moments, softmax likelihood, prediction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpda.diffmath import ParamVector, Tensor, finite_diff_grad, value_and_grad
from gpda.gp_head import (
    VariationalPosterior,
    kl,
    kl_core,
    log_likelihood_softmax,
    moments,
    moments_batch,
    moments_core,
    predict,
    predict_batch,
    sample_weights,
    weight_samples_core,
)


def posterior(m, log_s):
    return VariationalPosterior(np.asarray(m, dtype=float), np.asarray(log_s, dtype=float))


def random_posterior(rng, n_classes=3, feature_dim=4, scale=1.0):
    return posterior(
        rng.normal(scale=scale, size=(n_classes, feature_dim)),
        rng.normal(scale=scale, size=(n_classes, feature_dim)),
    )


class TestKl:
    def test_zero_at_prior(self):
        assert kl(VariationalPosterior.initial(1, 2)) == 0.0

    def test_hand_value(self):
        q = posterior([[1.0, 0.0]], [[np.log(0.5), np.log(2.0)]])
        assert abs(kl(q) - 0.75) <= 1e-12

    def test_additive_over_classes(self):
        block_m = [1.0, 0.0]
        block_s = [np.log(0.5), np.log(2.0)]
        q = posterior([block_m, block_m], [block_s, block_s])
        assert abs(kl(q) - 1.5) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_nonnegative(self, seed):
        q = random_posterior(np.random.default_rng(seed))
        assert kl(q) >= 0.0

    def test_zero_iff_prior(self):
        q = posterior([[0.0, 1e-3]], [[0.0, 0.0]])
        assert kl(q) > 0.0
        q = posterior([[0.0, 0.0]], [[1e-3, 0.0]])
        assert kl(q) > 0.0


class TestSampleWeights:
    def test_zero_noise_returns_means(self):
        q = posterior([[0.5, -1.0]], [[0.2, -0.3]])
        np.testing.assert_array_equal(sample_weights(q, np.zeros((1, 2))), q.m)

    def test_hand_value(self):
        q = posterior([[0.0, 0.0]], [[np.log(4.0), np.log(9.0)]])
        w = sample_weights(q, np.array([[1.0, -1.0]]))
        np.testing.assert_allclose(w, [[2.0, -3.0]])

    def test_shape_mismatch(self):
        q = posterior([[0.0, 0.0]], [[0.0, 0.0]])
        with pytest.raises(ValueError):
            sample_weights(q, np.zeros((2, 3)))

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(314)
        q = random_posterior(rng, n_classes=2, feature_dim=3)
        n = 10**5
        draws = sample_weights(q, rng.standard_normal((n, 2, 3)))
        s_max = np.exp(q.log_s / 2.0).max()
        np.testing.assert_allclose(draws.mean(axis=0), q.m, atol=4.0 * s_max / np.sqrt(n))


class TestMoments:
    def test_basis_vector_picks_mean_coordinate(self):
        q = posterior([[2.0, 5.0], [-1.0, 0.5]], np.zeros((2, 2)))
        out = moments(q, [1.0, 0.0])
        np.testing.assert_allclose(out.mu, [2.0, -1.0])

    def test_sigma_hand_value(self):
        s1, s2 = 0.7, 1.9
        q = posterior([[0.0, 0.0]], [[np.log(s1), np.log(s2)]])
        out = moments(q, [1.0, 1.0])
        np.testing.assert_allclose(out.sigma, [np.sqrt(s1 + s2)])

    def test_dimension_mismatch(self):
        q = posterior([[0.0, 0.0]], [[0.0, 0.0]])
        with pytest.raises(ValueError):
            moments(q, [1.0, 2.0, 3.0])

    def test_matches_sampling_oracle(self):
        rng = np.random.default_rng(99)
        n = 10**5
        for _ in range(50):
            q = random_posterior(rng, n_classes=2, feature_dim=3)
            phi = rng.normal(size=3)
            out = moments(q, phi)
            scores = sample_weights(q, rng.standard_normal((n, 2, 3))) @ phi  # (n, K)
            se_mean = out.sigma / np.sqrt(n)
            np.testing.assert_array_less(np.abs(scores.mean(axis=0) - out.mu), 5 * se_mean + 1e-12)
            se_std = out.sigma / np.sqrt(2 * n)
            np.testing.assert_array_less(
                np.abs(scores.std(axis=0, ddof=1) - out.sigma), 5 * se_std + 1e-12
            )


class TestLogLikelihoodSoftmax:
    def test_uniform_logits(self):
        w = np.zeros((3, 2))
        assert abs(log_likelihood_softmax(w, [1.0, -1.0], 0) - np.log(1.0 / 3.0)) <= 1e-12

    def test_hand_value_two_classes(self):
        # logits [1, 0], label of the unit logit
        w = np.array([[1.0], [0.0]])
        got = log_likelihood_softmax(w, [1.0], 0)
        assert abs(got - (-np.log(1.0 + np.exp(-1.0)))) <= 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(4, 3))
        phi = rng.normal(size=3)
        base = log_likelihood_softmax(w, phi, 2)
        shifted = log_likelihood_softmax(w + 7.3 * np.outer(np.ones(4), phi) / (phi @ phi), phi, 2)
        assert abs(base - shifted) <= 1e-9

    def test_label_out_of_range(self):
        w = np.zeros((2, 2))
        with pytest.raises(ValueError):
            log_likelihood_softmax(w, [0.0, 0.0], 2)


class TestPredict:
    def test_argmax(self):
        q = posterior(np.array([[0.1], [0.9], [0.3]]), np.zeros((3, 1)))
        assert predict(q, [1.0]) == 1

    def test_invariant_to_positive_feature_scaling(self):
        rng = np.random.default_rng(8)
        q = random_posterior(rng)
        phi = rng.normal(size=4)
        assert predict(q, phi) == predict(q, 3.7 * phi)

    def test_invariant_to_positive_mean_scaling(self):
        rng = np.random.default_rng(9)
        q = random_posterior(rng)
        phi = rng.normal(size=4)
        q_scaled = VariationalPosterior(2.5 * q.m, q.log_s)
        assert predict(q, phi) == predict(q_scaled, phi)

    def test_tie_breaks_to_lowest_index(self):
        q = posterior([[0.5], [0.5]], np.zeros((2, 1)))
        assert predict(q, [1.0]) == 0

    def test_batch_matches_single(self):
        rng = np.random.default_rng(10)
        q = random_posterior(rng)
        phi = rng.normal(size=(6, 4))
        batch = predict_batch(q, phi)
        assert list(batch) == [predict(q, row) for row in phi]


class TestGradients:
    def _params(self, rng, n_classes=2, feature_dim=3):
        return ParamVector.build(
            [
                ("q.m", rng.normal(size=(n_classes, feature_dim))),
                ("q.log_s", rng.normal(size=(n_classes, feature_dim))),
            ]
        )

    def _split(self, t, n_classes=2, feature_dim=3):
        m = t[0 : n_classes * feature_dim].reshape((n_classes, feature_dim))
        log_s = t[n_classes * feature_dim :].reshape((n_classes, feature_dim))
        return m, log_s

    def _check(self, objective, params):
        _, ad = value_and_grad(objective, params)
        fd = finite_diff_grad(objective, params, h=1e-5)
        scale = max(np.abs(fd.values).max(), np.abs(ad.values).max(), 1e-12)
        assert np.abs(ad.values - fd.values).max() / scale <= 1e-4

    def test_kl_gradients(self):
        rng = np.random.default_rng(21)
        params = self._params(rng)
        self._check(lambda t: kl_core(*self._split(t)), params)

    def test_sampled_loglik_gradients(self):
        rng = np.random.default_rng(22)
        params = self._params(rng)
        noise = rng.standard_normal((2, 3))
        phi = rng.normal(size=(1, 3))
        onehot = np.array([[0.0, 1.0]])

        def objective(t):
            m, log_s = self._split(t)
            w = weight_samples_core(m, log_s, noise)
            logits = Tensor(phi) @ w.T
            from gpda.gp_head import picked_logprob_core

            return picked_logprob_core(logits, onehot).sum()

        self._check(objective, params)

    def test_moments_gradients(self):
        rng = np.random.default_rng(23)
        params = self._params(rng)
        phi = rng.normal(size=(4, 3))
        coeff = rng.normal(size=(4, 2))

        def objective(t):
            mu, sigma = moments_core(*self._split(t), Tensor(phi))
            return (mu * coeff).sum() + (sigma * coeff).sum()

        self._check(objective, params)


def test_moments_batch_rejects_bad_shape():
    q = VariationalPosterior.initial(2, 3)
    with pytest.raises(ValueError):
        moments_batch(q, np.zeros((4, 2)))
