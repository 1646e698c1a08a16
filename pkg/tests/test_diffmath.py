"""Gradient core: oracle agreement, subgradient branches, ParamVector invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpda import diffmath as dm
from gpda.diffmath import (
    NonFiniteError,
    ParamVector,
    Tensor,
    finite_diff_grad,
    value_and_grad,
)


def vec(values, name="x"):
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return ParamVector(values, {name: (0, values.size)})


def rel_err(a: ParamVector, b: ParamVector) -> float:
    diff = np.abs(a.values - b.values).max()
    scale = max(np.abs(a.values).max(), np.abs(b.values).max(), 1e-12)
    return diff / scale


class TestValueAndGrad:
    def test_square(self):
        value, grad = value_and_grad(lambda t: (t * t).sum(), vec([3.0]))
        assert value == 9.0
        assert grad.values[0] == 6.0

    def test_kl_identity_covariance_gradient_is_mean(self):
        # KL(N(m, I) || N(0, I)) = ||m||^2 / 2, so the gradient w.r.t. m is m
        for m in ([1.0, 0.0], [0.3, -2.0, 0.7]):
            m = np.asarray(m)

            def kl(t):
                return 0.5 * (t * t).sum()

            _, grad = value_and_grad(kl, vec(m))
            np.testing.assert_allclose(grad.values, m, rtol=1e-12)

    def test_logsumexp_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        params = vec(rng.normal(size=5))
        objective = lambda t: dm.logsumexp(t, axis=-1)
        _, ad = value_and_grad(objective, params)
        fd = finite_diff_grad(objective, params, h=1e-5)
        assert rel_err(ad, fd) <= 1e-6

    def test_constant_objective_zero_gradient(self):
        _, grad = value_and_grad(lambda t: Tensor(2.5), vec([1.0, 2.0]))
        np.testing.assert_array_equal(grad.values, np.zeros(2))

    def test_objective_must_be_scalar(self):
        with pytest.raises(ValueError):
            value_and_grad(lambda t: t * 2.0, vec([1.0, 2.0]))


class TestFiniteDiff:
    def test_square_quadratic_exact(self):
        grad = finite_diff_grad(lambda t: (t * t).sum(), vec([3.0]), h=1e-5)
        assert abs(grad.values[0] - 6.0) <= 1e-6

    def test_constant(self):
        grad = finite_diff_grad(lambda t: Tensor(1.0), vec([1.0, -2.0]), h=1e-5)
        np.testing.assert_array_equal(grad.values, np.zeros(2))

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: t.sum(), vec([1.0]), h=0.0)

    def test_diagonal_kl_cross_oracle(self):
        # params = (m, log_s) for a K=1, d=2 posterior at m=[1,0], S=diag(0.5,2)
        values = np.array([1.0, 0.0, np.log(0.5), np.log(2.0)])
        params = ParamVector(values, {"m": (0, 2), "log_s": (2, 2)})

        def kl(t):
            m = t[0:2]
            log_s = t[2:4]
            return 0.5 * (dm.exp(log_s).sum() + (m * m).sum() - log_s.sum() - 2.0)

        value, ad = value_and_grad(kl, params)
        assert abs(value - 0.75) <= 1e-12
        fd = finite_diff_grad(kl, params, h=1e-5)
        assert rel_err(ad, fd) <= 1e-5


def _primitive_cases():
    rng = np.random.default_rng(20240915)

    def affine(t):
        w = Tensor(rng.normal(size=(4, 6)))
        b = Tensor(rng.normal(size=4))
        return ((t.reshape((2, 6)) @ w.T + b) * Tensor(rng.normal(size=(2, 4)))).sum()

    cases = {
        "tanh": (lambda t: dm.tanh(t).sum(), lambda: rng.normal(size=8)),
        "relu": (lambda t: dm.relu(t).sum(), lambda: rng.normal(size=8)),
        "hinge": (lambda t: dm.hinge(t - 0.5).sum(), lambda: rng.normal(size=8)),
        "exp": (lambda t: dm.exp(t).sum(), lambda: rng.normal(scale=0.5, size=8)),
        "log": (lambda t: dm.log(t).sum(), lambda: rng.uniform(0.5, 3.0, size=8)),
        "sqrt": (lambda t: dm.sqrt(t).sum(), lambda: rng.uniform(0.5, 3.0, size=8)),
        "logsumexp": (lambda t: dm.logsumexp(t.reshape((2, 4)), axis=-1).sum(), lambda: rng.normal(size=8)),
        "max": (lambda t: t.reshape((2, 4)).max(axis=-1).sum(), lambda: rng.normal(size=8)),
        "affine": (affine, lambda: rng.normal(size=12)),
        "sum_axis": (lambda t: (t.reshape((2, 4)).sum(axis=0) * Tensor(rng.normal(size=4))).sum(), lambda: rng.normal(size=8)),
        "slice": (lambda t: (t[1:5] * t[3:7]).sum(), lambda: rng.normal(size=8)),
        "transpose": (lambda t: (t.reshape((2, 4)).T @ Tensor(rng.normal(size=(2, 3)))).sum(), lambda: rng.normal(size=8)),
    }
    return rng, cases


def test_every_primitive_matches_finite_differences_on_100_points():
    rng, cases = _primitive_cases()
    per_case = int(np.ceil(100 / len(cases)))
    checked = 0
    for name, (objective, draw) in cases.items():
        for _ in range(per_case):
            params = vec(draw())
            _, ad = value_and_grad(objective, params)
            fd = finite_diff_grad(objective, params, h=1e-5)
            assert rel_err(ad, fd) <= 1e-4, f"primitive {name} disagrees with the oracle"
            checked += 1
    assert checked >= 100


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    rng = np.random.default_rng(seed)
    params = vec(rng.normal(size=6))

    def f(t):
        return dm.tanh(t).sum() * 0.7

    def g(t):
        return dm.logsumexp(t, axis=-1) + (t * t).sum()

    _, grad_f = value_and_grad(f, params)
    _, grad_g = value_and_grad(g, params)
    _, grad_fg = value_and_grad(lambda t: f(t) + g(t), params)
    np.testing.assert_allclose(grad_fg.values, grad_f.values + grad_g.values, rtol=1e-10, atol=1e-12)


class TestMaxBranch:
    def test_strict_max_gradient_stable_under_small_perturbation(self):
        base = np.array([0.1, 2.0, -1.0, 0.9])
        gap = 2.0 - 0.9

        def f(t):
            return t.max(axis=-1)

        _, grad0 = value_and_grad(f, vec(base))
        bumped = base.copy()
        bumped[3] += gap * 0.5  # still below the max
        _, grad1 = value_and_grad(f, vec(bumped))
        np.testing.assert_array_equal(grad0.values, grad1.values)
        np.testing.assert_array_equal(grad0.values, [0.0, 1.0, 0.0, 0.0])

    def test_tie_selects_lowest_index(self):
        _, grad = value_and_grad(lambda t: t.max(axis=-1), vec([1.5, 1.5, 0.0]))
        np.testing.assert_array_equal(grad.values, [1.0, 0.0, 0.0])

    def test_hinge_zero_branch_at_kink(self):
        _, grad = value_and_grad(lambda t: dm.hinge(t).sum(), vec([0.0, -1.0, 2.0]))
        np.testing.assert_array_equal(grad.values, [0.0, 0.0, 1.0])


class TestNonFinite:
    def test_log_of_negative_names_primitive(self):
        with pytest.raises(NonFiniteError, match="log"):
            value_and_grad(lambda t: dm.log(t).sum(), vec([-1.0]))

    def test_exp_overflow_names_primitive(self):
        with pytest.raises(NonFiniteError, match="exp"):
            value_and_grad(lambda t: dm.exp(t * 1000.0).sum(), vec([2.0]))

    def test_finite_diff_propagates_error(self):
        with pytest.raises(NonFiniteError):
            finite_diff_grad(lambda t: dm.sqrt(t).sum(), vec([0.0]), h=1e-5)


class TestParamVector:
    def test_build_and_segments(self):
        pv = ParamVector.build([("a", np.arange(3.0)), ("b", np.ones((2, 2)))])
        assert pv.size == 7
        assert pv.layout == {"a": (0, 3), "b": (3, 4)}
        np.testing.assert_array_equal(pv.segment("b"), np.ones(4))

    def test_layout_must_cover(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), {"a": (0, 2)})

    def test_layout_must_not_overlap(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), {"a": (0, 3), "b": (2, 2)})

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            ParamVector(np.array([1.0, np.nan]), {"a": (0, 2)})

    def test_duplicate_segment_names_rejected(self):
        with pytest.raises(ValueError):
            ParamVector.build([("a", np.zeros(2)), ("a", np.zeros(2))])

    def test_gradient_shares_layout(self):
        params = ParamVector.build([("a", np.ones(2)), ("b", np.full(3, 2.0))])
        _, grad = value_and_grad(lambda t: (t * t).sum(), params)
        assert grad.layout == params.layout
        assert grad.size == params.size
