"""Feature map: hand values, Gram properties, gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpda.diffmath import ParamVector, finite_diff_grad, value_and_grad
from gpda.featurenet import (
    FeatureNet,
    features,
    forward_features,
    init_feature_params,
    kernel_gram,
    weight_segments,
)


def make_net(sizes, activation="tanh", seed=0, weights=None):
    if weights is None:
        rng = np.random.default_rng(seed)
        params = ParamVector.build(init_feature_params(tuple(sizes), rng))
    else:
        params = ParamVector.build(weights)
    return FeatureNet(tuple(sizes), activation, params)


class TestFeatures:
    def test_identity_single_layer(self):
        net = make_net(
            (2, 2),
            weights=[("net.L0.W", np.eye(2)), ("net.L0.b", np.zeros(2))],
        )
        x = np.array([[0.3, -1.2], [4.0, 0.0]])
        np.testing.assert_array_equal(features(net, x), x)

    def test_hand_computed_linear_layer(self):
        net = make_net(
            (2, 2),
            weights=[("net.L0.W", np.array([[1.0, 2.0], [0.0, 1.0]])), ("net.L0.b", np.zeros(2))],
        )
        np.testing.assert_allclose(features(net, [[1.0, 1.0]]), [[3.0, 1.0]])

    def test_duplicated_rows_give_duplicated_features(self):
        net = make_net((3, 8, 4), seed=5)
        rng = np.random.default_rng(1)
        row = rng.normal(size=3)
        out = features(net, np.stack([row, row]))
        np.testing.assert_array_equal(out[0], out[1])

    def test_deterministic(self):
        net = make_net((2, 6, 3), seed=9)
        x = np.random.default_rng(2).normal(size=(4, 2))
        np.testing.assert_array_equal(features(net, x), features(net, x))

    def test_dimension_mismatch(self):
        net = make_net((3, 4))
        with pytest.raises(ValueError):
            features(net, np.zeros((2, 2)))

    def test_output_dim(self):
        net = make_net((2, 7, 5), seed=3)
        assert features(net, np.zeros((6, 2))).shape == (6, 5)


class TestKernelGram:
    def test_identity_net_orthonormal_rows(self):
        net = make_net(
            (3, 3),
            weights=[("net.L0.W", np.eye(3)), ("net.L0.b", np.zeros(3))],
        )
        np.testing.assert_allclose(kernel_gram(net, np.eye(3)), np.eye(3), atol=1e-15)

    def test_single_point_is_squared_norm(self):
        net = make_net((2, 5, 3), seed=11)
        x = np.array([[0.4, -0.7]])
        gram = kernel_gram(net, x)
        assert gram.shape == (1, 1)
        assert gram[0, 0] >= 0.0
        np.testing.assert_allclose(gram[0, 0], (features(net, x) ** 2).sum(), rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_symmetric_and_psd_on_random_nets(self, seed):
        rng = np.random.default_rng(seed)
        net = make_net((2, 6, 4), activation="tanh", seed=seed)
        x = rng.normal(size=(7, 2))
        gram = kernel_gram(net, x)
        np.testing.assert_allclose(gram, gram.T, atol=1e-12)
        assert np.linalg.eigvalsh(gram).min() >= -1e-8


class TestGradients:
    def test_feature_gradients_match_finite_differences(self):
        rng = np.random.default_rng(42)
        sizes = (3, 5, 4)
        params = ParamVector.build(init_feature_params(sizes, rng))
        x = rng.normal(size=(6, 3))
        weights = rng.normal(size=(6, 4))

        def objective(t):
            out = forward_features(t, params.layout, sizes, "tanh", x)
            return (out * weights).sum()

        _, ad = value_and_grad(objective, params)
        fd = finite_diff_grad(objective, params, h=1e-5)
        scale = max(np.abs(fd.values).max(), 1e-12)
        assert np.abs(ad.values - fd.values).max() / scale <= 1e-4


class TestInit:
    def test_segments_cover_all_layers(self):
        names = [name for name, _ in weight_segments((3, 5, 2))]
        assert names == ["net.L0.W", "net.L0.b", "net.L1.W", "net.L1.b"]

    def test_uniform_bound_and_zero_bias(self):
        rng = np.random.default_rng(0)
        params = dict(init_feature_params((10, 20), rng))
        bound = np.sqrt(6.0 / 30.0)
        assert np.abs(params["net.L0.W"]).max() <= bound
        np.testing.assert_array_equal(params["net.L0.b"], np.zeros(20))

    def test_seeded_and_deterministic(self):
        a = init_feature_params((4, 3), np.random.default_rng(7))
        b = init_feature_params((4, 3), np.random.default_rng(7))
        for (_, x), (_, y) in zip(a, b):
            np.testing.assert_array_equal(x, y)
