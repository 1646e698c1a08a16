"""Deep feature map: an MLP whose output inner products form the model kernel.

The map sends a raw p-dimensional input to a d-dimensional feature vector
through hidden layers with a fixed nonlinearity and a linear output layer.
The kernel between two inputs is the inner product of their features, so the
network weights double as kernel parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParamVector, Tensor

# looked up at call time so tests can swap in instrumented variants
ACTIVATIONS = {"tanh": dm.tanh, "relu": dm.relu}


def weight_segments(sizes: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
    """Segment names and shapes for an MLP with the given layer sizes."""
    if len(sizes) < 2:
        raise ValueError("sizes must list at least input and output dims")
    segments = []
    for i in range(len(sizes) - 1):
        segments.append((f"net.L{i}.W", (sizes[i + 1], sizes[i])))
        segments.append((f"net.L{i}.b", (sizes[i + 1],)))
    return segments


def init_feature_params(
    sizes: tuple[int, ...], rng: np.random.Generator
) -> list[tuple[str, np.ndarray]]:
    """Uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    params = []
    for name, shape in weight_segments(sizes):
        if name.endswith(".W"):
            fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params.append((name, rng.uniform(-a, a, size=shape)))
        else:
            params.append((name, np.zeros(shape)))
    return params


@dataclass(frozen=True)
class FeatureNet:
    """Architecture plus the parameter vector holding its weights.

    ``params`` must contain the ``net.L{i}.W`` / ``net.L{i}.b`` segments for
    every layer; it may hold further segments (e.g. the posterior), which the
    net ignores.
    """

    sizes: tuple[int, ...]
    activation: str
    params: ParamVector

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("sizes must list at least input and output dims")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.sizes[-1]


def forward_features(
    params_t: Tensor,
    layout: dict[str, tuple[int, int]],
    sizes: tuple[int, ...],
    activation: str,
    X: np.ndarray,
) -> Tensor:
    """Tape forward pass: (n, p) inputs to an (n, d) feature tensor."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != sizes[0]:
        raise ValueError(f"expected inputs of shape (n, {sizes[0]}), got {X.shape}")
    act = ACTIVATIONS[activation]
    h = Tensor(X, op="input")
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        w = dm.segment_tensor(params_t, layout, f"net.L{i}.W", (sizes[i + 1], sizes[i]))
        b = dm.segment_tensor(params_t, layout, f"net.L{i}.b")
        h = h @ w.T + b
        if i < n_layers - 1:
            h = act(h)
    return h


def features(net: FeatureNet, X: np.ndarray) -> np.ndarray:
    """Feature matrix: row i is the feature vector of input i."""
    t = Tensor(net.params.values, op="params")
    return forward_features(t, net.params.layout, net.sizes, net.activation, X).value


def kernel_gram(net: FeatureNet, X: np.ndarray) -> np.ndarray:
    """Gram matrix of pairwise feature inner products (symmetric PSD)."""
    f = features(net, X)
    return f @ f.T
