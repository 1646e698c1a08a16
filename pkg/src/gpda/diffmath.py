"""Reverse-mode differentiation over flat 64-bit parameter vectors.

The tape records array-valued nodes (:class:`Tensor`) produced by a small set
of primitives: affine maps (``@``, ``+``, ``*``), elementwise tanh / relu /
exp / log / sqrt, log-sum-exp, max with a recorded argmax branch, sums, and
slicing / reshaping of the flat parameter vector.  :func:`value_and_grad`
evaluates a scalar objective built from these primitives and plays the tape
backwards; :func:`finite_diff_grad` is the independent central-difference
oracle used to cross-check every backward rule.

Subgradient convention: ``max`` routes the gradient to the argmax entry with
ties broken toward the lowest index, and the hinge (relu) treats the kink at
0 as belonging to the zero branch (derivative 0 there).

All arithmetic is float64.  Any primitive that produces a NaN or Inf raises
:class:`NonFiniteError` naming itself, so divergence surfaces at the point of
failure instead of propagating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "ParamVector",
    "Gradient",
    "tanh",
    "relu",
    "hinge",
    "exp",
    "log",
    "sqrt",
    "logsumexp",
    "segment_tensor",
    "value_and_grad",
    "finite_diff_grad",
]


class NonFiniteError(ArithmeticError):
    """A primitive produced (or was handed) a NaN or Inf value."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(node: "Tensor", grad: np.ndarray) -> None:
    node.grad = grad if node.grad is None else node.grad + grad


class Tensor:
    """One node of the recorded computation tape (float64 ndarray payload)."""

    __slots__ = ("value", "grad", "_parents", "_backward", "op")

    def __init__(self, value, *, _parents=(), _backward=None, op="input"):
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"primitive '{op}' produced a non-finite value")
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    # -- arithmetic primitives --------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        out = Tensor(self.value + other.value, _parents=(self, other), op="add")

        def bw(g):
            _accum(self, _unbroadcast(g, self.value.shape))
            _accum(other, _unbroadcast(g, other.value.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, _parents=(self,), op="neg")
        out._backward = lambda g: _accum(self, -g)
        return out

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        out = Tensor(self.value * other.value, _parents=(self, other), op="mul")

        def bw(g):
            _accum(self, _unbroadcast(g * other.value, self.value.shape))
            _accum(other, _unbroadcast(g * self.value, other.value.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a registered primitive")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = _lift(other)
        if self.value.ndim < 2 or other.value.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        out = Tensor(self.value @ other.value, _parents=(self, other), op="matmul")

        def bw(g):
            ga = g @ other.value.swapaxes(-1, -2)
            gb = self.value.swapaxes(-1, -2) @ g
            _accum(self, _unbroadcast(ga, self.value.shape))
            _accum(other, _unbroadcast(gb, other.value.shape))

        out._backward = bw
        return out

    # -- structural primitives --------------------------------------------
    @property
    def T(self) -> "Tensor":
        """Swap the last two axes (matrix transpose, batch-aware)."""
        out = Tensor(self.value.swapaxes(-1, -2), _parents=(self,), op="transpose")
        out._backward = lambda g: _accum(self, g.swapaxes(-1, -2))
        return out

    def reshape(self, shape) -> "Tensor":
        orig = self.value.shape
        out = Tensor(self.value.reshape(shape), _parents=(self,), op="reshape")
        out._backward = lambda g: _accum(self, g.reshape(orig))
        return out

    def __getitem__(self, key) -> "Tensor":
        if not (isinstance(key, slice) and self.value.ndim == 1 and key.step in (None, 1)):
            raise TypeError("only contiguous slices of 1-D tensors are supported")
        start, stop, _ = key.indices(self.value.size)
        src = self.value

        out = Tensor(src[start:stop], _parents=(self,), op="slice")

        def bw(g):
            z = np.zeros_like(src)
            z[start:stop] = g
            _accum(self, z)

        out._backward = bw
        return out

    # -- reductions ---------------------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        src = self.value
        out = Tensor(src.sum(axis=axis, keepdims=keepdims), _parents=(self,), op="sum")

        def bw(g):
            if axis is None:
                _accum(self, np.broadcast_to(g, src.shape))
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                _accum(self, np.broadcast_to(gk, src.shape))

        out._backward = bw
        return out

    def max(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        """Max along ``axis`` with the argmax branch recorded for backward.

        Ties break toward the lowest index (``np.argmax`` convention): the
        gradient flows only to the first maximal entry.
        """
        src = self.value
        idx = np.expand_dims(np.argmax(src, axis=axis), axis)
        picked = np.take_along_axis(src, idx, axis)
        out_value = picked if keepdims else np.squeeze(picked, axis=axis)
        out = Tensor(out_value, _parents=(self,), op="max")

        def bw(g):
            gk = g if keepdims else np.expand_dims(g, axis)
            z = np.zeros_like(src)
            np.put_along_axis(z, idx, gk, axis)
            _accum(self, z)

        out._backward = bw
        return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _elementwise(t: Tensor, value: np.ndarray, dvalue: np.ndarray, op: str) -> Tensor:
    out = Tensor(value, _parents=(t,), op=op)
    out._backward = lambda g: _accum(t, g * dvalue)
    return out


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.value)
    return _elementwise(t, y, 1.0 - y * y, "tanh")


def relu(t: Tensor) -> Tensor:
    # subgradient 0 at the kink: the zero branch is selected at a tie
    return _elementwise(t, np.maximum(t.value, 0.0), (t.value > 0.0).astype(np.float64), "relu")


def hinge(t: Tensor) -> Tensor:
    """(x)_+ with the same branch-selecting subgradient as :func:`relu`."""
    return relu(t)


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(t.value)
    if not np.isfinite(y).all():
        raise NonFiniteError("primitive 'exp' produced a non-finite value")
    return _elementwise(t, y, y, "exp")


def log(t: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(t.value)
    if not np.isfinite(y).all():
        raise NonFiniteError("primitive 'log' produced a non-finite value")
    return _elementwise(t, y, 1.0 / t.value, "log")


def sqrt(t: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.sqrt(t.value)
        d = 0.5 / y
    if not (np.isfinite(y).all() and np.isfinite(d).all()):
        raise NonFiniteError("primitive 'sqrt' produced a non-finite value")
    return _elementwise(t, y, d, "sqrt")


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(x))) along ``axis``."""
    src = t.value
    mx = np.max(src, axis=axis, keepdims=True)
    lse_k = mx + np.log(np.sum(np.exp(src - mx), axis=axis, keepdims=True))
    soft = np.exp(src - lse_k)
    out = Tensor(lse_k if keepdims else np.squeeze(lse_k, axis=axis), _parents=(t,), op="logsumexp")

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        _accum(t, gk * soft)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 vector whose named segments tile it exactly.

    ``layout`` maps a segment name to ``(offset, length)``.  Segments must be
    disjoint and cover the whole vector, and every value must be finite.
    """

    values: np.ndarray
    layout: dict[str, tuple[int, int]]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        if not np.isfinite(v).all():
            raise NonFiniteError("ParamVector contains non-finite values")
        object.__setattr__(self, "values", v)
        covered = 0
        for off, length in sorted(self.layout.values()):
            if length < 0 or off != covered:
                raise ValueError("segments must be disjoint and cover the vector")
            covered = off + length
        if covered != v.size:
            raise ValueError(
                f"segments cover {covered} values but the vector has {v.size}"
            )

    @staticmethod
    def build(segments: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        """Concatenate named arrays (flattened, in order) into one vector."""
        names = [name for name, _ in segments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate segment names")
        layout: dict[str, tuple[int, int]] = {}
        chunks = []
        offset = 0
        for name, arr in segments:
            flat = np.asarray(arr, dtype=np.float64).reshape(-1)
            layout[name] = (offset, flat.size)
            offset += flat.size
            chunks.append(flat)
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return ParamVector(values, layout)

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        off, length = self.layout[name]
        return self.values[off : off + length].copy()

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)


#: Gradients share the ParamVector representation (same layout as the vector
#: they differentiate, every entry finite).
Gradient = ParamVector


def segment_tensor(t: Tensor, layout: dict[str, tuple[int, int]], name: str, shape=None) -> Tensor:
    """View one named segment of a flat parameter tensor, optionally reshaped."""
    off, length = layout[name]
    seg = t[off : off + length]
    return seg.reshape(shape) if shape is not None else seg


# ---------------------------------------------------------------------------
# Differentiation entry points
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def value_and_grad(
    objective: Callable[[Tensor], Tensor], params: ParamVector
) -> tuple[float, Gradient]:
    """Evaluate a scalar objective and its exact reverse-mode gradient.

    ``objective`` receives the parameter vector as a tape :class:`Tensor` and
    must return a scalar :class:`Tensor` built from the registered
    primitives.  For max / hinge nodes the returned gradient is the
    subgradient of the selected branch (ties toward the lowest index).
    """
    root = Tensor(params.values, op="params")
    out = objective(root)
    if not isinstance(out, Tensor):
        raise TypeError("objective must return a Tensor")
    if out.value.size != 1:
        raise ValueError("objective must be scalar-valued")

    out.grad = np.ones_like(out.value)
    for node in reversed(_topo_order(out)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grad = root.grad if root.grad is not None else np.zeros_like(params.values)
    return float(out.value.reshape(())), ParamVector(np.array(grad), params.layout)


def finite_diff_grad(
    objective: Callable[[Tensor], Tensor], params: ParamVector, h: float = 1e-5
) -> Gradient:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")

    def evaluate(values: np.ndarray) -> float:
        out = objective(Tensor(values, op="fd-eval"))
        return float(out.value.reshape(()))

    base = params.values
    grad = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        grad[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
    return ParamVector(grad, params.layout)
