"""Minimal reverse-mode differentiation on a dynamic tape.

Values are float64 numpy matrices; every vector is kept 2-D (biases are
(1, n) rows, scalars (1, 1)). Recording order is already a topological
order, so backward is a single reverse sweep with additive gradient
accumulation over fan-out. The op inventory is exactly what the sequence
model needs: matmul, add, subtract, hadamard, scalar_mul, sigmoid, tanh,
mse_reduce.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class GraphError(ValueError):
    """Shape/contract violation while building or differentiating a graph."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


class Node:
    __slots__ = ("value", "grad", "requires_grad", "backward_fn")

    def __init__(self, value: np.ndarray, requires_grad: bool, backward_fn=None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.backward_fn: Callable[[np.ndarray], None] | None = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _as_matrix(value) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise GraphError(f"tensors are at most 2-D, got shape {array.shape}")
    return array


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad += grad


class Tape:
    """Records primitive ops; backward() replays them in reverse."""

    def __init__(self):
        self._nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, value: np.ndarray, requires_grad: bool, backward_fn, op: str) -> Node:
        if not np.isfinite(value).all():
            raise NumericError(f"{op} produced a non-finite value")
        node = Node(value, requires_grad, backward_fn if requires_grad else None)
        self._nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """A differentiable input (parameter)."""
        matrix = _as_matrix(value)
        if not np.isfinite(matrix).all():
            raise NumericError("leaf value is not finite")
        node = Node(matrix, True)
        self._nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """A non-differentiable input (data)."""
        matrix = _as_matrix(value)
        if not np.isfinite(matrix).all():
            raise NumericError("constant value is not finite")
        node = Node(matrix, False)
        self._nodes.append(node)
        return node

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise GraphError(
                f"matmul shapes {a.value.shape} x {b.value.shape} do not chain"
            )
        out = a.value @ b.value

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, grad @ b.value.T)
            if b.requires_grad:
                _accumulate(b, a.value.T @ grad)

        return self._record(out, a.requires_grad or b.requires_grad, backward, "matmul")

    def _addsub(self, a: Node, b: Node, sign: float, op: str) -> Node:
        broadcast = False
        if a.value.shape == b.value.shape:
            pass
        elif b.value.shape == (1, a.value.shape[1]):
            broadcast = True  # row bias against a batch
        else:
            raise GraphError(f"{op} shapes {a.value.shape} vs {b.value.shape}")
        out = a.value + sign * b.value

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, grad)
            if b.requires_grad:
                gb = grad.sum(axis=0, keepdims=True) if broadcast else grad
                _accumulate(b, sign * gb)

        return self._record(out, a.requires_grad or b.requires_grad, backward, op)

    def add(self, a: Node, b: Node) -> Node:
        return self._addsub(a, b, 1.0, "add")

    def subtract(self, a: Node, b: Node) -> Node:
        return self._addsub(a, b, -1.0, "subtract")

    def hadamard(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise GraphError(
                f"hadamard shapes {a.value.shape} vs {b.value.shape} differ"
            )
        out = a.value * b.value

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, grad * b.value)
            if b.requires_grad:
                _accumulate(b, grad * a.value)

        return self._record(out, a.requires_grad or b.requires_grad, backward, "hadamard")

    def scalar_mul(self, c: float, a: Node) -> Node:
        c = float(c)
        out = c * a.value

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, c * grad)

        return self._record(out, a.requires_grad, backward, "scalar_mul")

    def sigmoid(self, a: Node) -> Node:
        # 0.5*(1 + tanh(x/2)) is the overflow-safe logistic.
        out = 0.5 * (1.0 + np.tanh(0.5 * a.value))

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, grad * out * (1.0 - out))

        return self._record(out, a.requires_grad, backward, "sigmoid")

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, grad * (1.0 - out * out))

        return self._record(out, a.requires_grad, backward, "tanh")

    def mse_reduce(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise GraphError(
                f"mse_reduce shapes {a.value.shape} vs {b.value.shape} differ"
            )
        diff = a.value - b.value
        n = diff.size
        out = np.array([[float(np.mean(diff * diff))]])

        def backward(grad):
            scaled = (2.0 / n) * grad[0, 0] * diff
            if a.requires_grad:
                _accumulate(a, scaled)
            if b.requires_grad:
                _accumulate(b, -scaled)

        return self._record(out, a.requires_grad or b.requires_grad, backward, "mse_reduce")

    # -- reverse sweep ----------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into .grad for every contributing node."""
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)


def gradient_check(
    value_and_grad: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    coords_per_leaf: int | None = None,
    seed: int = 0,
    loss_fn: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    `value_and_grad(params)` returns (loss, grads-by-name). Each parameter
    coordinate (or a seeded subsample of `coords_per_leaf` per parameter)
    is probed at +/- h; the relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|) and the maximum over all probed
    coordinates is returned.
    """
    _, grads = value_and_grad(params)
    probe = loss_fn if loss_fn is not None else (lambda p: value_and_grad(p)[0])
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for name in sorted(params):
        theta = params[name]
        flat = theta.reshape(-1)
        grad_flat = np.asarray(grads[name]).reshape(-1)
        n = flat.size
        if coords_per_leaf is None or coords_per_leaf >= n:
            coords = range(n)
        else:
            coords = np.sort(rng.choice(n, size=coords_per_leaf, replace=False))
        for j in coords:
            original = flat[j]
            flat[j] = original + h
            loss_plus = probe(params)
            flat[j] = original - h
            loss_minus = probe(params)
            flat[j] = original
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise NumericError(f"non-finite loss while probing {name}[{j}]")
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = grad_flat[j]
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel
