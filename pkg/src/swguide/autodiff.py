"""Minimal reverse-mode automatic differentiation on 2-D float64 arrays.

Every differentiable value lives on a :class:`Tape` as a :class:`Node`.
Operations append nodes in creation order, so the backward pass is a single
reversed walk over the tape — no topological sort is needed.  Gradients
accumulate additively into ``node.grad``; a tape supports exactly one
backward pass and is meant to be rebuilt from scratch for every step.

Only the operations needed by the models in this package are provided.
All arrays are C-contiguous ``float64`` matrices; 1-D inputs are promoted
to single-row matrices on entry.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DoubleBackwardError,
    NonFiniteError,
    NotScalarError,
    ShapeMismatchError,
)

PROB_FLOOR = 1e-12


def _as_matrix(value) -> np.ndarray:
    """Coerce ``value`` to a 2-D float64 array (rows stay rows)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeMismatchError(f"expected at most 2 dimensions, got {arr.ndim}")
    return np.ascontiguousarray(arr)


class Node:
    """One value on the tape plus the bookkeeping backward() needs."""

    __slots__ = ("tape", "value", "grad", "op", "parents", "aux")

    def __init__(self, tape, value, op, parents, aux=None):
        self.tape = tape
        self.value = value
        self.grad = np.zeros_like(value)
        self.op = op
        self.parents = parents
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Flat, creation-ordered record of nodes for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_done = False

    def leaf(self, value) -> Node:
        """Register an input (weights or data) as a gradient-carrying leaf."""
        return self._record(_as_matrix(value), "leaf", ())

    def _record(self, value, op, parents, aux=None) -> Node:
        if not np.isfinite(value).all():
            raise NonFiniteError(f"op {op!r} produced a non-finite value")
        node = Node(self, value, op, parents, aux)
        self.nodes.append(node)
        return node

    def reset_grads(self):
        for node in self.nodes:
            node.grad[...] = 0.0


def _check_same_tape(*nodes):
    tape = nodes[0].tape
    for node in nodes[1:]:
        if node.tape is not tape:
            raise ShapeMismatchError("operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of 2-D numpy broadcasting)."""
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(a_shape, b_shape) -> bool:
    return all(m == n or m == 1 or n == 1 for m, n in zip(a_shape, b_shape))


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    tape = _check_same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}"
        )
    return tape._record(a.value @ b.value, "matmul", (a, b))


def add(a: Node, b: Node) -> Node:
    tape = _check_same_tape(a, b)
    if not _broadcastable(a.value.shape, b.value.shape):
        raise ShapeMismatchError(
            f"add shapes not broadcastable: {a.value.shape} vs {b.value.shape}"
        )
    return tape._record(a.value + b.value, "add", (a, b))


def mul(a: Node, b: Node) -> Node:
    tape = _check_same_tape(a, b)
    if not _broadcastable(a.value.shape, b.value.shape):
        raise ShapeMismatchError(
            f"mul shapes not broadcastable: {a.value.shape} vs {b.value.shape}"
        )
    return tape._record(a.value * b.value, "mul", (a, b))


def scale(a: Node, alpha: float) -> Node:
    """Multiply by a Python constant (the constant gets no gradient)."""
    return a.tape._record(a.value * float(alpha), "scale", (a,), aux=float(alpha))


def relu(a: Node) -> Node:
    return a.tape._record(np.maximum(a.value, 0.0), "relu", (a,))


def sigmoid(a: Node) -> Node:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.tape._record(out, "sigmoid", (a,))


def mean(a: Node) -> Node:
    """Mean over every entry, returned as a 1x1 matrix."""
    return a.tape._record(np.array([[a.value.mean()]]), "mean", (a,))


def weighted_sum(a: Node, weights) -> Node:
    """``sum(a * weights)`` as a 1x1 matrix; ``weights`` is a constant array."""
    w = _as_matrix(weights)
    if w.shape != a.value.shape:
        raise ShapeMismatchError(
            f"weighted_sum weights shape {w.shape} != value shape {a.value.shape}"
        )
    return a.tape._record(
        np.array([[float(np.sum(a.value * w))]]), "weighted_sum", (a,), aux=w
    )


def softmax_rows(a: Node, temperature: float = 1.0) -> Node:
    """Row-wise softmax of ``a / temperature`` (max-subtracted for stability)."""
    t = float(temperature)
    if t <= 0.0:
        raise ValueError(f"softmax temperature must be positive, got {t}")
    z = a.value / t
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=1, keepdims=True)
    return a.tape._record(out, "softmax_rows", (a,), aux=t)


def log_rows(a: Node, floor: float = PROB_FLOOR) -> Node:
    """Elementwise ``log(max(a, floor))``; gradient is zero where the floor bites."""
    clipped = np.maximum(a.value, floor)
    return a.tape._record(np.log(clipped), "log_rows", (a,), aux=float(floor))


def concat_rows(a: Node, b: Node) -> Node:
    tape = _check_same_tape(a, b)
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeMismatchError(
            f"concat_rows widths differ: {a.value.shape[1]} vs {b.value.shape[1]}"
        )
    return tape._record(np.concatenate([a.value, b.value], axis=0), "concat_rows", (a, b))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    n = a.value.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatchError(f"slice_rows [{start}:{stop}] out of range for {n} rows")
    return a.tape._record(
        a.value[start:stop].copy(), "slice_rows", (a,), aux=(start, stop)
    )


def outer_rows(f: Node, p: Node) -> Node:
    """Row-wise outer product: ``out[i] = flatten(f[i] (x) p[i])``.

    For ``f`` of shape (n, d) and ``p`` of shape (n, k) the result has shape
    (n, d*k), with ``out[i, j*k + l] = f[i, j] * p[i, l]``.
    """
    tape = _check_same_tape(f, p)
    if f.value.shape[0] != p.value.shape[0]:
        raise ShapeMismatchError(
            f"outer_rows row counts differ: {f.value.shape[0]} vs {p.value.shape[0]}"
        )
    n = f.value.shape[0]
    out = np.einsum("ni,nk->nik", f.value, p.value).reshape(n, -1)
    return tape._record(np.ascontiguousarray(out), "outer_rows", (f, p))


def gradient_reverse(a: Node, lam: float) -> Node:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    lam = float(lam)
    if lam < 0.0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    return a.tape._record(a.value.copy(), "gradient_reverse", (a,), aux=lam)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _back_matmul(node):
    a, b = node.parents
    a.grad += node.grad @ b.value.T
    b.grad += a.value.T @ node.grad


def _back_add(node):
    a, b = node.parents
    a.grad += _unbroadcast(node.grad, a.value.shape)
    b.grad += _unbroadcast(node.grad, b.value.shape)


def _back_mul(node):
    a, b = node.parents
    a.grad += _unbroadcast(node.grad * b.value, a.value.shape)
    b.grad += _unbroadcast(node.grad * a.value, b.value.shape)


def _back_scale(node):
    (a,) = node.parents
    a.grad += node.grad * node.aux


def _back_relu(node):
    (a,) = node.parents
    a.grad += node.grad * (a.value > 0.0)


def _back_sigmoid(node):
    (a,) = node.parents
    s = node.value
    a.grad += node.grad * s * (1.0 - s)


def _back_mean(node):
    (a,) = node.parents
    a.grad += node.grad[0, 0] / a.value.size


def _back_weighted_sum(node):
    (a,) = node.parents
    a.grad += node.grad[0, 0] * node.aux


def _back_softmax_rows(node):
    (a,) = node.parents
    s = node.value
    g = node.grad
    inner = (g * s).sum(axis=1, keepdims=True)
    a.grad += (g - inner) * s / node.aux


def _back_log_rows(node):
    (a,) = node.parents
    floor = node.aux
    a.grad += np.where(a.value > floor, node.grad / np.maximum(a.value, floor), 0.0)


def _back_concat_rows(node):
    a, b = node.parents
    na = a.value.shape[0]
    a.grad += node.grad[:na]
    b.grad += node.grad[na:]


def _back_slice_rows(node):
    (a,) = node.parents
    start, stop = node.aux
    a.grad[start:stop] += node.grad


def _back_outer_rows(node):
    f, p = node.parents
    n = f.value.shape[0]
    g = node.grad.reshape(n, f.value.shape[1], p.value.shape[1])
    f.grad += np.einsum("nik,nk->ni", g, p.value)
    p.grad += np.einsum("nik,ni->nk", g, f.value)


def _back_gradient_reverse(node):
    (a,) = node.parents
    a.grad += node.grad * (-node.aux)


_BACKWARD = {
    "matmul": _back_matmul,
    "add": _back_add,
    "mul": _back_mul,
    "scale": _back_scale,
    "relu": _back_relu,
    "sigmoid": _back_sigmoid,
    "mean": _back_mean,
    "weighted_sum": _back_weighted_sum,
    "softmax_rows": _back_softmax_rows,
    "log_rows": _back_log_rows,
    "concat_rows": _back_concat_rows,
    "slice_rows": _back_slice_rows,
    "outer_rows": _back_outer_rows,
    "gradient_reverse": _back_gradient_reverse,
}


def backward(tape: Tape, loss: Node):
    """Propagate d(loss)/d(node) into every ``node.grad`` on the tape."""
    if loss.tape is not tape:
        raise ShapeMismatchError("loss does not belong to this tape")
    if loss.value.shape != (1, 1):
        raise NotScalarError(f"loss must be 1x1, got shape {loss.value.shape}")
    if tape._backward_done:
        raise DoubleBackwardError("this tape has already been differentiated")
    tape._backward_done = True
    loss.grad[...] = 1.0
    for node in reversed(tape.nodes):
        if node.op == "leaf":
            continue
        if not np.any(node.grad):
            continue
        _BACKWARD[node.op](node)
