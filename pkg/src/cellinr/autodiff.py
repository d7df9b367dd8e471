"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records array-valued primitive operations in construction
order (which is already a topological order, since an operation can only
consume previously created nodes).  Calling :func:`backward` seeds the
adjoint of a scalar root and sweeps the tape once in reverse, accumulating
adjoints into every participating leaf.  Leaves that did not feed the root
keep an exactly-zero gradient.

All reductions accumulate in float64 regardless of the storage dtype of
the operands; results are cast back so a float32 pipeline stays float32
end to end.
"""

from __future__ import annotations

import numpy as np


class Node:
    """One tape entry: a cached forward value plus its adjoint slot."""

    __slots__ = ("tape", "value", "parents", "vjps", "recompute", "grad", "op")

    def __init__(self, tape, value, parents=(), vjps=(), recompute=None, op="leaf"):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.recompute = recompute
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _register(self, node):
        self.nodes.append(node)
        return node

    def leaf(self, value, dtype=None):
        """Insert a constant or parameter leaf holding ``value``."""
        arr = np.asarray(value, dtype=dtype)
        return self._register(Node(self, arr))

    def _apply(self, op, value, parents, vjps, recompute):
        return self._register(Node(self, value, tuple(parents), tuple(vjps), recompute, op))

    def replay(self):
        """Recompute every non-leaf value in order; True if bit-identical."""
        ok = True
        for node in self.nodes:
            if node.recompute is None:
                continue
            fresh = node.recompute()
            if not (fresh.dtype == node.value.dtype and np.array_equal(fresh, node.value)):
                ok = False
            node.value = fresh
        return ok


def backward(root, seed=1.0):
    """Reverse sweep from a scalar-valued ``root`` node.

    Parameters
    ----------
    root: Node with scalar (shape ``()``) value.
    seed: adjoint assigned to the root, normally 1.

    After the call every node reachable from the root carries its adjoint
    in ``.grad``; unreachable nodes keep ``.grad`` of zeros (lazily
    materialized through :func:`grad_of`).
    """
    if root.value.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    nodes = tape.nodes
    idx = nodes.index(root) if nodes[-1] is not root else len(nodes) - 1
    root.grad = np.asarray(seed, dtype=root.value.dtype)
    for node in reversed(nodes[: idx + 1]):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib.astype(parent.value.dtype, copy=True)
            else:
                parent.grad = parent.grad + contrib.astype(parent.value.dtype, copy=False)


def grad_of(node):
    """Gradient of the last backward pass w.r.t. ``node`` (zeros if unused)."""
    if node.grad is None:
        return np.zeros_like(node.value)
    return node.grad


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = _sum64(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = _sum64(grad, axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sum64(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


def _as_node(tape, x):
    if isinstance(x, Node):
        return x
    return tape.leaf(x)


def add(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _as_node(tape, a), _as_node(tape, b)
    return tape._apply(
        "add",
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
        lambda: a.value + b.value,
    )


def sub(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _as_node(tape, a), _as_node(tape, b)
    return tape._apply(
        "sub",
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
        lambda: a.value - b.value,
    )


def mul(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _as_node(tape, a), _as_node(tape, b)
    return tape._apply(
        "mul",
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
        lambda: a.value * b.value,
    )


def div(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _as_node(tape, a), _as_node(tape, b)
    return tape._apply(
        "div",
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
        lambda: a.value / b.value,
    )


def neg(a):
    return a.tape._apply("neg", -a.value, (a,), (lambda g: -g,), lambda: -a.value)


def matmul(a, b):
    """2-D matrix product; adjoints are the classic transposed products."""
    tape = a.tape
    return tape._apply(
        "matmul",
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
        lambda: a.value @ b.value,
    )


def relu(a):
    return a.tape._apply(
        "relu",
        np.maximum(a.value, 0),
        (a,),
        (lambda g: g * (a.value > 0),),
        lambda: np.maximum(a.value, 0),
    )


def _sigmoid(x):
    # two-sided form, no overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    y = _sigmoid(a.value)
    node = a.tape._apply(
        "sigmoid",
        y,
        (a,),
        (lambda g: g * (node.value * (1.0 - node.value)),),
        lambda: _sigmoid(a.value),
    )
    return node


def softplus(a):
    return a.tape._apply(
        "softplus",
        np.logaddexp(0.0, a.value).astype(a.value.dtype),
        (a,),
        (lambda g: g * _sigmoid(a.value),),
        lambda: np.logaddexp(0.0, a.value).astype(a.value.dtype),
    )


def exp(a):
    node = a.tape._apply(
        "exp",
        np.exp(a.value),
        (a,),
        (lambda g: g * node.value,),
        lambda: np.exp(a.value),
    )
    return node


def absolute(a):
    # subgradient at 0 is taken as 0 (sign(0) == 0)
    return a.tape._apply(
        "abs",
        np.abs(a.value),
        (a,),
        (lambda g: g * np.sign(a.value),),
        lambda: np.abs(a.value),
    )


def square(a):
    return a.tape._apply(
        "square",
        a.value * a.value,
        (a,),
        (lambda g: g * (2.0 * a.value),),
        lambda: a.value * a.value,
    )


def reduce_sum(a, axis=None, keepdims=False):
    """Summation with float64 accumulation, cast back to the input dtype."""

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).astype(a.value.dtype, copy=False)

    return a.tape._apply(
        "sum",
        _sum64(a.value, axis=axis, keepdims=keepdims),
        (a,),
        (vjp,),
        lambda: _sum64(a.value, axis=axis, keepdims=keepdims),
    )


def reduce_mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    s = reduce_sum(a, axis=axis)
    return mul(s, np.asarray(1.0 / n, dtype=a.value.dtype))


def concat(nodes, axis=0):
    tape = nodes[0].tape
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * nodes[i].value.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return tape._apply(
        "concat",
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        tuple(make_vjp(i) for i in range(len(nodes))),
        lambda: np.concatenate([n.value for n in nodes], axis=axis),
    )


def reshape(a, shape):
    return a.tape._apply(
        "reshape",
        a.value.reshape(shape),
        (a,),
        (lambda g: g.reshape(a.value.shape),),
        lambda: a.value.reshape(shape),
    )


def take_rows(a, start, stop):
    """Contiguous row slice ``a[start:stop]`` along axis 0."""

    def vjp(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return out

    return a.tape._apply(
        "take_rows",
        a.value[start:stop],
        (a,),
        (vjp,),
        lambda: a.value[start:stop],
    )


def softmax_rows(scores):
    """Row-wise softmax of a 2-D node, max-subtracted for stability.

    The per-row maximum is treated as a constant shift; softmax is
    shift-invariant so the adjoints are unaffected.
    """
    shift = np.max(scores.value, axis=1, keepdims=True)
    e = exp(sub(scores, shift))
    total = reduce_sum(e, axis=1, keepdims=True)
    return div(e, total)
