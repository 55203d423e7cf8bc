"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the operation set the distillation losses need: matmul,
elementwise arithmetic with unbroadcast, tanh, row L2-normalization, column
prefixes, transpose, and a fused diagonal-target cross-entropy. Values are
eagerly computed; ``backward`` walks the recorded graph once in reverse
topological order and accumulates ``grad`` on every node.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "var",
    "const",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_scalar",
    "mul_scalar",
    "sum_all",
    "tanh",
    "row_normalize",
    "prefix",
    "ce_diag",
]

_NORM_GUARD = 1e-24  # added under the square root so normalization stays smooth


class Var:
    """A node in the computation graph: a value, a grad slot, and parents."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self._backward is None})"


def var(value) -> Var:
    """Trainable leaf."""
    return Var(value)


def const(value) -> Var:
    """Constant leaf (gradients flow to it but are simply ignored)."""
    return Var(value)


def backward(root: Var) -> None:
    """Populate ``grad`` on every node reachable from ``root`` (a scalar)."""
    if root.value.ndim != 0 and root.value.size != 1:
        raise ValueError("backward expects a scalar loss node")
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Var, b: Var) -> Var:
    out_val = a.value @ b.value

    def bwd(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return Var(out_val, (a, b), bwd)


def transpose(a: Var) -> Var:
    def bwd(g):
        a.grad += g.T

    return Var(a.value.T, (a,), bwd)


def add(a: Var, b: Var) -> Var:
    def bwd(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    return Var(a.value + b.value, (a, b), bwd)


def sub(a: Var, b: Var) -> Var:
    def bwd(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad -= _unbroadcast(g, b.value.shape)

    return Var(a.value - b.value, (a, b), bwd)


def mul(a: Var, b: Var) -> Var:
    def bwd(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)

    return Var(a.value * b.value, (a, b), bwd)


def add_scalar(a: Var, c: float) -> Var:
    def bwd(g):
        a.grad += g

    return Var(a.value + c, (a,), bwd)


def mul_scalar(a: Var, c: float) -> Var:
    def bwd(g):
        a.grad += g * c

    return Var(a.value * c, (a,), bwd)


def sum_all(a: Var) -> Var:
    def bwd(g):
        a.grad += np.broadcast_to(g, a.value.shape)

    return Var(a.value.sum(), (a,), bwd)


def tanh(a: Var) -> Var:
    out_val = np.tanh(a.value)

    def bwd(g):
        a.grad += g * (1.0 - out_val * out_val)

    return Var(out_val, (a,), bwd)


def row_normalize(a: Var) -> Var:
    """L2-normalize each row; smooth near zero via a tiny additive guard."""
    sumsq = np.sum(a.value * a.value, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(sumsq + _NORM_GUARD)
    out_val = a.value * inv

    def bwd(g):
        dot = np.sum(g * a.value, axis=-1, keepdims=True)
        a.grad += g * inv - a.value * (dot * inv**3)

    return Var(out_val, (a,), bwd)


def prefix(a: Var, d: int) -> Var:
    """First ``d`` columns of a 2-D node."""
    if a.value.ndim != 2:
        raise ValueError("prefix expects a 2-D node")
    if not 1 <= d <= a.value.shape[1]:
        raise ValueError(f"prefix width {d} outside 1..{a.value.shape[1]}")

    def bwd(g):
        a.grad[:, :d] += g

    return Var(a.value[:, :d].copy(), (a,), bwd)


def ce_diag(s: Var) -> Var:
    """Mean cross-entropy of each row of logits against the diagonal target.

    value = mean_i [logsumexp_j s_ij - s_ii]; the fused backward uses the
    row softmax minus the identity.
    """
    if s.value.ndim != 2 or s.value.shape[0] != s.value.shape[1]:
        raise ValueError("ce_diag expects a square logit matrix")
    n = s.value.shape[0]
    m = s.value.max(axis=1, keepdims=True)
    exp = np.exp(s.value - m)
    z = exp.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    out_val = float(np.mean(lse - np.diag(s.value)))
    p = exp / z

    def bwd(g):
        s.grad += (p - np.eye(n)) * (g / n)

    return Var(out_val, (s,), bwd)
