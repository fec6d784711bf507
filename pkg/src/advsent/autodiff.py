"""Small reverse-mode differentiation engine over dense float64 arrays.

Only the operators needed by the shared-encoder model and its losses are
provided. Every op returns a :class:`Node`; calling :func:`backward` on a
scalar node pushes gradients to every leaf created with
``requires_grad=True``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (), op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = parents
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"


def _make(value, parents: Sequence[Node], op: str, backward_fn) -> Node:
    out = Node(value, requires_grad=any(p.requires_grad for p in parents), parents=tuple(parents), op=op)
    out._backward = backward_fn
    return out


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64, copy=True), requires_grad=True)


def detach(x: Node) -> Node:
    """Leaf copy of ``x`` that blocks gradient flow."""
    return Node(x.value, requires_grad=False, op="detach")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def back(g):
        return (g @ b.value.T if a.requires_grad else None,
                a.value.T @ g if b.requires_grad else None)

    return _make(a.value @ b.value, (a, b), "matmul", back)


def add_bias(x: Node, b: Node) -> Node:
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} are incompatible")

    def back(g):
        return g, g.sum(axis=0)

    return _make(x.value + b.value, (x, b), "add_bias", back)


def relu(x: Node) -> Node:
    mask = x.value > 0

    def back(g):
        return (g * mask,)

    return _make(np.where(mask, x.value, 0.0), (x,), "relu", back)


def dropout(x: Node, p: float, rng: np.random.Generator | None, training: bool = True) -> Node:
    """Inverted dropout. Identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)

    def back(g):
        return (g * scale,)

    return _make(x.value * scale, (x,), "dropout", back)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Batch-mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got shape {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape} vs logits shape {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")

    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def back(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(loss, (logits,), "softmax_xent", back)


def scale_and_sum(terms: Iterable[tuple[float, Node]]) -> Node:
    """Scalar ``sum_i c_i * t_i`` for scalar nodes ``t_i``."""
    terms = list(terms)
    if not terms:
        raise ValueError("scale_and_sum needs at least one term")
    for _, t in terms:
        if t.value.size != 1:
            raise DimensionError(f"scale_and_sum: term of shape {t.shape} is not scalar")
    coefs = [float(c) for c, _ in terms]
    total = 0.0
    for c, (_, t) in zip(coefs, terms):
        total = total + c * float(t.value)

    def back(g):
        return tuple(c * g for c in coefs)

    return _make(total, tuple(t for _, t in terms), "scale_and_sum", back)


def mean(x: Node) -> Node:
    size = x.value.size
    if size == 0:
        raise ValueError("mean of an empty tensor")

    def back(g):
        return (np.full(x.shape, g / size),)

    return _make(x.value.mean(), (x,), "mean", back)


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Interior gradients are kept local to the call, so calling ``backward``
    twice without resetting doubles the leaf gradients and nothing else.
    """
    if loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = upstream.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            upstream[key] = pg if key not in upstream else upstream[key] + pg
