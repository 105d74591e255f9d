"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive's backward rule is written in terms of other primitives, so
running ``grad(..., create_graph=True)`` records the backward pass as a new
graph that can itself be differentiated. That is all nested differentiation
needs; there are no special cases for higher orders.

Values are plain ``numpy.ndarray`` objects of dtype float64. Vectors are 1-D,
batches of vectors are 2-D (rows are samples); nothing here needs more than
rank 2.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node", "ShapeError", "const", "param", "evaluate", "grad", "stopgrad",
    "no_grad", "set_checked", "add", "sub", "mul", "div", "neg", "matmul",
    "sum", "mean", "relu", "tanh", "sigmoid", "softplus", "exp", "log", "sin",
    "cos", "square", "sqrt", "concat", "getitem", "broadcast_to", "sum_to",
    "reshape", "transpose", "dot", "norm", "maximum", "clip",
    "cosine_similarity", "finite_difference_gradient", "MlpParams",
    "init_mlp", "mlp_forward",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


_CHECKED = os.environ.get("TTD_CHECKED", "1").lower() not in ("0", "false", "no")
_RECORDING = True
_generation = itertools.count()


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf rejection at node construction. Returns the old setting."""
    global _CHECKED
    old, _CHECKED = _CHECKED, bool(flag)
    return old


@contextlib.contextmanager
def no_grad():
    """Build nodes without parent links (values only)."""
    global _RECORDING
    old, _RECORDING = _RECORDING, False
    try:
        yield
    finally:
        _RECORDING = old


@contextlib.contextmanager
def _recording(flag: bool):
    global _RECORDING
    old, _RECORDING = _RECORDING, flag
    try:
        yield
    finally:
        _RECORDING = old


class Node:
    """A value in a differentiable computation graph.

    ``backward`` maps the upstream gradient node to a tuple of gradient nodes,
    one per parent (``None`` for parents that need no gradient).
    """

    __slots__ = ("value", "parents", "backward", "requires_grad", "generation", "op")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward=None, requires_grad=False, op="const"):
        value = np.asarray(value, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by '{op}'")
        value.flags.writeable = False
        self.value = value
        self.parents = tuple(parents)
        self.backward = backward
        self.requires_grad = bool(requires_grad)
        gens = [p.generation for p in self.parents]
        self.generation = (max(gens) + 1) if gens else next(_generation)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def const(value) -> Node:
    """Wrap a value as a graph constant."""
    if isinstance(value, Node):
        return value
    return Node(value)


def param(value) -> Node:
    """A leaf that gradients are taken with respect to."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, op="param")


def _make(value, parents, backward, op) -> Node:
    if _RECORDING and any(p.requires_grad for p in parents):
        return Node(value, parents, backward, requires_grad=True, op=op)
    return Node(value, op=op)


def evaluate(expr: Node) -> np.ndarray:
    """Forward value of ``expr``; values are computed eagerly and cached on the node."""
    return expr.value


def stopgrad(expr) -> Node:
    """Same value, but no gradient ever flows back through the result."""
    expr = const(expr)
    return Node(expr.value, op="stopgrad")


def _shape_error(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes " + ", ".join(str(s) for s in shapes))


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# broadcasting pair


def broadcast_to(a, shape) -> Node:
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise _shape_error("broadcast_to", a.shape, shape) from None
    return _make(value, (a,), lambda g: (sum_to(g, a.shape),), "broadcast_to")


def sum_to(a, shape) -> Node:
    """Sum ``a`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise _shape_error("sum_to", a.shape, shape)
    value = a.value.sum(axis=tuple(range(lead))) if lead else a.value
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    if value.shape != shape:
        raise _shape_error("sum_to", a.shape, shape)
    return _make(value, (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), "sub")


def neg(a) -> Node:
    a = const(a)
    return _make(-a.value, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("mul", a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)), "mul")


def div(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("div", a, b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.value / b.value, (a, b), backward, "div")


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _make(a.value @ b.value, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def transpose(a) -> Node:
    a = const(a)
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape)
    return _make(a.value.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape) -> Node:
    a = const(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return _make(value, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    a = const(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(a.value.sum(axis=axis), axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _make(value, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# elementwise


def relu(a) -> Node:
    a = const(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g: (mul(g, mask),), "relu")


def tanh(a) -> Node:
    a = const(a)
    out = None

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.value), (a,), backward, "tanh")
    return out


def sigmoid(a) -> Node:
    a = const(a)
    out = None

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    x = a.value
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(value, (a,), backward, "sigmoid")
    return out


def softplus(a) -> Node:
    a = const(a)
    x = a.value
    value = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(value, (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def exp(a) -> Node:
    a = const(a)
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.value), (a,), backward, "exp")
    return out


def log(a) -> Node:
    a = const(a)
    if np.any(a.value <= 0):
        raise FloatingPointError("log: non-positive input")
    return _make(np.log(a.value), (a,), lambda g: (div(g, a),), "log")


def sin(a) -> Node:
    a = const(a)
    return _make(np.sin(a.value), (a,), lambda g: (mul(g, cos(a)),), "sin")


def cos(a) -> Node:
    a = const(a)
    return _make(np.cos(a.value), (a,), lambda g: (neg(mul(g, sin(a))),), "cos")


def square(a) -> Node:
    a = const(a)
    return _make(a.value * a.value, (a,), lambda g: (mul(mul(g, a), 2.0),), "square")


def sqrt(a) -> Node:
    a = const(a)
    if np.any(a.value < 0):
        raise FloatingPointError("sqrt: negative input")
    out = None

    def backward(g):
        return (div(mul(g, 0.5), out),)

    out = _make(np.sqrt(a.value), (a,), backward, "sqrt")
    return out


def maximum(a, b) -> Node:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = const(a), const(b)
    _broadcast_shape("maximum", a, b)
    take_a = (a.value >= b.value).astype(np.float64)
    return _make(np.maximum(a.value, b.value), (a, b),
                 lambda g: (sum_to(mul(g, take_a), a.shape),
                            sum_to(mul(g, 1.0 - take_a), b.shape)), "maximum")


def clip(a, lo, hi) -> Node:
    """Clamp to ``[lo, hi]``; zero gradient outside the interval."""
    a = const(a)
    inside = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (mul(g, inside),), "clip")


# --------------------------------------------------------------------------
# structural


def concat(nodes: Sequence, axis=-1) -> Node:
    nodes = [const(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[n.shape for n in nodes]) from None
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def backward(g):
        out = []
        for i in range(len(nodes)):
            idx = [slice(None)] * value.ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(value, nodes, backward, "concat")


def getitem(a, idx) -> Node:
    a = const(a)
    try:
        value = np.array(a.value[idx])
    except IndexError:
        raise _shape_error("slice", a.shape, idx) from None
    return _make(value, (a,), lambda g: (_scatter(g, idx, a.shape),), "slice")


def _scatter(g, idx, shape) -> Node:
    """Adjoint of ``getitem``: place ``g`` at ``idx`` inside zeros of ``shape``."""
    g = const(g)
    value = np.zeros(shape)
    np.add.at(value, idx, g.value)
    return _make(value, (g,), lambda gg: (getitem(gg, idx),), "scatter")


def dot(u, v, axis=-1, keepdims=False) -> Node:
    """Inner product along ``axis`` (rowwise for 2-D operands)."""
    return sum(mul(u, v), axis=axis, keepdims=keepdims)


def norm(u, axis=-1, keepdims=False) -> Node:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    u = const(u)
    value = np.sqrt((u.value * u.value).sum(axis=axis, keepdims=keepdims))
    out = None

    def backward(g):
        y, gg = out, g
        if not keepdims:
            shp = np.expand_dims(value, axis).shape
            y, gg = reshape(out, shp), reshape(g, shp)
        return (mul(u, div(gg, maximum(y, 1e-300))),)

    out = _make(value, (u,), backward, "norm")
    return out


def cosine_similarity(u, v, eps: float = 1e-8, axis=-1) -> Node:
    """``(u.v) / max(|u||v|, eps)`` along ``axis``."""
    u, v = const(u), const(v)
    if u.shape != v.shape:
        raise _shape_error("cosine_similarity", u.shape, v.shape)
    return div(dot(u, v, axis=axis), maximum(mul(norm(u, axis=axis), norm(v, axis=axis)), eps))


# --------------------------------------------------------------------------
# differentiation


def _toposort(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(scalar: Node, wrt: Sequence[Node], create_graph: bool = False):
    """Gradients of a single-element node with respect to each node in ``wrt``.

    With ``create_graph`` the results are nodes that can be differentiated
    again; otherwise they are plain arrays. Targets the scalar does not depend
    on get zeros.
    """
    if scalar.value.size != 1:
        raise ShapeError(f"grad: root must have a single element, got shape {scalar.shape}")
    wrt = list(wrt)
    adj = {id(scalar): Node(np.ones_like(scalar.value))}
    with _recording(create_graph):
        for node in reversed(_toposort(scalar)):
            g = adj.get(id(node))
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = adj.get(id(parent))
                adj[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = adj.get(id(w))
        if g is None:
            g = Node(np.zeros_like(w.value))
        out.append(g if create_graph else np.array(g.value))
    return out


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x+eps e_i) - f(x-eps e_i)) / 2eps`` per coordinate."""
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + epsilon
        fp = float(f(x.copy()))
        flat_x[i] = orig - epsilon
        fm = float(f(x.copy()))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (fp - fm) / (2.0 * epsilon)
    return g


# --------------------------------------------------------------------------
# multilayer perceptrons on the graph


@dataclass
class MlpParams:
    """Per-layer weights ``W`` (in, out) and biases ``b`` (out,) as graph leaves."""

    weights: list
    biases: list
    activations: list  # one per layer: "relu", "tanh" or "identity"

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for k in range(1, len(self.weights)):
            if self.weights[k - 1].shape[1] != self.weights[k].shape[0]:
                raise _shape_error("MlpParams", self.weights[k - 1].shape, self.weights[k].shape)

    def nodes(self) -> list:
        return [n for pair in zip(self.weights, self.biases) for n in pair]


_ACTS = {"relu": relu, "tanh": tanh, "identity": lambda x: x}


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, hidden="relu", output="identity") -> MlpParams:
    """Fan-in scaled Gaussian weights, zero biases, all leaves requiring grad."""
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(param(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)))
        biases.append(param(np.zeros(n_out)))
    acts = [hidden] * (len(sizes) - 2) + [output]
    return MlpParams(weights, biases, acts)


def mlp_forward(params: MlpParams, x) -> Node:
    h = const(x)
    for W, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACTS[act](add(matmul(h, W), b))
    return h
