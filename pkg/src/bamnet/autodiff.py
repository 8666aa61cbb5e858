"""Reverse-mode automatic differentiation over tensor ops.

Every differentiable op produces a Node linking its output tensor to its
parent nodes and a backward rule.  ``backward`` walks the graph from a scalar
root in reverse topological order, reduce-summing broadcast gradients back to
parent shapes.  Gradients accumulate additively into ``Node.grad`` until the
caller resets them, so calling backward twice doubles every gradient.

Recording is controlled by a thread-local state: inside ``no_grad`` ops
produce detached nodes (no parents, nothing appended to the active Tape).
"""
from __future__ import annotations

import threading

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor

_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.tapes = []
    return _state


def grad_enabled() -> bool:
    return _st().grad_enabled


class no_grad:
    """Context manager: ops inside record no graph and append nothing to tapes."""

    def __enter__(self):
        st = _st()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _st().grad_enabled = self._prev
        return False


class Tape:
    """Records nodes in creation order (a valid topological order)."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _st().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _st().tapes.remove(self)
        return False


class Node:
    """One value in the computation graph.

    Leaves have no parents; op outputs carry their parents and a backward rule
    mapping the output gradient (ndarray) to per-parent gradient ndarrays.
    """

    __slots__ = ("value", "parents", "rule", "grad", "trainable", "name")

    def __init__(self, value, parents=(), rule=None, trainable=False, name=None):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.parents = tuple(parents)
        self.rule = rule
        self.grad = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self):
        return Node(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # arithmetic sugar used throughout the layer code
    def __add__(self, other):
        return add(self, _as_node(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_node(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_node(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_node(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_node(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_node(other, self.dtype), self)

    def __neg__(self):
        return self * -1.0

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axes=None, keep_dims=False):
        return reduce_sum(self, axes, keep_dims)

    def mean(self, axes=None, keep_dims=False):
        return reduce_mean(self, axes, keep_dims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_node(x, dtype=None):
    if isinstance(x, Node):
        return x
    if isinstance(x, Tensor):
        return Node(x)
    return Node(Tensor(np.asarray(x, dtype=dtype)))


def constant(x, dtype=None) -> Node:
    return _as_node(x, dtype)


def make_node(value: Tensor, parents, rule) -> Node:
    """Create an op-output node, honoring no_grad and the active tape."""
    st = _st()
    if not st.grad_enabled:
        return Node(value)
    node = Node(value, parents, rule)
    if st.tapes:
        st.tapes[-1].nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce-sum a broadcast gradient back to a parent shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# differentiable ops

def add(a: Node, b: Node) -> Node:
    out = T.add(a.value, b.value)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), rule)


def sub(a: Node, b: Node) -> Node:
    out = T.sub(a.value, b.value)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), rule)


def mul(a: Node, b: Node) -> Node:
    out = T.mul(a.value, b.value)

    def rule(g):
        return (
            _unbroadcast(g * b.value.data, a.shape),
            _unbroadcast(g * a.value.data, b.shape),
        )

    return make_node(out, (a, b), rule)


def div(a: Node, b: Node) -> Node:
    out = T.div(a.value, b.value)

    def rule(g):
        ga = g / b.value.data
        gb = -g * a.value.data / (b.value.data * b.value.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), rule)


def maximum(a: Node, b: Node) -> Node:
    """Elementwise max; on ties the gradient goes to the first operand."""
    out = T.maximum(a.value, b.value)

    def rule(g):
        first = a.value.data >= b.value.data
        return (
            _unbroadcast(np.where(first, g, 0.0), a.shape),
            _unbroadcast(np.where(first, 0.0, g), b.shape),
        )

    return make_node(out, (a, b), rule)


def matmul(a: Node, b: Node) -> Node:
    out = T.matmul(a.value, b.value)

    def rule(g):
        return g @ b.value.data.T, a.value.data.T @ g

    return make_node(out, (a, b), rule)


def relu(a: Node) -> Node:
    out = T.relu(a.value)

    def rule(g):
        return (g * (a.value.data > 0),)

    return make_node(out, (a,), rule)


def sigmoid(a: Node) -> Node:
    out = T.sigmoid(a.value)
    s = out.data

    def rule(g):
        return (g * s * (1.0 - s),)

    return make_node(out, (a,), rule)


def exp(a: Node) -> Node:
    out = T.exp(a.value)

    def rule(g):
        return (g * out.data,)

    return make_node(out, (a,), rule)


def log(a: Node) -> Node:
    out = T.log(a.value)

    def rule(g):
        return (g / a.value.data,)

    return make_node(out, (a,), rule)


def sqrt(a: Node) -> Node:
    out = T.sqrt(a.value)

    def rule(g):
        return (g * 0.5 / out.data,)

    return make_node(out, (a,), rule)


def _all_axes(a: Node, axes):
    if axes is None:
        return tuple(range(a.value.rank))
    if isinstance(axes, int):
        return (axes,)
    return tuple(axes)


def _expand_reduced(g, in_shape, axes, keep_dims):
    if not keep_dims:
        shape = list(g.shape)
        for ax in sorted(axes):
            shape.insert(ax, 1)
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a: Node, axes=None, keep_dims=False) -> Node:
    axes = _all_axes(a, axes)
    out = T.reduce_sum(a.value, axes, keep_dims)

    def rule(g):
        return (np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keep_dims)),)

    return make_node(out, (a,), rule)


def reduce_mean(a: Node, axes=None, keep_dims=False) -> Node:
    axes = _all_axes(a, axes)
    out = T.reduce_mean(a.value, axes, keep_dims)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def rule(g):
        return (np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keep_dims)) / count,)

    return make_node(out, (a,), rule)


def reshape(a: Node, shape) -> Node:
    out = T.reshape(a.value, shape)

    def rule(g):
        return (g.reshape(a.shape),)

    return make_node(out, (a,), rule)


def broadcast_to(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if T.broadcast_shapes(a.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    out = Tensor(np.broadcast_to(a.value.data, shape))

    def rule(g):
        return (_unbroadcast(g, a.shape),)

    return make_node(out, (a,), rule)


def transpose(a: Node, axes=None) -> Node:
    out = T.transpose(a.value, axes)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def rule(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return make_node(out, (a,), rule)


def slice_along(a: Node, axis: int, start: int, stop: int) -> Node:
    out = T.slice_along(a.value, axis, start, stop)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        idx = [slice(None)] * a.value.rank
        idx[axis] = slice(start, stop)
        full[tuple(idx)] = g
        return (full,)

    return make_node(out, (a,), rule)


def concat(nodes, axis: int) -> Node:
    out = T.concat([n.value for n in nodes], axis)
    extents = [n.shape[axis] for n in nodes]

    def rule(g):
        grads = []
        offset = 0
        for e in extents:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + e)
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
            offset += e
        return tuple(grads)

    return make_node(out, tuple(nodes), rule)


# ---------------------------------------------------------------------------
# backward and verification

def _topo_order(root: Node):
    """Iterative post-order DFS; parents precede consumers in the result."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every node reachable from root."""
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    pending = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = Tensor.wrap(g.copy()) if node.grad is None else Tensor.wrap(node.grad.data + g)
        if node.rule is None or not node.parents:
            continue
        parent_grads = node.rule(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg


def grad_check(f, x: Tensor, eps=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |analytic - numeric| / max(1, |analytic|,
    |numeric|).  Requires float64 input; raises NumericError if f produces a
    non-finite value.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 input tensor")
    leaf = Node(x.copy())
    out = f(leaf)
    if out.value.size != 1:
        raise ShapeError(f"grad_check function must be scalar-valued, got {out.shape}")
    if not np.isfinite(out.value.data).all():
        raise NumericError("grad_check: function returned a non-finite value")
    backward(out)
    analytic = leaf.grad.data if leaf.grad is not None else np.zeros(x.shape)

    def eval_at(arr):
        with no_grad():
            v = f(Node(Tensor.wrap(arr))).value.item()
        if not np.isfinite(v):
            raise NumericError("grad_check: function returned a non-finite value")
        return v

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        hi = eval_at(bumped.reshape(x.shape))
        bumped[i] -= 2 * eps
        lo = eval_at(bumped.reshape(x.shape))
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
