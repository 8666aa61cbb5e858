"""Dense n-dimensional arrays and the primitive (non-differentiable) ops.

Tensors wrap a row-major contiguous numpy buffer restricted to float32 or
float64.  Extents must all be >= 1 (rank 0 is a scalar); every op returns a
fresh tensor, so a constructed tensor never changes and can be shared freely
between readers.  Randomness comes from numpy's Philox counter-based bit
generator so that a seed pins every stream bit-exactly across runs.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

FLOAT32 = np.float32
FLOAT64 = np.float64
_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


def make_rng(seed) -> np.random.Generator:
    """Seeded Philox generator; accepts an int or a SeedSequence-style list of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _check_extents(shape):
    for e in shape:
        if int(e) < 1:
            raise ShapeError(f"extents must be >= 1, got shape {tuple(shape)}")


class Tensor:
    """Immutable-by-convention dense array (float32 or float64, C layout)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in _ALLOWED:
            if np.issubdtype(arr.dtype, np.number) or arr.dtype == np.bool_:
                arr = arr.astype(FLOAT32 if dtype is None else dtype, order="C")
            else:
                raise TypeError(f"unsupported element type {arr.dtype}")
        _check_extents(arr.shape)
        self.data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an existing array without copying.  Caller must not alias it afterwards."""
        t = object.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype not in _ALLOWED:
            raise TypeError(f"unsupported element type {arr.dtype}")
        _check_extents(arr.shape)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        t.data = arr
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def rank(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype):
        return Tensor.wrap(self.data.astype(dtype))

    def copy(self):
        return Tensor.wrap(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise TypeError(f"elem_type mismatch: {a.dtype} vs {b.dtype}")


def broadcast_shapes(sa, sb):
    """Result shape of broadcasting, or ShapeError naming both shapes.

    Two shapes broadcast iff, right-aligned, every extent pair is equal or one
    of them is 1.
    """
    out = []
    for i in range(1, max(len(sa), len(sb)) + 1):
        ea = sa[-i] if i <= len(sa) else 1
        eb = sb[-i] if i <= len(sb) else 1
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeError(f"shapes {tuple(sa)} and {tuple(sb)} do not broadcast")
        out.append(max(ea, eb))
    return tuple(reversed(out))


# ---------------------------------------------------------------------------
# construction

def zeros(shape, dtype=FLOAT32) -> Tensor:
    _check_extents(shape)
    return Tensor.wrap(np.zeros(tuple(shape), dtype=dtype))


def full(shape, value, dtype=FLOAT32) -> Tensor:
    _check_extents(shape)
    return Tensor.wrap(np.full(tuple(shape), value, dtype=dtype))


def scalar(value, dtype=FLOAT32) -> Tensor:
    return Tensor.wrap(np.asarray(value, dtype=dtype))


def random_normal(shape, rng: np.random.Generator, std=1.0, dtype=FLOAT32) -> Tensor:
    _check_extents(shape)
    out = rng.standard_normal(tuple(shape), dtype=dtype)
    if std != 1.0:
        out *= dtype(std) if callable(dtype) else std
    return Tensor.wrap(out)


# ---------------------------------------------------------------------------
# elementwise / broadcasting

_BINOPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def broadcast_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op not in _BINOPS:
        raise ValueError(f"unknown binary op {op!r}")
    _check_same_dtype(a, b)
    broadcast_shapes(a.shape, b.shape)
    return Tensor.wrap(_BINOPS[op](a.data, b.data))


def add(a, b):
    return broadcast_binary(a, b, "add")


def sub(a, b):
    return broadcast_binary(a, b, "sub")


def mul(a, b):
    return broadcast_binary(a, b, "mul")


def div(a, b):
    return broadcast_binary(a, b, "div")


def maximum(a, b):
    return broadcast_binary(a, b, "max")


def neg(a: Tensor) -> Tensor:
    return Tensor.wrap(-a.data)


def relu(a: Tensor) -> Tensor:
    return Tensor.wrap(np.maximum(a.data, 0))


def sigmoid(a: Tensor) -> Tensor:
    return Tensor.wrap(sigmoid_array(a.data))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # exp is only ever taken of -|x|, which cannot overflow; outputs stay
    # strictly inside (0, 1) until exp(-|x|) itself underflows.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def exp(a: Tensor) -> Tensor:
    return Tensor.wrap(np.exp(a.data))


def log(a: Tensor) -> Tensor:
    return Tensor.wrap(np.log(a.data))


def sqrt(a: Tensor) -> Tensor:
    return Tensor.wrap(np.sqrt(a.data))


# ---------------------------------------------------------------------------
# linear algebra / reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return Tensor.wrap(a.data @ b.data)


def _check_axes(a: Tensor, axes):
    axes = tuple(sorted(int(ax) for ax in axes))
    for ax in axes:
        if ax < 0 or ax >= a.rank:
            raise ShapeError(f"axis {ax} out of range for rank {a.rank}")
    return axes


def reduce_mean(a: Tensor, axes, keep_dims=False) -> Tensor:
    axes = _check_axes(a, axes)
    return Tensor.wrap(np.mean(a.data, axis=axes, keepdims=keep_dims))


def reduce_sum(a: Tensor, axes, keep_dims=False) -> Tensor:
    axes = _check_axes(a, axes)
    return Tensor.wrap(np.sum(a.data, axis=axes, keepdims=keep_dims))


def argmax(a: Tensor, axis: int) -> np.ndarray:
    if axis < 0 or axis >= a.rank:
        raise ShapeError(f"axis {axis} out of range for rank {a.rank}")
    return np.argmax(a.data, axis=axis)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(e) for e in shape)
    _check_extents(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.size}) to {shape}")
    return Tensor.wrap(a.data.reshape(shape).copy())


def transpose(a: Tensor, axes=None) -> Tensor:
    return Tensor.wrap(np.transpose(a.data, axes).copy())


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis < 0 or axis >= a.rank:
        raise ShapeError(f"axis {axis} out of range for rank {a.rank}")
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}) invalid for extent {a.shape[axis]}")
    idx = [slice(None)] * a.rank
    idx[axis] = slice(start, stop)
    return Tensor.wrap(a.data[tuple(idx)].copy())


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    first = tensors[0]
    for t in tensors[1:]:
        _check_same_dtype(first, t)
        if t.rank != first.rank:
            raise ShapeError(f"concat rank mismatch: {first.shape} vs {t.shape}")
    return Tensor.wrap(np.concatenate([t.data for t in tensors], axis=axis))
