"""Parametric layers: 2-D convolution (with dilation), batch norm, linear,
pooling.

Convolution is cross-correlation (no kernel flip) over a zero-padded input,
run as im2col + matrix product with a hand-written backward; its gather and
scatter inner loops come from the selected kernel backend.  Batch norm is
composed from differentiable primitives so its backward flows through the
batch mean and variance with no separate chain-rule code to get wrong.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels, autodiff as ad
from . import tensor as T
from .autodiff import Node
from .errors import ShapeError
from .tensor import Tensor


def conv_out_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def he_normal(shape, fan_in, rng, dtype) -> Tensor:
    return T.random_normal(shape, rng, std=math.sqrt(2.0 / fan_in), dtype=dtype)


def _weight(shape, fan_in, rng, dtype, init):
    if init == "zero":
        return T.zeros(shape, dtype)
    if init == "he":
        return he_normal(shape, fan_in, rng, dtype)
    raise ValueError(f"unknown init {init!r}")


# ---------------------------------------------------------------------------
# parameter records

@dataclass
class Conv2dParams:
    weight: Node  # [C_out, C_in, kH, kW]
    bias: Optional[Node]  # [C_out]
    stride: int
    padding: int
    dilation: int


def conv2d_params(c_in, c_out, kernel, stride=1, padding=0, dilation=1, *,
                  bias=True, dtype=np.float32, rng=None, init="he") -> Conv2dParams:
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride/dilation must be >= 1 and padding >= 0")
    w = _weight((c_out, c_in, kernel, kernel), c_in * kernel * kernel, rng, dtype, init)
    b = Node(T.zeros((c_out,), dtype), trainable=True) if bias else None
    return Conv2dParams(Node(w, trainable=True), b, stride, padding, dilation)


@dataclass
class BatchNormParams:
    gamma: Node  # [C]
    beta: Node  # [C]
    running_mean: Node  # [C], buffer
    running_var: Node  # [C], buffer
    momentum: float
    eps: float


def batch_norm_params(channels, *, dtype=np.float32, momentum=0.1, eps=1e-5) -> BatchNormParams:
    return BatchNormParams(
        gamma=Node(T.full((channels,), 1.0, dtype), trainable=True),
        beta=Node(T.zeros((channels,), dtype), trainable=True),
        running_mean=Node(T.zeros((channels,), dtype)),
        running_var=Node(T.full((channels,), 1.0, dtype)),
        momentum=momentum,
        eps=eps,
    )


@dataclass
class LinearParams:
    weight: Node  # [out, in]
    bias: Node  # [out]


def linear_params(n_in, n_out, *, dtype=np.float32, rng=None, init="he") -> LinearParams:
    w = _weight((n_out, n_in), n_in, rng, dtype, init)
    return LinearParams(Node(w, trainable=True), Node(T.zeros((n_out,), dtype), trainable=True))


# ---------------------------------------------------------------------------
# ops

def conv2d(x: Node, p: Conv2dParams) -> Node:
    """Cross-correlate [N,C_in,H,W] with p.weight -> [N,C_out,H',W']."""
    if x.value.rank != 4:
        raise ShapeError(f"conv2d expects rank-4 input, got {x.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = p.weight.shape
    if c_in != wc_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {p.weight.shape}")
    if x.dtype != p.weight.dtype:
        raise TypeError(f"elem_type mismatch: {x.dtype} vs {p.weight.dtype}")
    stride, pad, dil = p.stride, p.padding, p.dilation
    out_h = conv_out_size(h, kh, stride, pad, dil)
    out_w = conv_out_size(w, kw, stride, pad, dil)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d output would be {out_h}x{out_w} for input {x.shape}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {pad}, dilation {dil}")

    xd = x.value.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _kernels.im2col(xd, kh, kw, stride, dil, out_h, out_w)
    w2 = p.weight.value.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, cols).reshape(n, c_out, out_h, out_w)
    if p.bias is not None:
        out += p.bias.value.data[None, :, None, None]
    xp_shape = xd.shape

    def rule(g):
        g3 = g.reshape(n, c_out, out_h * out_w)
        dw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(p.weight.shape)
        dcols = np.matmul(w2.T, g3)
        dxp = _kernels.col2im(dcols, xp_shape, kh, kw, stride, dil, out_h, out_w)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        dx = np.ascontiguousarray(dx)
        if p.bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return ad.make_node(Tensor.wrap(out), parents, rule)


def batch_norm(x: Node, p: BatchNormParams, mode: str) -> Node:
    """Per-channel normalization over batch and spatial axes (axis 1 = channels).

    Train mode normalizes with biased batch statistics and updates the running
    stats in place; eval mode normalizes with the running stats only.
    """
    rank = x.value.rank
    if rank < 2:
        raise ShapeError(f"batch_norm expects rank >= 2, got {x.shape}")
    channels = p.gamma.shape[0]
    if x.shape[1] != channels:
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape} vs {channels} channels")
    axes = (0,) + tuple(range(2, rank))
    bshape = (1, channels) + (1,) * (rank - 2)
    gamma = ad.reshape(p.gamma, bshape)
    beta = ad.reshape(p.beta, bshape)

    if mode == "train":
        mean = x.mean(axes, keep_dims=True)
        centered = x - mean
        var = (centered * centered).mean(axes, keep_dims=True)
        out = centered / (var + p.eps).sqrt() * gamma + beta
        m = p.momentum
        bm = x.value.data.mean(axis=axes)
        bv = x.value.data.var(axis=axes)
        p.running_mean.value = Tensor.wrap((1 - m) * p.running_mean.value.data + m * bm)
        p.running_var.value = Tensor.wrap((1 - m) * p.running_var.value.data + m * bv)
        return out
    if mode == "eval":
        rm = ad.constant(Tensor.wrap(p.running_mean.value.data.reshape(bshape)))
        rv = ad.constant(Tensor.wrap(p.running_var.value.data.reshape(bshape)))
        return (x - rm) / (rv + p.eps).sqrt() * gamma + beta
    raise ValueError(f"unknown mode {mode!r}")


def linear(x: Node, p: LinearParams) -> Node:
    """[N,in] @ weight.T + bias -> [N,out]."""
    return ad.matmul(x, ad.transpose(p.weight)) + p.bias


def global_avg_pool(x: Node) -> Node:
    """Spatial mean per channel: [N,C,H,W] -> [N,C,1,1]."""
    if x.value.rank != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    return x.mean((2, 3), keep_dims=True)


def max_pool2d(x: Node, kernel: int, stride: int, padding: int = 0) -> Node:
    """Max over kernel x kernel windows; padded positions never win the max."""
    if x.value.rank != 4:
        raise ShapeError(f"max_pool2d expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    out_h = conv_out_size(h, kernel, stride, padding, 1)
    out_w = conv_out_size(w, kernel, stride, padding, 1)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"max_pool2d output would be {out_h}x{out_w} for input {x.shape}")
    xd = x.value.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    flat = np.ascontiguousarray(xd.reshape(n * c, 1, *xd.shape[2:]))
    cols = _kernels.im2col(flat, kernel, kernel, stride, 1, out_h, out_w)
    winners = np.argmax(cols, axis=1)
    out = np.take_along_axis(cols, winners[:, None, :], axis=1)[:, 0, :]
    out = out.reshape(n, c, out_h, out_w)
    xp_shape = flat.shape

    def rule(g):
        g2 = g.reshape(n * c, out_h * out_w)
        dcols = np.zeros_like(cols)
        np.put_along_axis(dcols, winners[:, None, :], g2[:, None, :], axis=1)
        dxp = _kernels.col2im(dcols, xp_shape, kernel, kernel, stride, 1, out_h, out_w)
        dxp = dxp.reshape(n, c, *xp_shape[2:])
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (np.ascontiguousarray(dx),)

    return ad.make_node(Tensor.wrap(out), (x,), rule)
