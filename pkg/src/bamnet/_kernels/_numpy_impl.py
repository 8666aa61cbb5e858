"""Pure-numpy fallback for the conv gather/scatter kernels.

im2col builds a strided view over the padded input and materializes it with a
reshape; col2im accumulates with one slice-add per kernel tap.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, cols, kh, kw, stride, dilation, out_h, out_w):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
    )
    cols[...] = view.reshape(n, c * kh * kw, out_h * out_w)


def col2im(cols, xp, kh, kw, stride, dilation, out_h, out_w):
    n, c = xp.shape[:2]
    cols6 = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        ys = slice(i * dilation, i * dilation + stride * (out_h - 1) + 1, stride)
        for j in range(kw):
            xs = slice(j * dilation, j * dilation + stride * (out_w - 1) + 1, stride)
            xp[:, :, ys, xs] += cols6[:, :, i, j]
