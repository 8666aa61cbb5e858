"""Conv kernel backend selection.

The compiled Cython kernels are used when the extension built; otherwise the
numpy implementation takes over.  ``BAMNET_KERNELS=numpy|ext`` forces a
backend (``ext`` raises if the extension is missing), and ``set_backend``
switches at runtime, which the benchmark uses to compare the two.
"""
import os

import numpy as np

from . import _numpy_impl

_IMPLS = {"numpy": _numpy_impl}
try:
    from . import _convkern

    _IMPLS["ext"] = _convkern
except ImportError:
    _convkern = None

_requested = os.environ.get("BAMNET_KERNELS", "auto")
if _requested == "auto":
    _active = "ext" if "ext" in _IMPLS else "numpy"
else:
    if _requested not in _IMPLS:
        raise ImportError(f"BAMNET_KERNELS={_requested!r} but that backend is unavailable")
    _active = _requested


def backend():
    return _active


def available_backends():
    return tuple(sorted(_IMPLS))


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = name


def im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    """Unroll padded input (N,C,Hp,Wp) into columns (N, C*kh*kw, out_h*out_w)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c * kh * kw, out_h * out_w), dtype=xp.dtype)
    _IMPLS[_active].im2col(xp, cols, kh, kw, stride, dilation, out_h, out_w)
    return cols


def col2im(cols, xp_shape, kh, kw, stride, dilation, out_h, out_w):
    """Scatter-add columns back to a zeroed padded-input buffer (transpose of im2col)."""
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    _IMPLS[_active].col2im(cols, xp, kh, kw, stride, dilation, out_h, out_w)
    return xp
