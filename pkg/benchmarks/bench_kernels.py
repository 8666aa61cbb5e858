"""Compare the compiled and numpy unroll/scatter kernels.

Times the convolution forward and backward passes end to end for both
backends on a few representative shapes, and checks that the outputs agree
bit for bit.  Run as ``python3 benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import time

import numpy as np

from bamnet import _kernels
from bamnet import layers as L
from bamnet import tensor as T
from bamnet.autodiff import Node, backward

CASES = [
    # (label, batch, c_in, c_out, hw, kernel, stride, pad, dilation)
    ("stem 3x3", 16, 16, 16, 32, 3, 1, 1, 1),
    ("stage 3x3 s2", 16, 32, 64, 16, 3, 2, 1, 1),
    ("dilated 3x3 d4", 16, 16, 16, 32, 3, 1, 4, 4),
    ("pointwise 1x1", 16, 64, 16, 16, 1, 1, 0, 1),
]


def run_case(label, n, c_in, c_out, hw, k, stride, pad, dil, repeats=5):
    rng = T.make_rng([99, 1])
    x = T.random_normal((n, c_in, hw, hw), rng)
    p = L.conv2d_params(c_in, c_out, k, stride=stride, padding=pad,
                        dilation=dil, dtype=np.float32, rng=rng)
    results = {}
    for backend in _kernels.available_backends():
        _kernels.set_backend(backend)
        best = float("inf")
        for _ in range(repeats):
            xn = Node(x)
            t0 = time.perf_counter()
            out = L.conv2d(xn, p)
            backward(out.sum())
            best = min(best, time.perf_counter() - t0)
        results[backend] = (best, out.value.data.copy(), xn.grad.data.copy())
    times = {b: r[0] for b, r in results.items()}
    if len(results) == 2:
        a, b = (results[k] for k in sorted(results))
        same = np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])
    else:
        same = True
    return times, same


def main():
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)} (active default: {_kernels.backend()})")
    if "ext" not in backends:
        print("compiled extension not built; timing numpy backend only")
    header = f"{'case':16s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}{'equal':>7s}"
    print(header)
    for case in CASES:
        times, same = run_case(*case)
        row = f"{case[0]:16s}"
        for b in backends:
            row += f"{times[b] * 1e3:10.2f}ms"
        if len(backends) == 2:
            row += f"{times['numpy'] / times['ext']:9.2f}x{'yes' if same else 'NO':>7s}"
        print(row)
    _kernels.set_backend(_kernels.available_backends()[-1] if "ext" not in backends else "ext")


if __name__ == "__main__":
    main()
