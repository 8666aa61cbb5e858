"""Finite-difference verification cases for every layer type and the full
attention block, shared by the CLI subcommand and the test suite.

All cases run in double precision on small tensors; each returns the max
relative error between the analytic gradient and central differences.
"""
from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad
from . import bam as bam_mod
from . import layers as L
from . import tensor as T
from . import train as TR
from .autodiff import Node
from .tensor import Tensor

F64 = np.float64

Case = Tuple[str, Callable[[Node], Node], Tensor]


def suite(seed: int = 0) -> List[Case]:
    rng = T.make_rng([seed, 7])

    def t(shape):
        return T.random_normal(shape, rng, dtype=F64)

    cases: List[Case] = []

    conv = L.conv2d_params(3, 4, 3, stride=1, padding=1, dilation=1, dtype=F64, rng=rng)
    cases.append(("conv2d.input", lambda x: L.conv2d(x, conv).sum(), t((2, 3, 6, 6))))
    x_fixed = t((2, 3, 6, 6))
    cases.append(("conv2d.weight",
                  lambda w: L.conv2d(Node(x_fixed),
                                     L.Conv2dParams(w, conv.bias, 1, 1, 1)).sum(),
                  conv.weight.value))
    cases.append(("conv2d.bias",
                  lambda b: L.conv2d(Node(x_fixed),
                                     L.Conv2dParams(conv.weight, b, 1, 1, 1)).sum(),
                  conv.bias.value))
    conv_s = L.conv2d_params(2, 3, 3, stride=2, padding=1, dtype=F64, rng=rng)
    cases.append(("conv2d.stride2", lambda x: L.conv2d(x, conv_s).sum(), t((2, 2, 7, 7))))
    for d in (2, 4):
        cp = L.conv2d_params(2, 2, 3, padding=d, dilation=d, dtype=F64, rng=rng)
        cases.append((f"conv2d.dilation{d}",
                      lambda x, cp=cp: L.conv2d(x, cp).sum(), t((1, 2, 9, 9))))

    def bn_case(x):
        p = L.batch_norm_params(3, dtype=F64)
        return L.batch_norm(x, p, "train").sum()

    cases.append(("batch_norm.input", bn_case, t((4, 3, 5, 5))))
    bn_x = t((4, 3, 5, 5))

    def bn_gamma(g):
        p = L.batch_norm_params(3, dtype=F64)
        q = L.BatchNormParams(g, p.beta, p.running_mean, p.running_var,
                              p.momentum, p.eps)
        return L.batch_norm(Node(bn_x), q, "train").sum()

    cases.append(("batch_norm.gamma", bn_gamma, T.full((3,), 0.7, F64)))
    bn_eval = L.batch_norm_params(3, dtype=F64)
    bn_eval.running_mean.value = t((3,))
    bn_eval.running_var.value = Tensor(np.abs(t((3,)).data) + 0.5)
    cases.append(("batch_norm.eval", lambda x: L.batch_norm(x, bn_eval, "eval").sum(),
                  t((2, 3, 4, 4))))

    lin = L.linear_params(5, 4, dtype=F64, rng=rng)
    cases.append(("linear.input", lambda x: L.linear(x, lin).sum(), t((3, 5))))
    lin_x = t((3, 5))
    cases.append(("linear.weight",
                  lambda w: L.linear(Node(lin_x), L.LinearParams(w, lin.bias)).sum(),
                  lin.weight.value))

    cases.append(("global_avg_pool", lambda x: L.global_avg_pool(x).sum(), t((2, 3, 5, 5))))
    cases.append(("max_pool2d", lambda x: L.max_pool2d(x, 3, 2, 1).sum(), t((2, 2, 7, 7))))
    cases.append(("relu", lambda x: x.relu().sum(), t((4, 6))))
    cases.append(("sigmoid", lambda x: x.sigmoid().sum(), t((4, 6))))

    label_x = t((4, 6))
    labels = np.array([0, 2, 5, 1])
    cases.append(("cross_entropy", lambda x: TR.cross_entropy(x, labels), label_x))

    for tag, kw in [("combine_sum", dict(combine="sum")),
                    ("combine_prod", dict(combine="prod")),
                    ("combine_max", dict(combine="max")),
                    ("channel_only", dict(spatial_branch=False)),
                    ("spatial_only", dict(channel_branch=False))]:
        cfg = bam_mod.BamConfig(reduction=4, dilation=2, **kw)
        p = bam_mod.bam_params(8, cfg, dtype=F64, rng=rng)
        cases.append((f"bam.{tag}.input",
                      lambda x, p=p, cfg=cfg: bam_mod.bam_forward(x, p, cfg, "train")[0].sum(),
                      t((2, 8, 5, 5))))
    cfg = bam_mod.BamConfig(reduction=4, dilation=2)
    p = bam_mod.bam_params(8, cfg, dtype=F64, rng=rng)
    bam_x = t((2, 8, 5, 5))

    def bam_ctx_weight(w):
        q = bam_mod.BamParams(8, p.channel, bam_mod.SpatialBranchParams(
            p.spatial.conv_reduce, L.Conv2dParams(w, p.spatial.conv_ctx1.bias, 1, 2, 2),
            p.spatial.conv_ctx2, p.spatial.conv_collapse, p.spatial.bn))
        return bam_mod.bam_forward(Node(bam_x), q, cfg, "train")[0].sum()

    cases.append(("bam.conv_ctx1.weight", bam_ctx_weight, p.spatial.conv_ctx1.weight.value))

    def bam_mlp_weight(w):
        q = bam_mod.BamParams(8, bam_mod.ChannelBranchParams(
            L.LinearParams(w, p.channel.fc_reduce.bias), p.channel.fc_expand,
            p.channel.bn), p.spatial)
        return bam_mod.bam_forward(Node(bam_x), q, cfg, "train")[0].sum()

    cases.append(("bam.fc_reduce.weight", bam_mlp_weight, p.channel.fc_reduce.weight.value))
    return cases


def run_suite(eps: float = 1e-5, seed: int = 0) -> List[Tuple[str, float]]:
    return [(name, ad.grad_check(f, x, eps=eps)) for name, f, x in suite(seed)]
