"""Two-branch attention gate refining a convolutional feature map in place.

The channel branch squeezes the map to per-channel statistics and runs them
through a bottlenecked MLP; the spatial branch compresses channels and grows
the receptive field with dilated convolutions, ending in a one-channel map.
Both emit pre-activation logits; they are combined, squashed through a
sigmoid into a gate in (0, 1), and applied residually:

    refined = x + x * gate

so a zero-logit gate scales features by exactly 1.5 and the block can only
amplify, never erase, its input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Node
from .errors import ShapeError

COMBINE_MODES = ("sum", "prod", "max")


@dataclass
class BamConfig:
    reduction: int = 16
    dilation: int = 4
    combine: str = "sum"
    channel_branch: bool = True
    spatial_branch: bool = True

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {self.reduction}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.combine not in COMBINE_MODES:
            raise ValueError(f"combine must be one of {COMBINE_MODES}, got {self.combine!r}")
        if not (self.channel_branch or self.spatial_branch):
            raise ValueError("at least one attention branch must be enabled")


@dataclass
class ChannelBranchParams:
    fc_reduce: L.LinearParams  # C -> C/r
    fc_expand: L.LinearParams  # C/r -> C
    bn: L.BatchNormParams  # over C


@dataclass
class SpatialBranchParams:
    conv_reduce: L.Conv2dParams  # 1x1, C -> C/r
    conv_ctx1: L.Conv2dParams  # 3x3 dilated, C/r -> C/r
    conv_ctx2: L.Conv2dParams  # 3x3 dilated, C/r -> C/r
    conv_collapse: L.Conv2dParams  # 1x1, C/r -> 1
    bn: L.BatchNormParams  # over 1


@dataclass
class BamParams:
    channels: int
    channel: Optional[ChannelBranchParams]
    spatial: Optional[SpatialBranchParams]


def bam_params(channels, config: BamConfig, *, dtype=np.float32, rng=None,
               init="he") -> BamParams:
    r = config.reduction
    if channels % r != 0:
        raise ShapeError(f"reduction {r} does not divide channel count {channels}")
    mid = channels // r
    channel = None
    if config.channel_branch:
        channel = ChannelBranchParams(
            fc_reduce=L.linear_params(channels, mid, dtype=dtype, rng=rng, init=init),
            fc_expand=L.linear_params(mid, channels, dtype=dtype, rng=rng, init=init),
            bn=L.batch_norm_params(channels, dtype=dtype),
        )
    spatial = None
    if config.spatial_branch:
        d = config.dilation
        spatial = SpatialBranchParams(
            conv_reduce=L.conv2d_params(channels, mid, 1, dtype=dtype, rng=rng, init=init),
            conv_ctx1=L.conv2d_params(mid, mid, 3, padding=d, dilation=d,
                                      dtype=dtype, rng=rng, init=init),
            conv_ctx2=L.conv2d_params(mid, mid, 3, padding=d, dilation=d,
                                      dtype=dtype, rng=rng, init=init),
            conv_collapse=L.conv2d_params(mid, 1, 1, dtype=dtype, rng=rng, init=init),
            bn=L.batch_norm_params(1, dtype=dtype),
        )
    return BamParams(channels, channel, spatial)


def channel_attention(x: Node, p: ChannelBranchParams, mode: str) -> Node:
    """Per-channel gate logits [N,C,1,1] from the spatially pooled input."""
    n, c = x.shape[0], x.shape[1]
    pooled = ad.reshape(L.global_avg_pool(x), (n, c))
    h = L.linear(pooled, p.fc_reduce).relu()
    logits = L.batch_norm(L.linear(h, p.fc_expand), p.bn, mode)
    return ad.reshape(logits, (n, c, 1, 1))


def spatial_attention(x: Node, p: SpatialBranchParams, mode: str) -> Node:
    """Per-position gate logits [N,1,H,W]; dilation keeps H,W unchanged."""
    h = L.conv2d(x, p.conv_reduce).relu()
    h = L.conv2d(h, p.conv_ctx1).relu()
    h = L.conv2d(h, p.conv_ctx2).relu()
    return L.batch_norm(L.conv2d(h, p.conv_collapse), p.bn, mode)


def combine_attention(mc: Node, ms: Node, combine: str) -> Node:
    """Merge branch logits, then squash: gate = sigmoid(op(mc, ms))."""
    if combine == "sum":
        merged = mc + ms
    elif combine == "prod":
        merged = mc * ms
    elif combine == "max":
        merged = ad.maximum(mc, ms)
    else:
        raise ValueError(f"combine must be one of {COMBINE_MODES}, got {combine!r}")
    return merged.sigmoid()


def refine(x: Node, gate: Node) -> Node:
    """x + x * gate; the gate must already match x's shape exactly."""
    if gate.shape != x.shape:
        raise ShapeError(f"gate shape {gate.shape} does not match input {x.shape}")
    return x + x * gate


def bam_forward(x: Node, p: BamParams, config: BamConfig, mode: str
                ) -> Tuple[Node, Node, Optional[Node], Optional[Node]]:
    """Apply the attention block to [N,C,H,W].

    Returns (refined, gate, channel_logits, spatial_logits); a disabled
    branch reports None and the gate is the sigmoid of the remaining branch
    broadcast over the missing axes.
    """
    if x.value.rank != 4:
        raise ShapeError(f"attention expects rank-4 input, got {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"input {x.shape} does not carry {p.channels} channels")
    mc = channel_attention(x, p.channel, mode) if p.channel is not None else None
    ms = spatial_attention(x, p.spatial, mode) if p.spatial is not None else None
    if mc is not None and ms is not None:
        gate = combine_attention(mc, ms, config.combine)
    elif mc is not None:
        gate = ad.broadcast_to(mc.sigmoid(), x.shape)
    else:
        gate = ad.broadcast_to(ms.sigmoid(), x.shape)
    return refine(x, gate), gate, mc, ms
