"""Backbone assembly: residual CNN stacks with optional attention blocks at
the stage junctions (where spatial downsampling happens), inside every block,
or swapped for plain extra blocks.

A model is a tree of Modules.  The base Module is a sequential container;
residual blocks and the attention block override ``forward`` (and the cost
walk ``rows``) where data flow is not a straight line.  Parameter names are
the tree paths, so they are unique, stable, and build-ordered, which the
checkpoint format and the profiler both lean on.
"""
from __future__ import annotations

import dataclasses
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import bam as bam_mod
from . import layers as L
from . import tensor as T
from .autodiff import Node
from .bam import BamConfig
from .errors import DataFormatError, ShapeError
from .tensor import Tensor

ATTENTION_MODES = ("none", "bottleneck", "per_block", "convblock")
BLOCK_TYPES = ("basic", "bottleneck_resblock", "plain")

_INIT_STREAM = 1


def _join(base: str, name: str) -> str:
    return f"{base}.{name}" if base else name


# ---------------------------------------------------------------------------
# module tree

class Module:
    """Sequential container by default; subclasses override forward/rows."""

    def __init__(self):
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self._params: "OrderedDict[str, Node]" = OrderedDict()
        self._buffers: "OrderedDict[str, Node]" = OrderedDict()

    def add(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def add_param(self, name: str, node: Node):
        node.trainable = True
        self._params[name] = node

    def add_buffer(self, name: str, node: Node):
        node.trainable = False
        self._buffers[name] = node

    def state(self, prefix: str = ""):
        """Yield (name, node, is_buffer) in build order."""
        for name, p in self._params.items():
            yield _join(prefix, name), p, False
        for name, b in self._buffers.items():
            yield _join(prefix, name), b, True
        for name, child in self._children.items():
            yield from child.state(_join(prefix, name))

    def forward(self, x: Node, mode: str, attn) -> Node:
        for child in self._children.values():
            x = child.forward(x, mode, attn)
        return x

    def rows(self, name: str, chw):
        """Cost rows (name, params, buffers, macs, elem_ops) and the output shape."""
        rows = []
        for cname, child in self._children.items():
            r, chw = child.rows(_join(name, cname), chw)
            rows.extend(r)
        return rows, chw


class Conv(Module):
    def __init__(self, p: L.Conv2dParams):
        super().__init__()
        self.p = p
        self.add_param("weight", p.weight)
        if p.bias is not None:
            self.add_param("bias", p.bias)

    def forward(self, x, mode, attn):
        return L.conv2d(x, self.p)

    def rows(self, name, chw):
        c, h, w = chw
        c_out, c_in, kh, kw = self.p.weight.shape
        oh = L.conv_out_size(h, kh, self.p.stride, self.p.padding, self.p.dilation)
        ow = L.conv_out_size(w, kw, self.p.stride, self.p.padding, self.p.dilation)
        params = self.p.weight.value.size
        elem = 0
        if self.p.bias is not None:
            params += self.p.bias.value.size
            elem = c_out * oh * ow
        macs = c_out * c_in * kh * kw * oh * ow
        return [(name, params, 0, macs, elem)], (c_out, oh, ow)


class BatchNorm(Module):
    def __init__(self, p: L.BatchNormParams):
        super().__init__()
        self.p = p
        self.add_param("gamma", p.gamma)
        self.add_param("beta", p.beta)
        self.add_buffer("running_mean", p.running_mean)
        self.add_buffer("running_var", p.running_var)

    def forward(self, x, mode, attn):
        return L.batch_norm(x, self.p, mode)

    def rows(self, name, chw):
        c = self.p.gamma.value.size
        elem = 1
        for e in chw:
            elem *= e
        return [(name, 2 * c, 2 * c, 0, elem)], chw


class Dense(Module):
    def __init__(self, p: L.LinearParams):
        super().__init__()
        self.p = p
        self.add_param("weight", p.weight)
        self.add_param("bias", p.bias)

    def forward(self, x, mode, attn):
        return L.linear(x, self.p)

    def rows(self, name, chw):
        n_out, n_in = self.p.weight.shape
        return [(name, n_out * n_in + n_out, 0, n_out * n_in, n_out)], (n_out,)


class Relu(Module):
    def forward(self, x, mode, attn):
        return x.relu()

    def rows(self, name, chw):
        elem = 1
        for e in chw:
            elem *= e
        return [(name, 0, 0, 0, elem)], chw


class MaxPool(Module):
    def __init__(self, kernel, stride, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, mode, attn):
        return L.max_pool2d(x, self.kernel, self.stride, self.padding)

    def rows(self, name, chw):
        c, h, w = chw
        oh = L.conv_out_size(h, self.kernel, self.stride, self.padding, 1)
        ow = L.conv_out_size(w, self.kernel, self.stride, self.padding, 1)
        return [(name, 0, 0, 0, c * h * w)], (c, oh, ow)


class GlobalPool(Module):
    def forward(self, x, mode, attn):
        return L.global_avg_pool(x)

    def rows(self, name, chw):
        c, h, w = chw
        return [(name, 0, 0, 0, c * h * w)], (c, 1, 1)


class Flatten(Module):
    def forward(self, x, mode, attn):
        n = x.shape[0]
        size = 1
        for e in x.shape[1:]:
            size *= e
        return ad.reshape(x, (n, size))

    def rows(self, name, chw):
        size = 1
        for e in chw:
            size *= e
        return [], (size,)


def _conv_bn(parent: Module, tag: str, c_in, c_out, kernel, stride, padding, *, kw):
    parent.add("conv" + tag, Conv(L.conv2d_params(
        c_in, c_out, kernel, stride, padding, bias=False, **kw)))
    parent.add("bn" + tag, BatchNorm(L.batch_norm_params(c_out, dtype=kw["dtype"])))


class _ResidualBlock(Module):
    """Shared residual wiring; subclasses fill in the main path."""

    main: Tuple[str, ...] = ()

    def __init__(self, c_in, c_out, stride, **kw):
        super().__init__()
        self._build_main(c_in, c_out, stride, kw)
        if stride != 1 or c_in != c_out:
            self.add("shortcut_conv", Conv(L.conv2d_params(
                c_in, c_out, 1, stride, 0, bias=False, **kw)))
            self.add("shortcut_bn", BatchNorm(L.batch_norm_params(c_out, dtype=kw["dtype"])))
        self.add("relu_out", Relu())

    def forward(self, x, mode, attn):
        h = x
        for cname in self.main:
            h = self._children[cname].forward(h, mode, attn)
        s = x
        if "shortcut_conv" in self._children:
            s = self._children["shortcut_conv"].forward(s, mode, attn)
            s = self._children["shortcut_bn"].forward(s, mode, attn)
        out = self._children["relu_out"].forward(h + s, mode, attn)
        if "bam" in self._children:
            out = self._children["bam"].forward(out, mode, attn)
        return out

    def rows(self, name, chw):
        rows = []
        cur = chw
        for cname in self.main:
            r, cur = self._children[cname].rows(_join(name, cname), cur)
            rows.extend(r)
        if "shortcut_conv" in self._children:
            r, sc = self._children["shortcut_conv"].rows(_join(name, "shortcut_conv"), chw)
            rows.extend(r)
            r, sc = self._children["shortcut_bn"].rows(_join(name, "shortcut_bn"), sc)
            rows.extend(r)
        elem = 1
        for e in cur:
            elem *= e
        rows.append((_join(name, "add"), 0, 0, 0, elem))
        r, cur = self._children["relu_out"].rows(_join(name, "relu_out"), cur)
        rows.extend(r)
        if "bam" in self._children:
            r, cur = self._children["bam"].rows(_join(name, "bam"), cur)
            rows.extend(r)
        return rows, cur


class BasicBlock(_ResidualBlock):
    """Two 3x3 convs with identity (or projected) shortcut."""

    main = ("conv1", "bn1", "relu1", "conv2", "bn2")

    def _build_main(self, c_in, c_out, stride, kw):
        _conv_bn(self, "1", c_in, c_out, 3, stride, 1, kw=kw)
        self.add("relu1", Relu())
        _conv_bn(self, "2", c_out, c_out, 3, 1, 1, kw=kw)


class BottleneckBlock(_ResidualBlock):
    """1x1 reduce (carries the stride), 3x3, 1x1 expand; mid width = c_out/4."""

    main = ("conv1", "bn1", "relu1", "conv2", "bn2", "relu2", "conv3", "bn3")

    def _build_main(self, c_in, c_out, stride, kw):
        mid = c_out // 4
        _conv_bn(self, "1", c_in, mid, 1, stride, 0, kw=kw)
        self.add("relu1", Relu())
        _conv_bn(self, "2", mid, mid, 3, 1, 1, kw=kw)
        self.add("relu2", Relu())
        _conv_bn(self, "3", mid, c_out, 1, 1, 0, kw=kw)


class PlainBlock(Module):
    """Conv-BN-ReLU with no shortcut; sequential, so the base class suffices."""

    def __init__(self, c_in, c_out, stride, **kw):
        super().__init__()
        _conv_bn(self, "", c_in, c_out, 3, stride, 1, kw=kw)
        self.add("relu", Relu())


_BLOCKS = {"basic": BasicBlock, "bottleneck_resblock": BottleneckBlock, "plain": PlainBlock}


class BamBlock(Module):
    """Adapter registering attention parameters into the module tree."""

    def __init__(self, channels, cfg: BamConfig, *, dtype, rng, init):
        super().__init__()
        self.cfg = cfg
        self.p = bam_mod.bam_params(channels, cfg, dtype=dtype, rng=rng, init=init)
        if self.p.channel is not None:
            ch = self.add("channel", Module())
            ch.add("fc_reduce", Dense(self.p.channel.fc_reduce))
            ch.add("relu", Relu())
            ch.add("fc_expand", Dense(self.p.channel.fc_expand))
            ch.add("bn", BatchNorm(self.p.channel.bn))
        if self.p.spatial is not None:
            sp = self.add("spatial", Module())
            sp.add("conv_reduce", Conv(self.p.spatial.conv_reduce))
            sp.add("relu1", Relu())
            sp.add("conv_ctx1", Conv(self.p.spatial.conv_ctx1))
            sp.add("relu2", Relu())
            sp.add("conv_ctx2", Conv(self.p.spatial.conv_ctx2))
            sp.add("relu3", Relu())
            sp.add("conv_collapse", Conv(self.p.spatial.conv_collapse))
            sp.add("bn", BatchNorm(self.p.spatial.bn))

    def forward(self, x, mode, attn):
        refined, gate, mc, ms = bam_mod.bam_forward(x, self.p, self.cfg, mode)
        if attn is not None:
            attn.append((mc, ms, gate))
        return refined

    def rows(self, name, chw):
        c, h, w = chw
        rows = []
        if self.p.channel is not None:
            rows.append((_join(name, "channel.pool"), 0, 0, 0, c * h * w))
            r, _ = self._children["channel"].rows(_join(name, "channel"), (c,))
            rows.extend(r)
        if self.p.spatial is not None:
            r, _ = self._children["spatial"].rows(_join(name, "spatial"), chw)
            rows.extend(r)
        # combine + sigmoid + multiply + add, one op per output element each
        rows.append((_join(name, "apply"), 0, 0, 0, 4 * c * h * w))
        return rows, chw


# ---------------------------------------------------------------------------
# model specs

@dataclass(frozen=True)
class StageSpec:
    block_type: str
    blocks: int
    channels: int
    stride: int


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stem: str  # "cifar" (3x3/1) or "imagenet" (7x7/2 + max pool)
    stem_channels: int
    stages: Tuple[StageSpec, ...]
    num_classes: int
    input_hw: int
    attention: str = "none"
    bam: BamConfig = field(default_factory=BamConfig)


_R50_STAGES = (
    StageSpec("bottleneck_resblock", 3, 256, 1),
    StageSpec("bottleneck_resblock", 4, 512, 2),
    StageSpec("bottleneck_resblock", 6, 1024, 2),
    StageSpec("bottleneck_resblock", 3, 2048, 2),
)


def spec_library() -> Dict[str, ModelSpec]:
    return {
        "tiny": ModelSpec("tiny", "cifar", 16, (
            StageSpec("basic", 1, 16, 1),
            StageSpec("basic", 1, 32, 2),
            StageSpec("basic", 1, 64, 2),
        ), 10, 32),
        "small": ModelSpec("small", "cifar", 32, (
            StageSpec("basic", 1, 32, 1),
            StageSpec("basic", 1, 64, 2),
            StageSpec("basic", 1, 128, 2),
        ), 10, 32),
        "resnet50_cifar": ModelSpec("resnet50_cifar", "cifar", 64, _R50_STAGES, 100, 32),
        "resnet50_imagenet": ModelSpec("resnet50_imagenet", "imagenet", 64, _R50_STAGES,
                                       1000, 224),
    }


def get_spec(name: str, attention: str = "none", bam: Optional[BamConfig] = None) -> ModelSpec:
    lib = spec_library()
    if name not in lib:
        raise ValueError(f"unknown model spec {name!r}; have {sorted(lib)}")
    spec = lib[name]
    return dataclasses.replace(spec, attention=attention, bam=bam or BamConfig())


def _validate(spec: ModelSpec):
    if spec.attention not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {spec.attention!r}; have {ATTENTION_MODES}")
    if spec.stem not in ("cifar", "imagenet"):
        raise ValueError(f"unknown stem {spec.stem!r}")
    for st in spec.stages:
        if st.block_type not in BLOCK_TYPES:
            raise ValueError(f"unknown block type {st.block_type!r}; have {BLOCK_TYPES}")
        if st.blocks < 1:
            raise ValueError(f"stage needs at least one block, got {st.blocks}")


def _build_root(spec: ModelSpec, *, dtype, rng, init) -> Module:
    _validate(spec)
    kw = dict(dtype=dtype, rng=rng, init=init)
    per_block = spec.attention == "per_block"
    root = Module()
    stem = root.add("stem", Module())
    if spec.stem == "cifar":
        _conv_bn(stem, "", 3, spec.stem_channels, 3, 1, 1, kw=kw)
        stem.add("relu", Relu())
    else:
        _conv_bn(stem, "", 3, spec.stem_channels, 7, 2, 3, kw=kw)
        stem.add("relu", Relu())
        stem.add("pool", MaxPool(3, 2, 1))
    c_in = spec.stem_channels
    last = len(spec.stages)
    for i, st in enumerate(spec.stages, 1):
        stage = root.add(f"stage{i}", Module())
        for b in range(st.blocks):
            block = stage.add(f"block{b}", _BLOCKS[st.block_type](
                c_in, st.channels, st.stride if b == 0 else 1, **kw))
            c_in = st.channels
            if per_block:
                block.add("bam", BamBlock(st.channels, spec.bam, **kw))
        if i < last:
            if spec.attention == "bottleneck":
                root.add(f"bam{i}", BamBlock(st.channels, spec.bam, **kw))
            elif spec.attention == "convblock":
                root.add(f"extra{i}", _BLOCKS[st.block_type](st.channels, st.channels, 1, **kw))
    root.add("pool", GlobalPool())
    root.add("flatten", Flatten())
    root.add("fc", Dense(L.linear_params(c_in, spec.num_classes, **kw)))
    return root


class Model:
    """Built module tree plus its flat parameter/buffer registries."""

    def __init__(self, spec: ModelSpec, root: Module):
        self.spec = spec
        self.root = root
        self.params: "OrderedDict[str, Node]" = OrderedDict()
        self.buffers: "OrderedDict[str, Node]" = OrderedDict()
        n = 0
        for name, node, is_buffer in root.state():
            (self.buffers if is_buffer else self.params)[name] = node
            n += 1
        if n != len(self.params) + len(self.buffers):
            raise ShapeError("duplicate parameter name in module tree")

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def forward(self, x, mode: str = "train", collect_attention: bool = False):
        if isinstance(x, Tensor):
            x = Node(x)
        attn = [] if collect_attention else None
        logits = self.root.forward(x, mode, attn)
        return (logits, attn) if collect_attention else logits

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def attention_blocks(self) -> List[Tuple[str, BamBlock]]:
        """(name, block) pairs in forward order."""
        found = []

        def walk(prefix, module):
            if isinstance(module, BamBlock):
                found.append((prefix, module))
                return
            for cname, child in module._children.items():
                walk(_join(prefix, cname), child)

        walk("", self.root)
        return found


def build(spec: ModelSpec, *, seed: int = 0, dtype=np.float32, init: str = "he") -> Model:
    rng = T.make_rng([seed, _INIT_STREAM])
    return Model(spec, _build_root(spec, dtype=dtype, rng=rng, init=init))


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"BAMCKPT1"


def _entries(model: Model, extras):
    for name, node in model.params.items():
        yield name, node.value.data
    for name, node in model.buffers.items():
        yield name, node.value.data
    if extras:
        for name, arr in extras.items():
            yield name, np.asarray(arr)


def checkpoint_save(model: Model, path, extras: Optional[Dict[str, np.ndarray]] = None):
    """Write every parameter, buffer, and extra array as 32-bit floats."""
    entries = list(_entries(model, extras))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def checkpoint_load(model: Model, path) -> Dict[str, np.ndarray]:
    """Restore the model in place; unknown entries come back as extras."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic in {path}")
    off = 8

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise DataFormatError(f"truncated checkpoint {path}")
        out = data[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    registry = dict(model.params)
    registry.update(model.buffers)
    dtype = model.dtype
    extras: Dict[str, np.ndarray] = {}
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = 1
        for e in shape:
            size *= e
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        node = registry.get(name)
        if node is None:
            extras[name] = arr.copy()
            continue
        if tuple(shape) != node.value.shape:
            raise ShapeError(
                f"checkpoint entry {name!r} has shape {tuple(shape)} "
                f"but the model expects {node.value.shape}")
        node.value = Tensor.wrap(arr.astype(dtype))
        seen.add(name)
    if off != len(data):
        raise DataFormatError(f"trailing bytes after last checkpoint entry in {path}")
    missing = [n for n in registry if n not in seen]
    if missing:
        raise ShapeError(f"checkpoint is missing parameter {missing[0]!r} "
                         f"({len(missing)} missing in total)")
    return extras
