"""SGD training and evaluation, the ablation grid runner, and attention-map
export.

Determinism contract: every random draw comes from a named Philox stream
derived from the run seed (model init, per-epoch shuffling/augmentation,
synthetic data), so identical configs produce bit-identical checkpoints, and
resuming from an epoch checkpoint replays the exact remaining stream.
"""
from __future__ import annotations

import json
import math
import os
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import data as D
from . import models as M
from . import profiler as P
from . import tensor as T
from .autodiff import Node
from .bam import BamConfig
from .errors import DataFormatError, NumericError, UsageError
from .tensor import Tensor

# stream tags for seed derivation (models.build burns tag 1 for init)
_SHUFFLE_STREAM = 2
_SYNTH_TRAIN_STREAM = 30
_SYNTH_TEST_STREAM = 31

SCHEDULES = ("step", "cosine", "constant")
SYNTH_TRAIN_SIZE = 2000
SYNTH_TEST_SIZE = 500


@dataclass
class TrainConfig:
    model: str = "tiny"
    attention: str = "none"
    bam: BamConfig = field(default_factory=BamConfig)
    dataset: str = "synthetic"
    data_dir: str = "."
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "step"
    seed: int = 0
    limit_train: Optional[int] = None
    limit_test: Optional[int] = None
    out_dir: str = "runs"
    run_name: Optional[str] = None
    checkpoint: Optional[str] = None

    def validate(self):
        if self.lr <= 0:
            raise UsageError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise UsageError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise UsageError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def name(self) -> str:
        if self.run_name:
            return self.run_name
        return f"{self.model}_{self.attention}_{self.dataset}_seed{self.seed}"


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean softmax cross-entropy; the row-max shift is detached so the
    gradient is exactly (softmax - onehot)/N."""
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    shift = ad.constant(Tensor.wrap(logits.value.data.max(axis=1, keepdims=True).copy()))
    z = logits - shift
    log_norm = ad.reduce_sum(z.exp(), axes=(1,), keep_dims=True).log()
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    picked = ad.reduce_sum(z * ad.constant(Tensor.wrap(onehot)), axes=(1,), keep_dims=True)
    return (log_norm - picked).mean()


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
    drops = sum(1 for m in (cfg.epochs // 2, (cfg.epochs * 3) // 4) if epoch >= m)
    return cfg.lr * 0.1 ** drops


@dataclass
class SgdState:
    velocities: "OrderedDict[str, np.ndarray]"
    lr: float


def sgd_state(model: M.Model, cfg: TrainConfig) -> SgdState:
    v = OrderedDict((name, np.zeros(p.value.shape, p.value.dtype))
                    for name, p in model.params.items())
    return SgdState(v, cfg.lr)


def sgd_step(model: M.Model, batch: D.ImageBatch, state: SgdState, cfg: TrainConfig,
             batch_index: Optional[int] = None) -> Tuple[float, int]:
    """One update; returns (loss, number of correct top-1 predictions)."""
    model.zero_grad()
    logits = model.forward(batch.images, "train")
    loss = cross_entropy(logits, batch.labels)
    loss_val = float(loss.value.data)
    if not math.isfinite(loss_val):
        raise NumericError(
            f"non-finite loss {loss_val} at batch {batch_index}: "
            f"max |logit| = {float(np.abs(logits.value.data).max())}")
    ad.backward(loss)
    correct = int((logits.value.data.argmax(axis=1) == batch.labels).sum())
    mom, wd, lr = cfg.momentum, cfg.weight_decay, state.lr
    for name, p in model.params.items():
        grad = p.grad.data if p.grad is not None else 0.0
        v = state.velocities[name]
        v *= mom
        v += grad
        if wd:
            v += wd * p.value.data
        p.value = Tensor.wrap(p.value.data - lr * v)
    return loss_val, correct


def evaluate(model: M.Model, batch_iter: Iterable[D.ImageBatch]) -> float:
    """Top-1 error percent over a batch stream, in eval mode."""
    correct = total = 0
    with ad.no_grad():
        for batch in batch_iter:
            logits = model.forward(batch.images, "eval")
            correct += int((logits.value.data.argmax(axis=1) == batch.labels).sum())
            total += len(batch.labels)
    if total == 0:
        raise ValueError("evaluate on an empty split")
    return 100.0 * (1 - correct / total)


# ---------------------------------------------------------------------------
# data plumbing

def load_data(cfg: TrainConfig):
    """(train records, test records, mean, std) for the configured dataset."""
    if cfg.dataset == "synthetic":
        train = D.synthetic_records(SYNTH_TRAIN_SIZE, [cfg.seed, _SYNTH_TRAIN_STREAM])
        test = D.synthetic_records(SYNTH_TEST_SIZE, [cfg.seed, _SYNTH_TEST_STREAM])
        mean, std = D.compute_norm_stats(train)
    else:
        train = D.load_split(cfg.data_dir, cfg.dataset, "train")
        test = D.load_split(cfg.data_dir, cfg.dataset, "test")
        mean, std = D.norm_stats(cfg.data_dir, cfg.dataset)
    if cfg.limit_train:
        train = D.take(train, cfg.limit_train)
    if cfg.limit_test:
        test = D.take(test, cfg.limit_test)
    return train, test, mean, std


def build_model(cfg: TrainConfig) -> M.Model:
    spec = M.get_spec(cfg.model, cfg.attention, cfg.bam)
    if cfg.dataset != "synthetic":
        classes = D.meta(cfg.dataset).num_classes
        if classes > spec.num_classes:
            raise UsageError(f"{cfg.dataset} has {classes} classes but model "
                             f"{cfg.model!r} only emits {spec.num_classes}")
    return M.build(spec, seed=cfg.seed)


def train_batches(cfg: TrainConfig, recs, mean, std, epoch: int):
    return D.batches(recs, cfg.batch_size, [cfg.seed, _SHUFFLE_STREAM, epoch],
                     mean=mean, std=std, augment=True)


def eval_batches(cfg: TrainConfig, recs, mean, std):
    return D.batches(recs, cfg.batch_size, None, mean=mean, std=std)


# ---------------------------------------------------------------------------
# training drivers

def train_steps(model: M.Model, state: SgdState, cfg: TrainConfig, recs, mean, std,
                max_steps: int, stop_train_error: Optional[float] = None,
                window: int = 25) -> Dict[str, object]:
    """Step-budgeted training (no logging or checkpoints).  Stops early once
    the trailing-window train error drops below stop_train_error percent."""
    losses: List[float] = []
    recent: deque = deque(maxlen=window)
    steps = 0
    epoch = 0
    while steps < max_steps:
        state.lr = cfg.lr  # step budget is too short for a schedule
        for bi, batch in enumerate(train_batches(cfg, recs, mean, std, epoch)):
            loss, correct = sgd_step(model, batch, state, cfg, batch_index=bi)
            losses.append(loss)
            recent.append((correct, len(batch.labels)))
            steps += 1
            if stop_train_error is not None and len(recent) == window:
                got = sum(c for c, _ in recent)
                seen = sum(n for _, n in recent)
                if 100.0 * (1 - got / seen) < stop_train_error:
                    return {"steps": steps, "losses": losses, "stopped_early": True,
                            "window_error": 100.0 * (1 - got / seen)}
            if steps >= max_steps:
                break
        epoch += 1
    got = sum(c for c, _ in recent)
    seen = max(1, sum(n for _, n in recent))
    return {"steps": steps, "losses": losses, "stopped_early": False,
            "window_error": 100.0 * (1 - got / seen)}


def append_run_record(path, record: dict):
    line = json.dumps(record, sort_keys=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def _velocity_extras(state: SgdState) -> Dict[str, np.ndarray]:
    extras = {f"velocity.{name}": v for name, v in state.velocities.items()}
    return extras


def run_training(cfg: TrainConfig, stop_after: Optional[int] = None) -> List[dict]:
    """Epoch-driven training with per-epoch RunRecord logging and resumable
    checkpoints.  Returns the list of per-epoch records.

    stop_after interrupts the run once that many epochs are complete without
    touching the schedule, so a later resume from the checkpoint replays the
    remaining epochs bit-identically to an uninterrupted run.
    """
    cfg.validate()
    train, test, mean, std = load_data(cfg)
    model = build_model(cfg)
    state = sgd_state(model, cfg)
    start_epoch = 0
    if cfg.checkpoint:
        extras = M.checkpoint_load(model, cfg.checkpoint)
        for name in state.velocities:
            key = f"velocity.{name}"
            if key in extras:
                state.velocities[name] = extras[key].astype(model.dtype)
        start_epoch = int(extras.get("meta.epoch", np.zeros(1))[0])

    report = P.cost_report(M.get_spec(cfg.model, cfg.attention, cfg.bam))
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, cfg.name() + ".log")
    ckpt_path = os.path.join(cfg.out_dir, cfg.name() + ".ckpt")
    config_snapshot = {
        "model": cfg.model, "attention": cfg.attention, "dataset": cfg.dataset,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
        "schedule": cfg.schedule, "seed": cfg.seed,
        "reduction": cfg.bam.reduction, "dilation": cfg.bam.dilation,
        "combine": cfg.bam.combine, "channel_branch": cfg.bam.channel_branch,
        "spatial_branch": cfg.bam.spatial_branch,
    }

    records = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        state.lr = lr_at(cfg, epoch)
        loss_sum = 0.0
        correct = total = 0
        for bi, batch in enumerate(train_batches(cfg, train, mean, std, epoch)):
            loss, c = sgd_step(model, batch, state, cfg, batch_index=bi)
            loss_sum += loss * len(batch.labels)
            correct += c
            total += len(batch.labels)
        test_error = evaluate(model, eval_batches(cfg, test, mean, std))
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / total,
            "train_error": 100.0 * (1 - correct / total),
            "test_error": test_error,
            "wall_time": time.time() - t0,
            "params": report.total_params,
            "macs": report.total_macs,
            "config": config_snapshot,
        }
        append_run_record(log_path, record)
        extras = _velocity_extras(state)
        extras["meta.epoch"] = np.array([epoch + 1], np.float32)
        M.checkpoint_save(model, ckpt_path, extras=extras)
        records.append(record)
        if stop_after is not None and epoch + 1 >= stop_after:
            break
    return records


# ---------------------------------------------------------------------------
# ablation grid

def default_ablation_axes() -> List[Tuple[str, List[Tuple[str, TrainConfig]]]]:
    """The studied grid: dilation sweep, reduction sweep, branch/combine
    variants, and block-substitution, 17 cells on the small backbone."""
    base = TrainConfig(model="small", attention="bottleneck", dataset="synthetic",
                       batch_size=8, lr=0.05, weight_decay=1e-4, schedule="constant")
    axes: List[Tuple[str, List[Tuple[str, TrainConfig]]]] = []
    axes.append(("dilation", [
        (f"d={d}", replace(base, bam=BamConfig(dilation=d))) for d in (1, 2, 4, 6)]))
    axes.append(("reduction", [
        (f"r={r}", replace(base, bam=BamConfig(reduction=r))) for r in (4, 8, 16, 32)]))
    axes.append(("branch", [
        ("base", replace(base, attention="none")),
        ("channel", replace(base, bam=BamConfig(spatial_branch=False))),
        ("spatial", replace(base, bam=BamConfig(channel_branch=False))),
        ("max", replace(base, bam=BamConfig(combine="max"))),
        ("prod", replace(base, bam=BamConfig(combine="prod"))),
        ("sum", replace(base, bam=BamConfig(combine="sum"))),
    ]))
    axes.append(("block", [
        ("base", replace(base, attention="none")),
        ("extra_block", replace(base, attention="convblock")),
        ("attention", replace(base, attention="bottleneck")),
    ]))
    return axes


@dataclass
class AblationCell:
    axis: str
    value: str
    params: Optional[int]
    error: Optional[float]
    failure: Optional[str] = None


def ablation_grid(axes=None, steps: int = 200, seed: int = 0) -> List[AblationCell]:
    """Run every cell for a fixed step budget on shared synthetic data; a
    failing cell is recorded and the grid continues."""
    if axes is None:
        axes = default_ablation_axes()
    if not axes:
        raise UsageError("ablation needs at least one axis")
    cells = []
    for axis, entries in axes:
        for value, cfg in entries:
            cfg = replace(cfg, seed=seed)
            try:
                spec = M.get_spec(cfg.model, cfg.attention, cfg.bam)
                params = P.count_params(spec).total_params
                train, test, mean, std = load_data(cfg)
                model = M.build(spec, seed=cfg.seed)
                state = sgd_state(model, cfg)
                train_steps(model, state, cfg, train, mean, std, steps)
                err = evaluate(model, eval_batches(cfg, test, mean, std))
                cells.append(AblationCell(axis, value, params, err))
            except Exception as e:  # keep the grid alive, report the cell
                cells.append(AblationCell(axis, value, None, None,
                                          failure=f"{type(e).__name__}: {e}"))
    return cells


def format_ablation_table(cells: List[AblationCell]) -> str:
    rows = [("axis", "value", "params", "error")]
    for c in cells:
        rows.append((c.axis, c.value,
                     "-" if c.params is None else str(c.params),
                     c.failure if c.failure else f"{c.error:.2f}%"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    out = []
    for r in rows:
        out.append("  ".join(r[i].ljust(widths[i]) if i < 2 else r[i].rjust(widths[i])
                             for i in range(4)))
    return "\n".join(out)


# ---------------------------------------------------------------------------
# attention export

def write_pgm(path, img: np.ndarray):
    """8-bit binary PGM (P5, maxval 255)."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM wants uint8 [H,W], got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise DataFormatError(f"not an 8-bit binary PGM: {path}")
    w, h = (int(t) for t in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    if pix.size != w * h:
        raise DataFormatError(f"PGM pixel payload does not match header: {path}")
    return pix.reshape(h, w)


def to_gray(map2d: np.ndarray) -> np.ndarray:
    """Scale [0,1] to [0,255] with round-half-up."""
    return np.clip(np.floor(map2d * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_attention(model: M.Model, batch: D.ImageBatch, out_dir) -> List[str]:
    """Write, per image and attention instance, the channel-mean of the gate
    and the sigmoid of the spatial logits as PGM files."""
    blocks = model.attention_blocks()
    if not blocks:
        raise UsageError(f"model {model.spec.name!r} has no attention blocks to export")
    os.makedirs(out_dir, exist_ok=True)
    with ad.no_grad():
        _, attn = model.forward(batch.images, "eval", collect_attention=True)
    paths = []
    for (name, _), (mc, ms, gate) in zip(blocks, attn):
        gate_mean = gate.value.data.mean(axis=1)  # [N,H,W]
        spatial = None
        if ms is not None:
            spatial = T.sigmoid_array(ms.value.data)[:, 0]
        for i in range(gate_mean.shape[0]):
            p = os.path.join(out_dir, f"img{i}_{name}_gate.pgm")
            write_pgm(p, to_gray(gate_mean[i]))
            paths.append(p)
            if spatial is not None:
                p = os.path.join(out_dir, f"img{i}_{name}_spatial.pgm")
                write_pgm(p, to_gray(spatial[i]))
                paths.append(p)
    return paths
