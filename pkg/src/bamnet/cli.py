"""Command-line entry point.

Subcommands: train, eval, profile, gradcheck, ablate, export-attention.
Exit codes: 0 success, 2 usage error, 3 data-format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from . import data as D
from . import models as M
from . import profiler as P
from . import train as TR
from .bam import BamConfig, COMBINE_MODES
from .errors import DataFormatError, NumericError, UsageError

_BAM_CHOICES = {"off": "none", "bottleneck": "bottleneck",
                "per-block": "per_block", "convblock": "convblock"}


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="tiny", choices=sorted(M.spec_library()))
    p.add_argument("--bam", default="off", choices=sorted(_BAM_CHOICES))
    p.add_argument("--dilation", type=int, default=4)
    p.add_argument("--reduction", type=int, default=16)
    p.add_argument("--combine", default="sum", choices=COMBINE_MODES)
    p.add_argument("--channel-branch", default="on", choices=("on", "off"))
    p.add_argument("--spatial-branch", default="on", choices=("on", "off"))


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", default=".")
    p.add_argument("--dataset", default="synthetic",
                   choices=("cifar10", "cifar100", "synthetic"))


def _bam_config(args) -> BamConfig:
    return BamConfig(reduction=args.reduction, dilation=args.dilation,
                     combine=args.combine,
                     channel_branch=args.channel_branch == "on",
                     spatial_branch=args.spatial_branch == "on")


def _train_config(args) -> TR.TrainConfig:
    # eval and export-attention omit the optimizer flags; fall back to the
    # TrainConfig defaults for anything the subparser does not define.
    base = TR.TrainConfig()

    def pick(name):
        return getattr(args, name, getattr(base, name))

    return TR.TrainConfig(
        model=args.model, attention=_BAM_CHOICES[args.bam], bam=_bam_config(args),
        dataset=args.dataset, data_dir=args.data_dir, epochs=pick("epochs"),
        batch_size=pick("batch_size"), lr=pick("lr"), momentum=pick("momentum"),
        weight_decay=pick("weight_decay"), schedule=pick("schedule"),
        seed=args.seed, limit_train=pick("limit_train"),
        limit_test=pick("limit_test"),
        out_dir=getattr(args, "out", base.out_dir),
        run_name=pick("run_name"), checkpoint=pick("checkpoint"))


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="bamnet",
                                   description="train and inspect small "
                                               "attention-gated convnets")
    sub = root.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train", help="train a model and append run records")
    _add_model_args(pt)
    _add_data_args(pt)
    pt.add_argument("--epochs", type=int, default=10)
    pt.add_argument("--batch-size", type=int, default=128)
    pt.add_argument("--lr", type=float, default=0.1)
    pt.add_argument("--momentum", type=float, default=0.9)
    pt.add_argument("--weight-decay", type=float, default=5e-4)
    pt.add_argument("--schedule", default="step", choices=TR.SCHEDULES)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--limit-train", type=int, default=None)
    pt.add_argument("--limit-test", type=int, default=None)
    pt.add_argument("--checkpoint", default=None,
                    help="resume from this checkpoint file")
    pt.add_argument("--run-name", default=None)
    pt.add_argument("--out", default="runs", help="directory for logs and checkpoints")

    pe = sub.add_parser("eval", help="report test error of a checkpoint")
    _add_model_args(pe)
    _add_data_args(pe)
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--batch-size", type=int, default=256)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--limit-test", type=int, default=None)

    pp = sub.add_parser("profile", help="print the per-layer cost table")
    _add_model_args(pp)
    pp.add_argument("--out", default=None, help="also write tab-separated rows here")

    pg = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--tolerance", type=float, default=1e-4)

    pa = sub.add_parser("ablate", help="run the short ablation grid")
    pa.add_argument("--steps", type=int, default=200)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--out", default=None, help="also write the table here")

    px = sub.add_parser("export-attention",
                        help="write attention maps for a few test images as PGM")
    _add_model_args(px)
    _add_data_args(px)
    px.add_argument("--checkpoint", default=None)
    px.add_argument("--count", type=int, default=4)
    px.add_argument("--seed", type=int, default=0)
    px.add_argument("--out", default="attention", help="output directory")
    return root


def _inject_config(argv: List[str]) -> List[str]:
    """Splice key=value pairs from a --config file in as flags.

    File entries become defaults: they are inserted right after the subcommand
    so explicit flags, parsed later, win.
    """
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a file path")
    path = argv[i + 1]
    argv = argv[:i] + argv[i + 2:]
    if not argv:
        raise UsageError("--config given without a subcommand")
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}")
    injected: List[str] = []
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("_", "-")
        injected += [f"--{key}", value.strip()]
    return argv[:1] + injected + argv[1:]


def _eval_batches(cfg, recs, mean, std):
    return D.batches(recs, cfg.batch_size, mean=mean, std=std)


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    cfg.validate()
    records = TR.run_training(cfg)
    last = records[-1]
    print(f"run {cfg.name()}: {len(records)} epochs, "
          f"final train error {last['train_error']:.2f}%, "
          f"test error {last['test_error']:.2f}%")
    print(f"log: {cfg.out_dir}/{cfg.name()}.log")
    return 0


def _cmd_eval(args) -> int:
    cfg = _train_config(args)
    cfg.validate()
    model = TR.build_model(cfg)
    M.checkpoint_load(model, args.checkpoint)
    _, test, mean, std = TR.load_data(cfg)
    err = TR.evaluate(model, _eval_batches(cfg, test, mean, std))
    print(f"test error: {err:.2f}% ({len(test.labels)} images)")
    return 0


def _cmd_profile(args) -> int:
    spec = M.get_spec(args.model, attention=_BAM_CHOICES[args.bam],
                      bam=_bam_config(args))
    report = P.cost_report(spec)
    print(P.format_table(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(P.to_tsv(report))
        print(f"rows written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(seed=args.seed)
    failed = 0
    for name, err in results:
        ok = err < args.tolerance
        failed += not ok
        print(f"{name:28s} {err:10.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} checks within {args.tolerance:g}")
    if failed:
        raise NumericError(f"{failed} gradient checks above {args.tolerance:g}")
    return 0


def _cmd_ablate(args) -> int:
    cells = TR.ablation_grid(steps=args.steps, seed=args.seed)
    table = TR.format_ablation_table(cells)
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(table + "\n")
        print(f"table written to {args.out}")
    return 0


def _cmd_export_attention(args) -> int:
    cfg = _train_config(args)
    cfg.validate()
    model = TR.build_model(cfg)
    if args.checkpoint:
        M.checkpoint_load(model, args.checkpoint)
    _, test, mean, std = TR.load_data(cfg)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    take = D.take(test, min(args.count, len(test.labels)))
    batch = next(iter(D.batches(take, len(take.labels), mean=mean, std=std)))
    paths = TR.export_attention(model, batch, args.out)
    for p in paths:
        print(p)
    return 0


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "profile": _cmd_profile,
             "gradcheck": _cmd_gradcheck, "ablate": _cmd_ablate,
             "export-attention": _cmd_export_attention}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _inject_config(argv)
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
