"""Acceptance checklist for the package: one test per shipped guarantee.

Each test prints a single "criterion N: PASS/FAIL" line (visible with -s or on
failure) and enforces the stated numeric tolerance and, where one applies, the
runtime budget.  Budgets are generous for a single laptop core.
"""
import time
from contextlib import contextmanager

import numpy as np
import pytest

from bamnet import autodiff as ad
from bamnet import bam
from bamnet import data as D
from bamnet import gradcheck as G
from bamnet import layers as L
from bamnet import models as M
from bamnet import profiler as P
from bamnet import tensor as T
from bamnet import train as TR
from bamnet.autodiff import Node
from bamnet.bam import BamConfig
from bamnet.tensor import Tensor

from _oracles import bam_oracle, conv2d_oracle

F64 = np.float64


@contextmanager
def criterion(num, budget=None):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"criterion {num}: FAIL ({time.perf_counter() - t0:.1f}s)")
        raise
    dt = time.perf_counter() - t0
    if budget is not None and dt >= budget:
        print(f"criterion {num}: FAIL (runtime {dt:.1f}s over the {budget:.0f}s budget)")
        raise AssertionError(f"criterion {num}: runtime {dt:.1f}s exceeds {budget}s")
    print(f"criterion {num}: PASS ({dt:.1f}s)")


def _report(name, attention="none", cfg=None):
    return P.cost_report(M.get_spec(name, attention, cfg))


def test_c1_attention_overhead_is_exact():
    with criterion(1, budget=1.0):
        for d in (1, 4):
            delta = P.diff(_report("resnet50_cifar", "bottleneck", BamConfig(dilation=d)),
                           _report("resnet50_cifar"))
            per_width = {}
            for row in delta.rows:
                if row.params:
                    head = row.name.split(".")[0]
                    per_width[head] = per_width.get(head, 0) + row.params
            assert per_width == {"bam1": 17_747, "bam2": 69_283, "bam3": 273_731}
            assert delta.total_params == 360_761


def test_c2_imagenet_scale_costs_within_tolerance():
    with criterion(2, budget=1.0):
        rep = _report("resnet50_imagenet")
        assert abs(rep.total_params - 25.56e6) / 25.56e6 < 0.005
        assert abs(rep.total_macs - 3.86e9) / 3.86e9 < 0.02


def test_c3_cost_invariances_and_capacity_ordering():
    with criterion(3):
        d_totals = {d: _report("resnet50_cifar", "bottleneck",
                               BamConfig(dilation=d)).total_params
                    for d in (1, 2, 4, 6)}
        assert len(set(d_totals.values())) == 1  # cost never depends on dilation
        published = {4: 26.30e6, 8: 24.62e6, 16: 24.07e6, 32: 23.87e6}
        r_totals = {r: _report("resnet50_cifar", "bottleneck",
                               BamConfig(reduction=r)).total_params
                    for r in (4, 8, 16, 32)}
        assert r_totals[4] > r_totals[8] > r_totals[16] > r_totals[32]
        for r, want in published.items():
            assert abs(r_totals[r] - want) / want < 0.01, (r, r_totals[r])


def test_c4_gradients_match_finite_differences():
    with criterion(4, budget=120.0):
        results = G.run_suite(eps=1e-5, seed=0)
        worst = max(err for _, err in results)
        assert worst < 1e-4, sorted(results, key=lambda t: -t[1])[:3]
        names = [n for n, _ in results]
        for token in ("conv2d.input", "conv2d.weight", "conv2d.dilation2",
                      "conv2d.dilation4", "batch_norm.input", "linear.input",
                      "global_avg_pool", "max_pool2d", "relu", "sigmoid",
                      "cross_entropy", "bam.combine_sum.input",
                      "bam.combine_prod.input", "bam.combine_max.input",
                      "bam.channel_only.input", "bam.spatial_only.input"):
            assert token in names, token


def test_c5_kernels_match_scalar_oracles():
    with criterion(5, budget=60.0):
        rng = T.make_rng([77, 0])
        worst = 0.0
        dilations = []
        for i in range(12):  # convolution cases
            d = (1, 2, 4)[i % 3]
            k = 1 if (d == 1 and i % 4 == 3) else 3
            stride = 1 + (i % 2 if d == 1 else 0)
            pad = d if k == 3 else 0
            n = int(rng.integers(1, 3))
            c_in = int(rng.integers(1, 9))
            c_out = int(rng.integers(1, 9))
            h = int(rng.integers(5, 9))
            w = int(rng.integers(5, 9))
            x = T.random_normal((n, c_in, h, w), rng, dtype=F64)
            p = L.conv2d_params(c_in, c_out, k, stride=stride, padding=pad,
                                dilation=d, dtype=F64, rng=rng)
            got = L.conv2d(Node(x), p).value.data
            want = conv2d_oracle(x.data, p.weight.value.data, p.bias.value.data,
                                 stride, pad, d)
            worst = max(worst, float(np.abs(got - want).max()))
            dilations.append(d)
        assert {2, 4} <= set(dilations)
        variants = [dict(), dict(combine="prod"), dict(combine="max"),
                    dict(spatial_branch=False), dict(channel_branch=False)]
        for i in range(8):  # full attention-block cases
            cfg = BamConfig(reduction=(2, 4)[i % 2], dilation=(2, 4)[i % 2],
                            **variants[i % len(variants)])
            c = 8
            h = int(rng.integers(5, 9))
            x = T.random_normal((2, c, h, h), rng, dtype=F64)
            p = bam.bam_params(c, cfg, dtype=F64, rng=rng)
            refined, gate, _, _ = bam.bam_forward(Node(x), p, cfg, "train")
            want_refined, want_gate = bam_oracle(x.data, p, cfg)
            worst = max(worst, float(np.abs(gate.value.data - want_gate).max()),
                        float(np.abs(refined.value.data - want_refined).max()))
        assert worst <= 1e-12, worst


def test_c6_gate_identities():
    with criterion(6):
        cfg = BamConfig(reduction=4, dilation=2)
        zero = bam.bam_params(8, cfg, dtype=F64, init="zero")
        rng = T.make_rng(42)
        x = T.random_normal((4, 8, 6, 6), rng, dtype=F64)
        refined, gate, _, _ = bam.bam_forward(Node(x), zero, cfg, "train")
        want = 1.5 * x.data
        assert (np.abs(refined.value.data - want) <= np.spacing(np.abs(want))).all()

        live = bam.bam_params(8, cfg, dtype=F64, rng=T.make_rng(43))
        seen = 0
        for b in range(4):  # 4 x 250 random inputs
            xb = T.random_normal((250, 8, 6, 6), T.make_rng([44, b]), dtype=F64)
            refined, gate, _, _ = bam.bam_forward(Node(xb), live, cfg, "train")
            g = gate.value.data
            assert (g > 0.0).all() and (g < 1.0).all()
            f = xb.data
            mask = np.abs(f) > 1e-6
            ratio = np.abs(refined.value.data[mask] / f[mask])
            assert (ratio > 1.0).all() and (ratio < 2.0).all()
            seen += xb.shape[0]
        assert seen == 1000


def test_c7_training_smoke(tmp_path):
    with criterion(7):
        t0 = time.perf_counter()
        cfg = TR.TrainConfig(model="tiny", attention="bottleneck",
                             dataset="synthetic", batch_size=32, lr=0.05,
                             momentum=0.9, weight_decay=1e-4,
                             schedule="constant", seed=0)
        train, _, mean, std = TR.load_data(cfg)
        model = TR.build_model(cfg)
        out = TR.train_steps(model, TR.sgd_state(model, cfg), cfg, train, mean,
                             std, max_steps=2000, stop_train_error=5.0)
        assert out["window_error"] < 5.0, out
        assert out["steps"] <= 2000
        assert out["losses"][-1] < 0.2 * out["losses"][0]
        assert time.perf_counter() - t0 < 600.0

        data_dir = tmp_path / "cifar"
        D.write_split(D.synthetic_records(10_000, [9, 50]), data_dir, "train")
        D.write_split(D.synthetic_records(10_000, [9, 51]), data_dir, "test")
        results = {}
        for attention in ("none", "bottleneck"):
            run = TR.TrainConfig(model="tiny", attention=attention,
                                 dataset="cifar10", data_dir=str(data_dir),
                                 epochs=5, batch_size=128, lr=0.05, momentum=0.9,
                                 weight_decay=5e-4, schedule="step", seed=1,
                                 limit_train=5000, limit_test=1000,
                                 out_dir=str(tmp_path / attention))
            records = TR.run_training(run)
            assert len(records) == 5
            assert all(np.isfinite(r["train_loss"]) for r in records)
            assert (tmp_path / attention / (run.name() + ".log")).is_file()
            results[attention] = records
        delta = results["bottleneck"][0]["params"] - results["none"][0]["params"]
        want = (P.count_params(M.get_spec("tiny", "bottleneck", BamConfig())).total_params
                - P.count_params(M.get_spec("tiny", "none")).total_params)
        assert delta == want


def test_c8_ablation_grid_completes_with_matching_params():
    with criterion(8):
        axes = TR.default_ablation_axes()
        cells = TR.ablation_grid(axes, steps=200, seed=0)
        assert len(cells) >= 16
        flat = [(axis, value, cfg) for axis, entries in axes
                for value, cfg in entries]
        assert len(flat) == len(cells)
        for (axis, value, cfg), cell in zip(flat, cells):
            assert cell.failure is None, (axis, value, cell.failure)
            assert cell.error is not None and 0.0 <= cell.error <= 100.0
            want = P.count_params(M.get_spec(cfg.model, cfg.attention, cfg.bam))
            assert cell.params == want.total_params, (axis, value)
        lines = TR.format_ablation_table(cells).splitlines()
        assert lines[0].split() == ["axis", "value", "params", "error"]
        assert len(lines) == 1 + len(cells)


def test_c9_determinism_and_roundtrips(tmp_path):
    with criterion(9):
        # checkpoint save -> load -> save reproduces the file bit for bit
        spec = M.get_spec("tiny", "bottleneck", BamConfig())
        first = M.build(spec, seed=4)
        a = tmp_path / "a.ckpt"
        M.checkpoint_save(first, a)
        second = M.build(spec, seed=5)
        M.checkpoint_load(second, a)
        b = tmp_path / "b.ckpt"
        M.checkpoint_save(second, b)
        assert a.read_bytes() == b.read_bytes()

        # a fixed-seed run retrains to identical bytes
        runs = {}
        for tag in ("r1", "r2"):
            cfg = TR.TrainConfig(model="tiny", attention="bottleneck",
                                 dataset="synthetic", epochs=1, batch_size=64,
                                 lr=0.05, momentum=0.9, weight_decay=1e-4,
                                 schedule="constant", seed=6, limit_train=128,
                                 limit_test=64, out_dir=str(tmp_path / tag))
            TR.run_training(cfg)
            runs[tag] = (tmp_path / tag / (cfg.name() + ".ckpt")).read_bytes()
        assert runs["r1"] == runs["r2"]

        # stored records decode and re-encode to the exact bytes on disk
        data_dir = tmp_path / "cifar"
        D.write_split(D.synthetic_records(10_000, [7, 60]), data_dir, "test")
        raw = (data_dir / "test_batch.bin").read_bytes()
        recs = D.load_split(data_dir, "cifar10", "test")
        rebuilt = b"".join(
            D.encode_record((int(recs.labels[i]),), recs.images[i], "cifar10")
            for i in range(len(recs)))
        assert rebuilt == raw

        # exported attention maps parse and sit at the downsampling junctions
        model = M.build(spec, seed=4)
        batch = next(iter(D.batches(D.take(recs, 2), 2,
                                    mean=np.zeros(3), std=np.ones(3))))
        paths = TR.export_attention(model, batch, tmp_path / "maps")
        assert paths
        extent = {"bam1": (32, 32), "bam2": (16, 16)}
        for p in paths:
            img = TR.read_pgm(p)
            name = next(k for k in extent if f"_{k}_" in str(p))
            assert img.shape == extent[name], p
