"""Analytic cost accounting: per-layer parameter and multiply-accumulate
counts for any model spec, plus report diffing and formatting.

Conventions: a conv row counts C_out*C_in*kH*kW*H'*W' MACs and a linear row
out*in; normalization, activations, and pooling are tallied as one op per
element in a separate column that never enters the headline numbers.  BN
running statistics likewise sit in their own buffer column, outside the
parameter total.  Reported "GFLOPs" are giga-MACs for a single image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from . import models as M


@dataclass(frozen=True)
class Row:
    name: str
    params: int
    buffers: int
    macs: int
    elem_ops: int


@dataclass(frozen=True)
class CostReport:
    spec_name: str
    input_chw: Tuple[int, int, int]
    rows: Tuple[Row, ...]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_buffers(self) -> int:
        return sum(r.buffers for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_elem_ops(self) -> int:
        return sum(r.elem_ops for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def by_name(self) -> Dict[str, Row]:
        return {r.name: r for r in self.rows}


def cost_report(spec: M.ModelSpec, input_chw: Optional[Tuple[int, int, int]] = None
                ) -> CostReport:
    """Instantiate the model with zero weights (cheap) and walk its cost rows."""
    if input_chw is None:
        input_chw = (3, spec.input_hw, spec.input_hw)
    model = M.build(spec, init="zero")
    raw, _ = model.root.rows("", input_chw)
    rows = tuple(Row(*r) for r in raw)
    return CostReport(spec.name, tuple(input_chw), rows)


def count_params(spec: M.ModelSpec) -> CostReport:
    return cost_report(spec)


def count_macs(spec: M.ModelSpec, input_chw: Tuple[int, int, int]) -> CostReport:
    return cost_report(spec, input_chw)


def diff(a: CostReport, b: CostReport) -> CostReport:
    """Row-wise a minus b, aligned by name; rows missing on one side count 0."""
    bn = b.by_name()
    rows = []
    for r in a.rows:
        o = bn.get(r.name)
        if o is None:
            rows.append(r)
        else:
            rows.append(Row(r.name, r.params - o.params, r.buffers - o.buffers,
                            r.macs - o.macs, r.elem_ops - o.elem_ops))
    a_names = {r.name for r in a.rows}
    for r in b.rows:
        if r.name not in a_names:
            rows.append(Row(r.name, -r.params, -r.buffers, -r.macs, -r.elem_ops))
    return CostReport(f"{a.spec_name}-{b.spec_name}", a.input_chw, tuple(rows))


def format_table(report: CostReport) -> str:
    header = ("layer", "params", "macs", "elem_ops")
    body = [(r.name, str(r.params), str(r.macs), str(r.elem_ops)) for r in report.rows]
    totals = ("total", str(report.total_params), str(report.total_macs),
              str(report.total_elem_ops))
    widths = [max(len(row[i]) for row in [header] + body + [totals])
              for i in range(len(header))]

    def fmt(row):
        cells = [row[0].ljust(widths[0])]
        cells += [row[i].rjust(widths[i]) for i in range(1, len(row))]
        return "  ".join(cells)

    lines = [fmt(header)]
    lines += [fmt(row) for row in body]
    lines.append(fmt(totals))
    lines.append(f"input {report.input_chw}  params {report.total_params:,}  "
                 f"gflops {report.gflops:.4f}  (bn buffers {report.total_buffers:,}, "
                 f"elementwise ops {report.total_elem_ops:,} excluded from headline)")
    return "\n".join(lines)


def to_tsv(report: CostReport) -> str:
    return "\n".join(f"{r.name}\t{r.params}\t{r.macs}" for r in report.rows)
