# metrics.py
"""
Per-step token, KV, FLOP and latency accounting for generation runs.

The FLOP model counts a multiply-accumulate as two FLOPs and covers the
projections, the attention products and the FFN; normalization, softmax and
activations are left out. Reports are written with pandas in a fixed column
order so identical metrics give byte-identical files.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

import pandas as pd

from config import ArgumentError, ReportFormat
from engine.fastvar import keep_count
from engine.pyramid import ScaleSchedule
from logger import log

if TYPE_CHECKING:
    from engine.varnet import ModelConfig

REPORT_COLUMNS: list[str] = [
    "step",
    "h",
    "w",
    "forwarded_tokens",
    "kv_total",
    "est_flops",
    "wall_ns",
    "skipped",
]


class StepLedger(Protocol):
    """What the decoder records per step (see ``engine.varnet.StepRecord``)."""

    step: int
    h: int
    w: int
    forwarded_tokens: int
    kv_tokens_total: int
    skipped: bool
    wall_ns: int


@dataclass
class StepMetrics:
    step: int
    h: int
    w: int
    forwarded_tokens: int
    kv_tokens_total: int
    est_flops: int
    wall_ns: int = 0
    skipped: bool = False
    module_ns: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.forwarded_tokens > self.h * self.w:
            raise ArgumentError(
                f"step {self.step} forwards {self.forwarded_tokens} of {self.h * self.w} tokens"
            )


@dataclass
class RunMetrics:
    steps: list[StepMetrics] = field(default_factory=list)
    label: str = ""

    @property
    def total_forwarded_tokens(self) -> int:
        return sum(s.forwarded_tokens for s in self.steps)

    @property
    def total_kv_tokens(self) -> int:
        return sum(s.kv_tokens_total for s in self.steps)

    @property
    def total_est_flops(self) -> int:
        return sum(s.est_flops for s in self.steps)

    @property
    def total_wall_ns(self) -> int:
        return sum(s.wall_ns for s in self.steps)

    def step(self, k: int) -> StepMetrics:
        for s in self.steps:
            if s.step == k:
                return s
        raise ArgumentError(f"no metrics recorded for step {k}")

    def speedup_vs(self, baseline: RunMetrics) -> float:
        """baseline total wall time / own total wall time."""
        return _ratio(baseline.total_wall_ns, self.total_wall_ns)

    def flop_speedup_vs(self, baseline: RunMetrics) -> float:
        return _ratio(baseline.total_est_flops, self.total_est_flops)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "step": s.step,
                "h": s.h,
                "w": s.w,
                "forwarded_tokens": s.forwarded_tokens,
                "kv_total": s.kv_tokens_total,
                "est_flops": s.est_flops,
                "wall_ns": s.wall_ns,
                "skipped": int(s.skipped),
            }
            for s in self.steps
        ]
        return pd.DataFrame.from_records(rows, columns=REPORT_COLUMNS)


def _ratio(numerator: int, denominator: int) -> float:
    if denominator == 0:
        return 1.0 if numerator == 0 else float("inf")
    return numerator / denominator


# ---------------------------
# FLOP model
# ---------------------------


def step_flops(cfg: ModelConfig, q: int, kv: int) -> int:
    """
    FLOPs of one forwarded step with ``q`` query tokens over ``kv`` keys.

    ``kv`` counts every cached key including the step's own kept tokens.
    """
    d = cfg.d
    per_layer = 8 * q * d * d + 4 * q * kv * d + 4 * q * d * cfg.d_ff
    return cfg.depth * per_layer


def flop_estimate(
    cfg: ModelConfig, sched: ScaleSchedule, prune_schedule: ScaleSchedule | None = None
) -> RunMetrics:
    """
    Token, KV and FLOP ledger of a run, without running the model.

    Without ``prune_schedule`` every step forwards all its tokens. Skipped
    steps forward nothing and cost zero FLOPs.
    """
    if prune_schedule is not None and prune_schedule.sizes != sched.sizes:
        raise ArgumentError("prune schedule sizes differ from the run schedule")
    metrics = RunMetrics(label="estimate")
    kv = 0
    for step in range(1, sched.K + 1):
        h, w = sched.size(step)
        ratio = prune_schedule.ratio_for(step) if prune_schedule is not None else 0.0
        if ratio == 1.0:
            metrics.steps.append(StepMetrics(step, h, w, 0, kv, 0, skipped=True))
            continue
        q = keep_count(h * w, ratio)
        kv += q
        metrics.steps.append(StepMetrics(step, h, w, q, kv, step_flops(cfg, q, kv)))
    return metrics


def collect_run_metrics(
    records: Iterable[StepLedger], cfg: ModelConfig, label: str = ""
) -> RunMetrics:
    """RunMetrics from decoder step records, FLOPs filled from the model."""
    steps: list[StepMetrics] = []
    for r in records:
        flops = 0 if r.skipped else step_flops(cfg, r.forwarded_tokens, r.kv_tokens_total)
        module_ns = dict(getattr(r, "module_ns", {}))
        steps.append(
            StepMetrics(
                r.step,
                r.h,
                r.w,
                r.forwarded_tokens,
                r.kv_tokens_total,
                flops,
                r.wall_ns,
                r.skipped,
                module_ns,
            )
        )
    return RunMetrics(steps, label)


# ---------------------------
# Reports
# ---------------------------


def report_frame(metrics: RunMetrics, baseline: RunMetrics | None = None) -> pd.DataFrame:
    """Per-step rows, a ``total`` row and, with a baseline, a ``speedup`` row.

    The speedup row carries the FLOP ratio in ``est_flops`` and the wall-clock
    ratio in ``wall_ns``, both baseline over this run.
    """
    df = metrics.to_frame().astype(object)
    totals = {
        "step": "total",
        "h": "",
        "w": "",
        "forwarded_tokens": metrics.total_forwarded_tokens,
        "kv_total": metrics.total_kv_tokens,
        "est_flops": metrics.total_est_flops,
        "wall_ns": metrics.total_wall_ns,
        "skipped": sum(int(s.skipped) for s in metrics.steps),
    }
    extra = [totals]
    if baseline is not None:
        extra.append(
            {
                "step": "speedup",
                "h": "",
                "w": "",
                "forwarded_tokens": "",
                "kv_total": "",
                "est_flops": f"{metrics.flop_speedup_vs(baseline):.6f}",
                "wall_ns": f"{metrics.speedup_vs(baseline):.6f}",
                "skipped": "",
            }
        )
    tail = pd.DataFrame.from_records(extra, columns=REPORT_COLUMNS)
    return pd.concat([df, tail], ignore_index=True)


def report_payload(metrics: RunMetrics, baseline: RunMetrics | None = None) -> dict[str, Any]:
    steps = metrics.to_frame().to_dict(orient="records")
    for row in steps:
        row["skipped"] = bool(row["skipped"])
    return {
        "steps": [{k: (v if isinstance(v, bool) else int(v)) for k, v in row.items()} for row in steps],
        "totals": {
            "forwarded_tokens": metrics.total_forwarded_tokens,
            "kv_total": metrics.total_kv_tokens,
            "est_flops": metrics.total_est_flops,
            "wall_ns": metrics.total_wall_ns,
        },
        "speedup": round(metrics.speedup_vs(baseline), 6) if baseline is not None else None,
        "flop_speedup": round(metrics.flop_speedup_vs(baseline), 6) if baseline is not None else None,
    }


def metrics_report(
    metrics: RunMetrics,
    path: str | Path,
    fmt: ReportFormat = "csv",
    baseline: RunMetrics | None = None,
) -> Path:
    """Write ``metrics`` as CSV or JSON; returns the written path."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        report_frame(metrics, baseline).to_csv(out, index=False, lineterminator="\n")
    elif fmt == "json":
        out.write_text(json.dumps(report_payload(metrics, baseline), indent=2) + "\n", encoding="utf-8")
    else:
        raise ArgumentError(f"unknown report format {fmt!r}")
    log(f"metrics: wrote {fmt} report {out}", level="INFO")
    return out


def read_metrics_csv(path: str | Path) -> RunMetrics:
    """Parse the per-step rows of a CSV report back into RunMetrics."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != REPORT_COLUMNS:
        raise ArgumentError(f"{path}: unexpected header {list(df.columns)}")
    rows = df[df["step"].str.isdigit()]
    steps = [
        StepMetrics(
            step=int(r.step),
            h=int(r.h),
            w=int(r.w),
            forwarded_tokens=int(r.forwarded_tokens),
            kv_tokens_total=int(r.kv_total),
            est_flops=int(r.est_flops),
            wall_ns=int(r.wall_ns),
            skipped=r.skipped == "1",
        )
        for r in rows.itertuples(index=False)
    ]
    return RunMetrics(steps, label=Path(path).stem)

