import json
from pathlib import Path

import pandas as pd
import pytest

from config import TOY_SIDES, ArgumentError, load_run_config_from_file
from engine.fastvar import FastVarPruner
from engine.pyramid import ScaleSchedule
from engine.varnet import ModelConfig, generate, init_model
from metrics import (
    REPORT_COLUMNS,
    RunMetrics,
    StepMetrics,
    collect_run_metrics,
    flop_estimate,
    metrics_report,
    read_metrics_csv,
    report_frame,
    step_flops,
)

SENSITIVITY_SIDES = [16, 21, 27, 36, 48, 64]


def test_step_flops_hand_count() -> None:
    """One token, empty cache, depth 1, d=2, d_ff=4: 32 + 8 + 32 FLOPs."""
    cfg = ModelConfig(depth=1, d=2, heads=1, d_ff=4, vocab=2)
    assert step_flops(cfg, q=1, kv=1) == 72
    # Second step: four tokens over five keys, 128 + 160 + 128.
    assert step_flops(cfg, q=4, kv=5) == 416
    sched = ScaleSchedule.from_sides([1, 2], n_prune=1)
    assert flop_estimate(cfg, sched).total_est_flops == 72 + 416


def test_flop_estimate_scales_with_depth() -> None:
    cfg = ModelConfig(depth=3, d=2, heads=1, d_ff=4, vocab=2)
    assert step_flops(cfg, q=1, kv=1) == 3 * 72


def test_flop_estimate_tail_token_reduction() -> None:
    cfg = ModelConfig(depth=1, d=8, heads=2, d_ff=16, vocab=16)
    sched = ScaleSchedule.from_sides(SENSITIVITY_SIDES, n_prune=2)
    pruned = sched.with_ratios([0.5, 0.75])
    base = flop_estimate(cfg, sched)
    est = flop_estimate(cfg, sched, pruned)
    assert [base.step(k).forwarded_tokens for k in (5, 6)] == [2304, 4096]
    assert [est.step(k).forwarded_tokens for k in (5, 6)] == [1152, 1024]
    assert sum(est.step(k).forwarded_tokens for k in (5, 6)) == 2176
    assert base.step(4).est_flops == est.step(4).est_flops


def test_flop_estimate_without_pruning_matches_baseline() -> None:
    cfg = ModelConfig(depth=2, d=8, heads=2, d_ff=16, vocab=16)
    sched = ScaleSchedule.from_sides(SENSITIVITY_SIDES, n_prune=2)
    zero = flop_estimate(cfg, sched, sched.with_ratios([0.0, 0.0]))
    base = flop_estimate(cfg, sched)
    assert zero.total_est_flops == base.total_est_flops
    assert zero.flop_speedup_vs(base) == 1.0


def test_flop_estimate_is_additive_and_zero_for_skips() -> None:
    cfg = ModelConfig(depth=2, d=16, heads=2, d_ff=32, vocab=16)
    sides = [1, 2, 4, 6, 8, 12, 16, 20, 24, 32, 40, 48, 64]
    sched = ScaleSchedule.from_sides(sides, n_prune=4)
    pruned = sched.with_ratios([0.4, 0.5, 1.0, 1.0])
    est = flop_estimate(cfg, sched, pruned)
    assert est.total_est_flops == sum(s.est_flops for s in est.steps)
    for k in (12, 13):
        step = est.step(k)
        assert step.skipped and step.est_flops == 0 and step.forwarded_tokens == 0
    # Skipped steps add nothing to the KV cache.
    assert est.step(13).kv_tokens_total == est.step(11).kv_tokens_total
    assert est.flop_speedup_vs(flop_estimate(cfg, sched)) >= 2.0


def test_infinity_style_manifest_halves_the_flops() -> None:
    manifest = Path(__file__).resolve().parent.parent / "configs" / "infinity_style.yaml"
    run_cfg = load_run_config_from_file(manifest)
    cfg = run_cfg.to_model_config()
    assert (cfg.depth, cfg.d, cfg.heads, cfg.d_ff) == (8, 256, 8, 1024)
    sched = run_cfg.to_schedule()
    assert [h for h, _ in sched.sizes] == TOY_SIDES
    assert sched.prune_ratios == (0.4, 0.5, 1.0, 1.0)
    base = flop_estimate(cfg, sched.with_ratios([0.0] * sched.n_prune))
    pruned = flop_estimate(cfg, sched.with_ratios([0.0] * sched.n_prune), sched)
    assert [pruned.step(k).forwarded_tokens for k in (10, 11)] == [437, 648]
    assert pruned.flop_speedup_vs(base) >= 2.0


def test_flop_estimate_rejects_mismatched_schedules() -> None:
    cfg = ModelConfig(depth=1, d=2, heads=1, d_ff=4, vocab=2)
    with pytest.raises(ArgumentError):
        flop_estimate(
            cfg,
            ScaleSchedule.from_sides([1, 2, 3], n_prune=1),
            ScaleSchedule.from_sides([1, 2, 4], n_prune=1),
        )


def test_step_metrics_rejects_too_many_tokens() -> None:
    with pytest.raises(ArgumentError):
        StepMetrics(step=1, h=2, w=2, forwarded_tokens=5, kv_tokens_total=5, est_flops=0)


# ---------------------------
# Ledger from a real run
# ---------------------------


@pytest.fixture
def pruned_run(tiny_cfg):
    sched = ScaleSchedule.from_sides([1, 2, 3, 4, 6], n_prune=2, prune_ratios=[0.5, 1.0])
    model = init_model(tiny_cfg, sched.sizes)
    return sched, generate(model, sched, 1, 2, pruner=FastVarPruner(sched), label="pruned")


def test_run_metrics_token_ledger_matches_decisions(tiny_cfg, pruned_run) -> None:
    sched, result = pruned_run
    metrics = result.metrics
    assert metrics.label == "pruned"
    for rec, step in zip(result.state.records, metrics.steps):
        assert step.forwarded_tokens == rec.forwarded_tokens
        for decision in rec.decisions.values():
            assert decision.keep == step.forwarded_tokens
    assert metrics.step(5).skipped and metrics.step(5).est_flops == 0
    assert metrics.total_forwarded_tokens == sum(s.forwarded_tokens for s in metrics.steps)
    assert metrics.total_wall_ns == sum(s.wall_ns for s in metrics.steps)
    # The recorded ledger agrees with the analytical one.
    est = flop_estimate(tiny_cfg, sched.with_ratios([0.0, 0.0]), sched)
    assert [s.est_flops for s in metrics.steps] == [s.est_flops for s in est.steps]


def test_collect_run_metrics_keeps_module_timers(pruned_run, tiny_cfg) -> None:
    _, result = pruned_run
    metrics = collect_run_metrics(result.state.records, tiny_cfg, label="again")
    assert set(metrics.step(4).module_ns) == {"attention", "ffn", "pts", "ctr"}
    assert metrics.step(4).module_ns["pts"] > 0


def test_speedup_against_itself_is_one() -> None:
    run = RunMetrics([StepMetrics(1, 1, 1, 1, 1, 72, wall_ns=500)])
    assert run.speedup_vs(run) == 1.0
    assert run.flop_speedup_vs(run) == 1.0
    with pytest.raises(ArgumentError):
        run.step(2)


# ---------------------------
# Reports
# ---------------------------


def _sample_metrics(wall_scale: int = 1) -> RunMetrics:
    return RunMetrics(
        [
            StepMetrics(1, 1, 1, 1, 1, 72, wall_ns=100 * wall_scale),
            StepMetrics(2, 2, 2, 2, 3, 200, wall_ns=300 * wall_scale),
            StepMetrics(3, 4, 4, 0, 3, 0, wall_ns=10 * wall_scale, skipped=True),
        ],
        label="sample",
    )


def test_csv_report_header_and_rows(tmp_path) -> None:
    path = metrics_report(_sample_metrics(), tmp_path / "run.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1] == "1,1,1,1,1,72,100,0"
    assert lines[3] == "3,4,4,0,3,0,10,1"
    assert lines[4] == "total,,,3,7,272,410,1"
    assert len(lines) == 5


def test_csv_report_speedup_row(tmp_path) -> None:
    baseline = _sample_metrics(wall_scale=2)
    path = metrics_report(_sample_metrics(), tmp_path / "run.csv", baseline=baseline)
    last = path.read_text(encoding="utf-8").splitlines()[-1]
    assert last == "speedup,,,,,1.000000,2.000000,"


def test_reports_are_deterministic(tmp_path) -> None:
    for fmt in ("csv", "json"):
        a = metrics_report(_sample_metrics(), tmp_path / f"a.{fmt}", fmt=fmt)
        b = metrics_report(_sample_metrics(), tmp_path / f"b.{fmt}", fmt=fmt)
        assert a.read_bytes() == b.read_bytes()


def test_json_report_mirrors_csv_fields(tmp_path) -> None:
    path = metrics_report(_sample_metrics(), tmp_path / "run.json", fmt="json", baseline=_sample_metrics())
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert list(payload["steps"][0]) == REPORT_COLUMNS
    assert payload["steps"][2]["skipped"] is True
    assert payload["totals"]["est_flops"] == 272
    assert payload["speedup"] == 1.0


def test_read_metrics_csv_recovers_step_rows(tmp_path) -> None:
    original = _sample_metrics()
    path = metrics_report(original, tmp_path / "run.csv", baseline=original)
    reloaded = read_metrics_csv(path)
    pd.testing.assert_frame_equal(reloaded.to_frame(), original.to_frame())
    assert reloaded.label == "run"


def test_read_metrics_csv_rejects_foreign_header(tmp_path) -> None:
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ArgumentError):
        read_metrics_csv(path)


def test_report_frame_rejects_unknown_format(tmp_path) -> None:
    assert list(report_frame(_sample_metrics()).columns) == REPORT_COLUMNS
    with pytest.raises(ArgumentError):
        metrics_report(_sample_metrics(), tmp_path / "x.txt", fmt="xml")  # type: ignore[arg-type]
