"""Command-line entry point: generate, bench, analyze and compare.

Configuration comes from a JSON/YAML manifest (``--config``, then
``$FASTVAR_CONFIG``, then ``./config.yaml``, then built-in defaults) with flag
overrides on top. Every failure ends in one ``error: <kind>: <message>`` line on
stderr; validation problems exit with 2, I/O problems with 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

from pydantic import ValidationError

from bench import (
    WALL_SPEEDUP_TARGET,
    append_profile_record,
    cache_step_sweep,
    export_mask,
    host_info,
    latency_share,
    latency_table,
    measure_run,
    profile_record,
    ratio_sweep,
    scale_sensitivity_sweep,
    spectrum_profile,
    step_spectra,
)
from config import (
    CONFIG_ENV_VAR,
    ConfigValidationError,
    FastVarError,
    LoggingSection,
    RunConfig,
    apply_overrides,
    load_run_config,
    load_run_config_from_file,
)
from engine.fastvar import FastVarPruner
from engine.map_io import read_map, write_map
from engine.pyramid import ScaleSchedule
from engine.varnet import GenerationResult, Model, generate, init_model
from logger import LOG_FILE_NAME, log, setup_logger
from metrics import RunMetrics, flop_estimate, metrics_report, read_metrics_csv

EXIT_IO = 1
EXIT_VALIDATION = 2
PROFILE_RESULTS_FILE = "profile_results.csv"


class CliUsageError(Exception):
    """Raised instead of argparse's multi-line usage exit."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise CliUsageError(message)


# ---------------------------
# Flag parsing
# ---------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON or YAML run manifest")
    p.add_argument("--ratios", type=_float_list, default=None, help="pruning ratios, e.g. 0.4,0.5,1,1")
    p.add_argument("--n-prune", type=int, default=None, help="texture stage length N")
    p.add_argument("--cache-step", type=int, default=None)
    p.add_argument("--mode", choices=["nearest", "bilinear"], default=None)
    p.add_argument("--extend-scales", type=_int_list, default=None, help="extra square sides, e.g. 80")
    p.add_argument("--reps", type=int, default=None, help="timing repetitions (median reported)")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--seed-weights", type=int, default=None)
    p.add_argument("--seed-cond", type=int, default=None)
    p.add_argument("--seed-sample", type=int, default=None)
    p.add_argument("--log-level", type=str, default=None)
    p.add_argument("--verbose", action="store_true", help="shorthand for --log-level DEBUG")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fastvar", description="Toy next-scale VAR engine with cached token pruning")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="run generation, write map, metrics and masks")
    _add_run_flags(gen)
    gen.add_argument("--compare", action="store_true", help="also run the unpruned baseline")
    gen.add_argument("--spectra", action="store_true", help="write per-step spectra of the predictions")

    bench = sub.add_parser("bench", help="time baseline and pruned runs")
    _add_run_flags(bench)
    bench.add_argument("--sweep", choices=["scale", "cache", "ratio"], default=None)

    analyze = sub.add_parser("analyze", help="radial power spectrum of an FVTM map")
    analyze.add_argument("map_file", type=str)
    analyze.add_argument("--out", type=str, default=None)
    analyze.add_argument("--log-level", type=str, default=None)
    analyze.add_argument("--verbose", action="store_true")

    compare = sub.add_parser("compare", help="speedup between two metrics CSVs")
    compare.add_argument("baseline_csv", type=str)
    compare.add_argument("pruned_csv", type=str)
    return parser


# ---------------------------
# Config resolution
# ---------------------------


def _resolve_config(path: str | None) -> RunConfig:
    """--config, then $FASTVAR_CONFIG, then ./config.yaml, then defaults."""
    if path:
        return load_run_config_from_file(path)
    env_path = os.getenv(CONFIG_ENV_VAR)
    if env_path:
        return load_run_config_from_file(env_path)
    if Path("config.yaml").exists():
        return load_run_config_from_file("config.yaml")
    return load_run_config()


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    ratios = getattr(args, "ratios", None)
    n_prune = getattr(args, "n_prune", None)
    if ratios is not None and n_prune is None:
        n_prune = len(ratios)
    level = "DEBUG" if getattr(args, "verbose", False) else getattr(args, "log_level", None)
    return {
        "schedule.ratios": ratios,
        "schedule.n_prune": n_prune,
        "schedule.cache_step": getattr(args, "cache_step", None),
        "schedule.mode": getattr(args, "mode", None),
        "schedule.extend_scales": getattr(args, "extend_scales", None),
        "bench.repetitions": getattr(args, "reps", None),
        "output.directory": getattr(args, "out", None),
        "seeds.weights": getattr(args, "seed_weights", None),
        "seeds.condition": getattr(args, "seed_cond", None),
        "seeds.sampling": getattr(args, "seed_sample", None),
        "logging.level": level,
    }


def load_cli_config(args: argparse.Namespace) -> RunConfig:
    cfg = _resolve_config(getattr(args, "config", None))
    return apply_overrides(cfg, _overrides(args))


def _start_logging(cfg: RunConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    setup_logger(cfg)
    log(f"resolved config: {json.dumps(cfg.model_dump(), sort_keys=True)}", level="INFO")


# ---------------------------
# Commands
# ---------------------------


def _write_reports(cfg: RunConfig, name: str, metrics: RunMetrics, baseline: RunMetrics | None = None) -> None:
    for fmt in cfg.output.formats:
        metrics_report(metrics, cfg.output_dir / f"{name}.{fmt}", fmt=fmt, baseline=baseline)


def _write_masks(cfg: RunConfig, result: GenerationResult) -> int:
    written = 0
    for record in result.state.records:
        decision = record.decisions.get((0, "attention"))
        if decision is None:
            continue
        export_mask(decision, (record.h, record.w), cfg.output_dir / "masks" / f"mask_step{record.step:02d}.pgm")
        written += 1
    return written


def _speedup_line(pruned: RunMetrics, baseline: RunMetrics) -> str:
    return (
        f"speedup: {pruned.speedup_vs(baseline):.3f}x wall, "
        f"{pruned.flop_speedup_vs(baseline):.3f}x est_flops"
    )


def _model_and_schedule(cfg: RunConfig) -> tuple[Model, ScaleSchedule]:
    sched = cfg.to_schedule()
    return init_model(cfg.to_model_config(), sched.sizes), sched


def cmd_generate(cfg: RunConfig, compare: bool = False, spectra: bool = False) -> int:
    model, sched = _model_and_schedule(cfg)
    seeds = cfg.seeds
    out = cfg.output_dir

    if not cfg.pruning_enabled:
        if compare:
            log("generate: --compare without pruning ratios, running baseline only", level="WARNING")
        result = generate(model, sched, seeds.condition, seeds.sampling, label="baseline")
        _write_reports(cfg, "baseline", result.metrics)
        write_map(result.final, out / "final_map.fvtm")
    else:
        pruner = FastVarPruner(sched)
        result = generate(model, sched, seeds.condition, seeds.sampling, pruner=pruner, label="pruned")
        baseline_metrics = None
        if compare:
            baseline = generate(model, sched, seeds.condition, seeds.sampling, label="baseline")
            baseline_metrics = baseline.metrics
            _write_reports(cfg, "baseline", baseline.metrics)
            write_map(baseline.final, out / "final_map_baseline.fvtm")
        _write_reports(cfg, "pruned", result.metrics, baseline_metrics)
        write_map(result.final, out / "final_map.fvtm")
        if cfg.output.masks:
            count = _write_masks(cfg, result)
            log(f"generate: wrote {count} masks", level="INFO")
        if baseline_metrics is not None:
            print(_speedup_line(result.metrics, baseline_metrics))

    if spectra or cfg.output.spectra:
        step_spectra(result.state.history).to_csv(out / "spectra.csv", index=False, lineterminator="\n")
    print(f"final map {result.final.h}x{result.final.w}x{result.final.d} written to {out / 'final_map.fvtm'}")
    return 0


def cmd_bench(cfg: RunConfig, sweep: str | None = None) -> int:
    out = cfg.output_dir
    if sweep is not None:
        runners = {"scale": scale_sensitivity_sweep, "cache": cache_step_sweep, "ratio": ratio_sweep}
        frame = runners[sweep](cfg)
        path = out / f"sweep_{sweep}.csv"
        frame.to_csv(path, index=False, lineterminator="\n")
        print(frame.to_string(index=False))
        print(f"sweep written to {path}")
        return 0

    model, sched = _model_and_schedule(cfg)
    seeds = (cfg.seeds.condition, cfg.seeds.sampling)
    reps = cfg.bench.repetitions
    baseline = measure_run(model, sched, seeds, repetitions=reps, label="baseline")
    estimate = flop_estimate(model.cfg, sched)
    if [s.est_flops for s in baseline.steps] != [s.est_flops for s in estimate.steps]:
        log("bench: baseline FLOP ledger differs from the estimate", level="WARNING")
    _write_reports(cfg, "baseline", baseline)
    meta: dict[str, Any] = {
        "command": "bench",
        "repetitions": reps,
        "latency_tail": cfg.bench.latency_tail,
        "baseline_latency_share_pct": round(latency_share(baseline, cfg.bench.latency_tail), 3),
    }
    print("baseline per-step latency:")
    print(latency_table(baseline).to_string(index=False))
    print(f"last {cfg.bench.latency_tail} steps: {meta['baseline_latency_share_pct']:.1f}% of wall time")

    pruned: RunMetrics | None = None
    if cfg.pruning_enabled:
        pruner = FastVarPruner(sched)
        pruned = measure_run(model, sched, seeds, pruner=pruner, repetitions=reps, label="pruned")
        _write_reports(cfg, "pruned", pruned, baseline)
        meta["speedup"] = round(pruned.speedup_vs(baseline), 6)
        meta["flop_speedup"] = round(pruned.flop_speedup_vs(baseline), 6)
        print("pruned per-step latency:")
        print(latency_table(pruned).to_string(index=False))
        print(_speedup_line(pruned, baseline))
        if meta["speedup"] < WALL_SPEEDUP_TARGET:
            log(f"bench: wall speedup {meta['speedup']:.3f}x below {WALL_SPEEDUP_TARGET}x", level="WARNING")

    meta["host"] = host_info()
    record = profile_record(cfg, baseline, pruned, host=meta["host"])
    results = append_profile_record(record, out / PROFILE_RESULTS_FILE)
    print(f"profiling record {len(results)} appended to {out / PROFILE_RESULTS_FILE}")
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_analyze(map_file: str, out_dir: Path) -> int:
    profile = spectrum_profile(read_map(map_file))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "spectrum.csv"
    profile.to_frame().to_csv(path, index=False, lineterminator="\n")
    print(f"dc_power={profile.dc_power:.6g} total_power={profile.total_power:.6g} -> {path}")
    return 0


def cmd_compare(baseline_csv: str, pruned_csv: str) -> int:
    baseline = read_metrics_csv(baseline_csv)
    pruned = read_metrics_csv(pruned_csv)
    print(_speedup_line(pruned, baseline))
    for b, p in zip(baseline.steps, pruned.steps):
        if b.forwarded_tokens != p.forwarded_tokens:
            print(f"step {p.step:>2} ({p.h}x{p.w}): forwarded {b.forwarded_tokens} -> {p.forwarded_tokens}")
    return 0


# ---------------------------
# CLI
# ---------------------------


def _fail(kind: str, message: str, code: int) -> int:
    flat = " ".join(str(message).split())
    print(f"error: {kind}: {flat}", file=sys.stderr)
    return code


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
    )


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "compare":
        return cmd_compare(args.baseline_csv, args.pruned_csv)
    if args.command == "analyze":
        out_dir = Path(args.out) if args.out else load_run_config().output_dir
        level = "DEBUG" if args.verbose else (args.log_level or "INFO")
        out_dir.mkdir(parents=True, exist_ok=True)
        setup_logger(LoggingSection(level=level, file=str(out_dir / LOG_FILE_NAME)))
        return cmd_analyze(args.map_file, out_dir)

    cfg = load_cli_config(args)
    _start_logging(cfg)
    if args.command == "generate":
        return cmd_generate(cfg, compare=args.compare, spectra=args.spectra)
    return cmd_bench(cfg, sweep=args.sweep)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except CliUsageError as exc:
        return _fail("usage", str(exc), EXIT_VALIDATION)
    except ValidationError as exc:
        return _fail("config", _validation_message(exc), EXIT_VALIDATION)
    except ConfigValidationError as exc:
        return _fail("config", str(exc), EXIT_VALIDATION)
    except FastVarError as exc:
        return _fail(exc.kind, str(exc), EXIT_VALIDATION)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
