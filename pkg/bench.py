# bench.py
"""
Profiling and analysis harness.

Wall-clock timing with median-of-R aggregation, latency shares, radially
averaged spectra of token maps, pruned-slot mask images, output fidelity
against an unpruned run, and the ablation sweeps (scale sensitivity, caching
step, pruning ratio).
Each bench run also appends a host-tagged row to a profiling results CSV.
"""

from __future__ import annotations

import platform
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from config import ArgumentError, MapFormatError, RunConfig
from engine.fastvar import FastVarPruner, PruneDecision
from engine.logging_utils import create_engine_logger
from engine.numkern import HAS_NUMBA, IndexList, TokenMap
from engine.protocols import SublayerPruner
from engine.pyramid import ScaleSchedule
from engine.varnet import Model, generate, init_model
from metrics import RunMetrics, StepMetrics, flop_estimate

_logger = create_engine_logger("Bench")


# ---------------------------
# Timing
# ---------------------------


def measure_run(
    model: Model,
    sched: ScaleSchedule,
    seeds: tuple[int, int],
    pruner: SublayerPruner | None = None,
    repetitions: int = 5,
    label: str = "",
) -> RunMetrics:
    """
    Time every decode step over ``repetitions`` runs and report medians.

    ``seeds`` is (condition seed, sampling seed). Token and FLOP columns come
    from the first run; they are identical across runs.
    """
    if repetitions < 1:
        raise ArgumentError(f"repetitions must be >= 1, got {repetitions}")
    condition_seed, sampling_seed = seeds
    runs: list[RunMetrics] = []
    for rep in range(repetitions):
        result = generate(model, sched, condition_seed, sampling_seed, pruner=pruner, label=label)
        runs.append(result.metrics)
        _logger.log_performance(
            f"{label or 'run'} repetition {rep + 1}/{repetitions}", result.metrics.total_wall_ns
        )

    steps: list[StepMetrics] = []
    for i, first in enumerate(runs[0].steps):
        walls = [run.steps[i].wall_ns for run in runs]
        module_ns = {
            key: int(np.median([run.steps[i].module_ns.get(key, 0) for run in runs]))
            for key in first.module_ns
        }
        steps.append(
            StepMetrics(
                first.step,
                first.h,
                first.w,
                first.forwarded_tokens,
                first.kv_tokens_total,
                first.est_flops,
                int(np.median(walls)),
                first.skipped,
                module_ns,
            )
        )
    return RunMetrics(steps, label)


def latency_share(metrics: RunMetrics, last_n: int = 2) -> float:
    """Percentage of total wall time spent in the last ``last_n`` forwarded steps."""
    total = metrics.total_wall_ns
    if total == 0:
        return 0.0
    forwarded = [s for s in metrics.steps if not s.skipped]
    tail = forwarded[-last_n:] if last_n > 0 else []
    return 100.0 * sum(s.wall_ns for s in tail) / total


def latency_table(metrics: RunMetrics) -> pd.DataFrame:
    """Per-step wall time and its share of the run, plus module breakdown."""
    total = metrics.total_wall_ns or 1
    rows = []
    for s in metrics.steps:
        row: dict[str, object] = {
            "step": s.step,
            "side": f"{s.h}x{s.w}",
            "wall_ms": s.wall_ns / 1e6,
            "share_pct": 100.0 * s.wall_ns / total,
        }
        for key in ("attention", "ffn", "pts", "ctr"):
            row[f"{key}_ms"] = s.module_ns.get(key, 0) / 1e6
        rows.append(row)
    return pd.DataFrame.from_records(rows)


# ---------------------------
# Profiling records
# ---------------------------

WALL_SPEEDUP_TARGET = 1.3

PROFILE_COLUMNS: list[str] = [
    "date",
    "platform",
    "processor",
    "python",
    "numpy",
    "numba",
    "depth",
    "d",
    "d_ff",
    "final_side",
    "ratios",
    "repetitions",
    "latency_tail",
    "tail_share_pct",
    "wall_speedup",
    "flop_speedup",
]


def host_info() -> dict[str, str]:
    """Machine facts stored next to every recorded measurement."""
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": "yes" if HAS_NUMBA else "no",
    }


def profile_record(
    cfg: RunConfig,
    baseline: RunMetrics,
    pruned: RunMetrics | None = None,
    host: dict[str, str] | None = None,
    day: date | None = None,
) -> dict[str, object]:
    """One results row: host, model and schedule, tail latency share and speedups."""
    host = host_info() if host is None else host
    sched = cfg.schedule
    ratios = sched.ratios if cfg.pruning_enabled and sched.ratios is not None else []
    return {
        "date": (day or date.today()).isoformat(),
        **{key: host.get(key, "") for key in ("platform", "processor", "python", "numpy", "numba")},
        "depth": cfg.model.depth,
        "d": cfg.model.d,
        "d_ff": cfg.model.d_ff,
        "final_side": sched.sides[-1],
        "ratios": " ".join(f"{r:g}" for r in ratios),
        "repetitions": cfg.bench.repetitions,
        "latency_tail": cfg.bench.latency_tail,
        "tail_share_pct": round(latency_share(baseline, cfg.bench.latency_tail), 3),
        "wall_speedup": round(pruned.speedup_vs(baseline), 3) if pruned is not None else None,
        "flop_speedup": round(pruned.flop_speedup_vs(baseline), 3) if pruned is not None else None,
    }


def append_profile_record(record: dict[str, object], path: Path) -> pd.DataFrame:
    """Append ``record`` to the CSV at ``path``; the header is written with the first row."""
    row = pd.DataFrame.from_records([record], columns=PROFILE_COLUMNS)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    row.to_csv(path, mode="a", header=not exists, index=False, lineterminator="\n")
    return pd.read_csv(path)


# ---------------------------
# Spectrum
# ---------------------------


@dataclass(frozen=True, eq=False)
class SpectrumProfile:
    """Radially binned power: ``bins[r]`` sums the power of all frequencies at radius r."""

    bins: npt.NDArray[np.float64]
    dc_power: float
    total_power: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"radius": np.arange(len(self.bins)), "power": self.bins})


def _dft_matrix(n: int) -> npt.NDArray[np.complex128]:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def _signed_freqs(n: int) -> npt.NDArray[np.int64]:
    # 0, 1, ..., then the negative half, so values lie in [-n/2, n/2)
    k = np.arange(n, dtype=np.int64)
    return np.where(k < (n + 1) // 2, k, k - n)


def spectrum_profile(x: TokenMap) -> SpectrumProfile:
    """
    Radially binned power spectrum of a token map.

    Direct 2-D DFT per channel, |X|^2 / (h*w) averaged over channels, binned by
    round(sqrt(u^2 + v^2)) over centred frequencies. The bins then sum to the
    mean squared channel energy, (1/d) * sum(x^2).
    """
    values = x.data.astype(np.float64)
    coeffs = np.einsum("uy,yxc,vx->uvc", _dft_matrix(x.h), values, _dft_matrix(x.w))
    power = (np.abs(coeffs) ** 2).mean(axis=2) / (x.h * x.w)
    u = _signed_freqs(x.h)[:, None]
    v = _signed_freqs(x.w)[None, :]
    radius = np.floor(np.sqrt(u * u + v * v) + 0.5).astype(np.int64)
    bins = np.bincount(radius.ravel(), weights=power.ravel())
    return SpectrumProfile(bins=bins, dc_power=float(power[0, 0]), total_power=float(bins.sum()))


def step_spectra(history: Sequence[TokenMap]) -> pd.DataFrame:
    """Long-format (step, radius, power) spectra of every intermediate prediction."""
    frames = []
    for step, pred in enumerate(history, start=1):
        frame = spectrum_profile(pred).to_frame()
        frame.insert(0, "step", step)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["step", "radius", "power"])
    return pd.concat(frames, ignore_index=True)


# ---------------------------
# Masks
# ---------------------------


def export_mask(decision: PruneDecision, shape: tuple[int, int], path: str | Path) -> Path:
    """Binary PGM of a decision: kept tokens 255, pruned tokens 0, row-major."""
    h, w = shape
    if h * w != decision.total:
        raise ArgumentError(f"mask shape {shape} does not cover {decision.total} tokens")
    pixels = np.where(decision.indices.mask(), 255, 0).astype(np.uint8)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return out


_PGM_TOKEN = re.compile(rb"\s*(\S+)")


def read_mask(path: str | Path) -> tuple[IndexList, tuple[int, int]]:
    """
    Parse a mask written by ``export_mask`` back into its index set.

    Raises:
        MapFormatError: With the byte offset of the malformed field
    """
    data = Path(path).read_bytes()
    fields: list[int] = []
    pos = 0
    for name in ("magic", "width", "height", "maxval"):
        match = _PGM_TOKEN.match(data, pos)
        if match is None:
            raise MapFormatError(f"missing {name}", offset=pos, component="PGM")
        token, start = match.group(1), match.start(1)
        if name == "magic":
            if token != b"P5":
                raise MapFormatError("expected P5 magic", offset=start, component="PGM")
        else:
            if not token.isdigit():
                raise MapFormatError(f"bad {name} {token!r}", offset=start, component="PGM")
            fields.append(int(token))
        pos = match.end(1)
    width, height, maxval = fields
    if maxval != 255 or width < 1 or height < 1:
        raise MapFormatError("unsupported mask geometry or maxval", offset=pos, component="PGM")
    pos += 1  # single whitespace byte before the raster
    pixels = np.frombuffer(data[pos:], dtype=np.uint8)
    if pixels.size != width * height:
        raise MapFormatError(
            f"raster has {pixels.size} bytes, expected {width * height}", offset=len(data), component="PGM"
        )
    bad = np.flatnonzero((pixels != 0) & (pixels != 255))
    if bad.size:
        raise MapFormatError("mask pixels must be 0 or 255", offset=pos + int(bad[0]), component="PGM")
    return IndexList(np.flatnonzero(pixels == 255), width * height), (height, width)


# ---------------------------
# Fidelity and sweeps
# ---------------------------


def fidelity(pruned: TokenMap, baseline: TokenMap) -> dict[str, float]:
    """Output drift of a pruned run against the baseline run from the same seeds."""
    if pruned.data.shape != baseline.data.shape:
        raise ArgumentError(f"cannot compare maps {pruned.data.shape} and {baseline.data.shape}")
    diff = pruned.data.astype(np.float64) - baseline.data.astype(np.float64)
    ref = float(np.linalg.norm(baseline.data.astype(np.float64)))
    err = float(np.linalg.norm(diff))
    return {
        "max_abs": float(np.max(np.abs(diff))),
        "mse": float(np.mean(diff * diff)),
        "rel_l2": err / ref if ref > 0 else err,
    }


def _sweep_setup(cfg: RunConfig) -> tuple[Model, ScaleSchedule, TokenMap, RunMetrics]:
    sched = cfg.to_schedule()
    model = init_model(cfg.to_model_config(), sched.sizes)
    baseline = generate(model, sched, cfg.seeds.condition, cfg.seeds.sampling, label="baseline")
    return model, sched, baseline.final, flop_estimate(model.cfg, sched)


def default_sensitivity_groups(sched: ScaleSchedule, group_size: int = 2, count: int = 3) -> list[tuple[int, ...]]:
    """Consecutive step groups covering the last ``group_size * count`` steps."""
    first = max(2, sched.K - group_size * count + 1)
    steps = list(range(first, sched.K + 1))
    return [tuple(steps[i : i + group_size]) for i in range(0, len(steps), group_size)]


def scale_sensitivity_sweep(
    cfg: RunConfig,
    groups: Iterable[Sequence[int]] | None = None,
    ratios: Sequence[float] = (0.25, 0.5, 0.75),
) -> pd.DataFrame:
    """
    Prune one group of consecutive steps at a time.

    Every other step runs unpruned; the caching step is the step before the
    group. Reports the estimated-FLOP speedup and the fidelity per pair.
    """
    model, sched, reference, base_flops = _sweep_setup(cfg)
    group_list = [tuple(g) for g in groups] if groups is not None else default_sensitivity_groups(sched)
    rows = []
    for group in group_list:
        start = min(group)
        if start < 2 or max(group) > sched.K:
            raise ArgumentError(f"group {group} outside steps [2, {sched.K}]")
        n_prune = sched.K - start + 1
        for ratio in ratios:
            per_step = [ratio if step in group else 0.0 for step in range(start, sched.K + 1)]
            pruned_sched = ScaleSchedule(sched.sizes, n_prune, per_step, None, sched.mode)
            pruner = FastVarPruner(pruned_sched, progressive=False)
            run = generate(model, pruned_sched, cfg.seeds.condition, cfg.seeds.sampling, pruner=pruner)
            flops = flop_estimate(model.cfg, sched, pruned_sched)
            sides = "-".join(str(sched.size(step)[0]) for step in group)
            rows.append(
                {
                    "group": sides,
                    "ratio": ratio,
                    "flop_speedup": flops.flop_speedup_vs(base_flops),
                    **fidelity(run.final, reference),
                }
            )
    _logger.info(f"scale sensitivity sweep: {len(rows)} runs")
    return pd.DataFrame.from_records(rows)


def cache_step_sweep(cfg: RunConfig, offsets: Sequence[int] = (0, 1, 2, 3)) -> pd.DataFrame:
    """Fidelity of the configured pruning schedule with caching step K-N-j."""
    if not cfg.pruning_enabled:
        raise ArgumentError("cache step sweep needs a pruning schedule (ratios)")
    model, sched, reference, _ = _sweep_setup(cfg)
    last_structure = sched.K - sched.n_prune
    rows = []
    for offset in offsets:
        cache_step = last_structure - offset
        if cache_step < 1:
            _logger.warning(f"skipping offset {offset}: caching step {cache_step} < 1")
            continue
        swept = sched.with_cache_step(cache_step)
        run = generate(
            model, swept, cfg.seeds.condition, cfg.seeds.sampling, pruner=FastVarPruner(swept)
        )
        rows.append({"cache_step": cache_step, "offset": offset, **fidelity(run.final, reference)})
    return pd.DataFrame.from_records(rows)


def ratio_sweep(cfg: RunConfig, ratios: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)) -> pd.DataFrame:
    """Prune only the last step at each ratio; 1.0 skips it."""
    model, sched, reference, base_flops = _sweep_setup(cfg)
    rows = []
    for ratio in ratios:
        last_only = ScaleSchedule(sched.sizes, 1, [ratio], None, sched.mode)
        run = generate(
            model, last_only, cfg.seeds.condition, cfg.seeds.sampling, pruner=FastVarPruner(last_only)
        )
        flops = flop_estimate(model.cfg, sched, last_only)
        rows.append(
            {
                "ratio": ratio,
                "forwarded_last": run.metrics.steps[-1].forwarded_tokens,
                "flop_speedup": flops.flop_speedup_vs(base_flops),
                **fidelity(run.final, reference),
            }
        )
    return pd.DataFrame.from_records(rows)
