import cmath
import math
from datetime import date

import numpy as np
import pytest

import bench
from config import ArgumentError, MapFormatError, load_run_config
from engine.fastvar import FastVarPruner, PruneDecision, keep_count
from engine.numkern import IndexList, TokenMap
from engine.pyramid import ScaleSchedule
from engine.varnet import init_model
from metrics import RunMetrics, StepMetrics

SMALL_RUN = {
    "model": {"depth": 1, "d": 8, "heads": 2, "d_ff": 16, "vocab": 16},
    "schedule": {"sides": [1, 2, 3, 4, 6], "n_prune": 2, "ratios": [0.5, 0.75]},
}


def _oracle_spectrum(x: np.ndarray) -> np.ndarray:
    h, w, d = x.shape
    bins: dict[int, float] = {}
    for u in range(h):
        for v in range(w):
            power = 0.0
            for c in range(d):
                acc = 0j
                for yy in range(h):
                    for xx in range(w):
                        acc += float(x[yy, xx, c]) * cmath.exp(-2j * math.pi * (u * yy / h + v * xx / w))
                power += abs(acc) ** 2
            power /= d * h * w
            fu = u if u < (h + 1) // 2 else u - h
            fv = v if v < (w + 1) // 2 else v - w
            r = math.floor(math.sqrt(fu * fu + fv * fv) + 0.5)
            bins[r] = bins.get(r, 0.0) + power
    out = np.zeros(max(bins) + 1)
    for r, p in bins.items():
        out[r] = p
    return out


# ---------------------------
# Spectrum
# ---------------------------


def test_spectrum_of_constant_map_is_dc_only() -> None:
    profile = bench.spectrum_profile(TokenMap.constant(6, 6, 3, 2.0))
    assert profile.dc_power == pytest.approx(4.0 * 36)
    assert profile.bins[0] == pytest.approx(profile.total_power)
    assert np.allclose(profile.bins[1:], 0.0, atol=1e-9)


def test_spectrum_of_checkerboard_sits_at_max_radius() -> None:
    rows, cols = np.indices((8, 8))
    board = np.where((rows + cols) % 2 == 0, 1.0, -1.0).reshape(8, 8, 1)
    profile = bench.spectrum_profile(TokenMap(board))
    assert len(profile.bins) - 1 == 6
    assert int(np.argmax(profile.bins)) == 6
    assert profile.bins[6] == pytest.approx(profile.total_power)


def test_spectrum_of_column_cosine_peaks_at_radius_two() -> None:
    cols = np.tile(np.arange(8), (8, 1))
    wave = np.cos(2 * np.pi * cols / 4).reshape(8, 8, 1)
    profile = bench.spectrum_profile(TokenMap(wave))
    assert int(np.argmax(profile.bins)) == 2
    assert profile.bins[2] == pytest.approx(profile.total_power, rel=1e-6)


def test_spectrum_satisfies_parseval(rng) -> None:
    for _ in range(20):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        d = int(rng.integers(1, 4))
        x = rng.standard_normal((h, w, d)).astype(np.float32)
        profile = bench.spectrum_profile(TokenMap(x))
        energy = float((x.astype(np.float64) ** 2).sum()) / d
        assert profile.total_power == pytest.approx(energy, rel=1e-4)
        assert np.all(profile.bins >= 0.0)


@pytest.mark.parametrize("shape", [(1, 1, 2), (3, 5, 2), (4, 4, 1), (8, 6, 2)])
def test_spectrum_matches_direct_summation(rng, shape) -> None:
    x = rng.standard_normal(shape).astype(np.float32)
    got = bench.spectrum_profile(TokenMap(x)).bins
    want = _oracle_spectrum(x)
    assert len(got) == len(want)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-9)


def test_step_spectra_long_format() -> None:
    frame = bench.step_spectra([TokenMap.constant(1, 1, 2, 1.0), TokenMap.constant(2, 2, 2, 1.0)])
    assert list(frame.columns) == ["step", "radius", "power"]
    assert sorted(frame["step"].unique().tolist()) == [1, 2]
    assert bench.step_spectra([]).empty


# ---------------------------
# Masks
# ---------------------------


def test_mask_bytes_for_hand_decision(tmp_path) -> None:
    decision = PruneDecision(IndexList([0, 3], 4), ratio=0.5, total=4)
    path = bench.export_mask(decision, (2, 2), tmp_path / "m.pgm")
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([255, 0, 0, 255])


def test_keep_all_mask_is_white(tmp_path) -> None:
    decision = PruneDecision(IndexList.full(6), ratio=0.0, total=6)
    data = bench.export_mask(decision, (2, 3), tmp_path / "all.pgm").read_bytes()
    assert data.startswith(b"P5\n3 2\n255\n")
    assert set(data[len(b"P5\n3 2\n255\n") :]) == {255}


def test_mask_round_trip(tmp_path, rng) -> None:
    for case in range(100):
        h, w = (int(v) for v in rng.integers(1, 12, size=2))
        total = h * w
        ratio = float(rng.choice([0.0, 0.3, 0.5, 0.75, 0.9]))
        keep = keep_count(total, ratio)
        idx = IndexList(np.sort(rng.choice(total, size=keep, replace=False)), total)
        path = bench.export_mask(PruneDecision(idx, ratio, total), (h, w), tmp_path / f"m{case}.pgm")
        parsed, shape = bench.read_mask(path)
        assert shape == (h, w)
        assert parsed.tolist() == idx.tolist()


def test_export_mask_rejects_wrong_shape(tmp_path) -> None:
    decision = PruneDecision(IndexList([0, 3], 4), ratio=0.5, total=4)
    with pytest.raises(ArgumentError):
        bench.export_mask(decision, (3, 2), tmp_path / "bad.pgm")


@pytest.mark.parametrize(
    "payload,offset",
    [
        (b"P6\n2 2\n255\n" + bytes(4), 0),
        (b"P5\nx 2\n255\n" + bytes(4), 3),
        (b"P5\n2 2\n255\n" + bytes(3), 14),
        (b"P5\n2 2\n255\n" + bytes([255, 7, 0, 0]), 12),
    ],
)
def test_read_mask_reports_error_offsets(tmp_path, payload, offset) -> None:
    path = tmp_path / "broken.pgm"
    path.write_bytes(payload)
    with pytest.raises(MapFormatError) as excinfo:
        bench.read_mask(path)
    assert excinfo.value.offset == offset


# ---------------------------
# Timing
# ---------------------------


class _FakeResult:
    def __init__(self, metrics: RunMetrics):
        self.metrics = metrics


def test_measure_run_reports_per_step_medians(monkeypatch) -> None:
    walls = iter([(10, 100), (30, 300), (20, 200)])

    def fake_generate(*_args, **_kwargs):
        first, second = next(walls)
        return _FakeResult(
            RunMetrics(
                [
                    StepMetrics(1, 1, 1, 1, 1, 72, wall_ns=first, module_ns={"attention": first}),
                    StepMetrics(2, 2, 2, 4, 5, 400, wall_ns=second, module_ns={"attention": second}),
                ]
            )
        )

    monkeypatch.setattr(bench, "generate", fake_generate)
    sched = ScaleSchedule.from_sides([1, 2], n_prune=1)
    metrics = bench.measure_run(None, sched, (1, 2), repetitions=3, label="fake")  # type: ignore[arg-type]
    assert [s.wall_ns for s in metrics.steps] == [20, 200]
    assert metrics.step(2).module_ns == {"attention": 200}
    assert metrics.label == "fake"


def test_measure_run_rejects_zero_repetitions(tiny_cfg) -> None:
    sched = ScaleSchedule.from_sides([1, 2], n_prune=1)
    with pytest.raises(ArgumentError):
        bench.measure_run(init_model(tiny_cfg), sched, (1, 2), repetitions=0)


def test_skipped_steps_are_cheaper_than_large_forwarded_steps(tiny_cfg) -> None:
    sched = ScaleSchedule.from_sides([1, 2, 4, 8, 12], n_prune=2, prune_ratios=[0.0, 1.0])
    model = init_model(tiny_cfg, sched.sizes)
    metrics = bench.measure_run(model, sched, (1, 2), pruner=FastVarPruner(sched), repetitions=3)
    assert metrics.step(5).skipped
    assert metrics.step(5).wall_ns < metrics.step(4).wall_ns


def test_latency_share_and_table() -> None:
    metrics = RunMetrics(
        [
            StepMetrics(1, 1, 1, 1, 1, 0, wall_ns=100),
            StepMetrics(2, 2, 2, 4, 5, 0, wall_ns=100),
            StepMetrics(3, 3, 3, 9, 14, 0, wall_ns=300),
            StepMetrics(4, 4, 4, 16, 30, 0, wall_ns=500),
        ]
    )
    assert bench.latency_share(metrics) == pytest.approx(80.0)
    assert bench.latency_share(metrics, last_n=1) == pytest.approx(50.0)
    assert bench.latency_share(RunMetrics()) == 0.0
    table = bench.latency_table(metrics)
    assert table["share_pct"].sum() == pytest.approx(100.0)
    assert table["side"].tolist() == ["1x1", "2x2", "3x3", "4x4"]


def test_latency_share_ignores_skipped_steps() -> None:
    metrics = RunMetrics(
        [
            StepMetrics(1, 1, 1, 1, 1, 0, wall_ns=200),
            StepMetrics(2, 2, 2, 4, 5, 0, wall_ns=800),
            StepMetrics(3, 3, 3, 0, 5, 0, wall_ns=0, skipped=True),
        ]
    )
    assert bench.latency_share(metrics, last_n=1) == pytest.approx(80.0)


def test_profile_record_carries_share_and_speedups() -> None:
    cfg = load_run_config(SMALL_RUN)
    baseline = RunMetrics(
        [
            StepMetrics(1, 1, 1, 1, 1, 10, wall_ns=100),
            StepMetrics(2, 2, 2, 4, 5, 40, wall_ns=300),
            StepMetrics(3, 3, 3, 9, 14, 90, wall_ns=600),
        ]
    )
    pruned = RunMetrics(
        [
            StepMetrics(1, 1, 1, 1, 1, 10, wall_ns=100),
            StepMetrics(2, 2, 2, 2, 3, 20, wall_ns=150),
            StepMetrics(3, 3, 3, 0, 3, 0, wall_ns=50, skipped=True),
        ]
    )
    host = {
        "platform": "Linux-test",
        "processor": "x86_64",
        "python": "3.11.9",
        "numpy": "1.26.4",
        "numba": "no",
    }
    record = bench.profile_record(cfg, baseline, pruned, host=host, day=date(2026, 1, 2))
    assert list(record) == bench.PROFILE_COLUMNS
    assert record["date"] == "2026-01-02"
    assert record["platform"] == "Linux-test"
    assert record["ratios"] == "0.5 0.75"
    assert (record["depth"], record["d"], record["final_side"]) == (1, 8, 6)
    assert record["tail_share_pct"] == pytest.approx(90.0)
    assert record["wall_speedup"] == pytest.approx(3.333)
    assert record["flop_speedup"] == pytest.approx(4.667)


def test_profile_record_without_pruned_run_leaves_speedups_empty() -> None:
    baseline = RunMetrics([StepMetrics(1, 1, 1, 1, 1, 10, wall_ns=100)])
    record = bench.profile_record(load_run_config(SMALL_RUN), baseline)
    assert record["wall_speedup"] is None and record["flop_speedup"] is None
    assert record["numba"] in ("yes", "no")


def test_append_profile_record_writes_header_once(tmp_path) -> None:
    baseline = RunMetrics([StepMetrics(1, 1, 1, 1, 1, 10, wall_ns=100)])
    record = bench.profile_record(load_run_config(SMALL_RUN), baseline)
    path = tmp_path / "results" / "profile_results.csv"
    bench.append_profile_record(record, path)
    frame = bench.append_profile_record(record, path)
    assert list(frame.columns) == bench.PROFILE_COLUMNS
    assert len(frame) == 2
    assert path.read_text(encoding="utf-8").count("tail_share_pct") == 1


# ---------------------------
# Fidelity and sweeps
# ---------------------------


def test_fidelity_values() -> None:
    base = TokenMap(np.array([3.0, 4.0], dtype=np.float32).reshape(1, 2, 1))
    assert bench.fidelity(base, base) == {"max_abs": 0.0, "mse": 0.0, "rel_l2": 0.0}
    drifted = TokenMap(np.array([3.0, 3.0], dtype=np.float32).reshape(1, 2, 1))
    scores = bench.fidelity(drifted, base)
    assert scores["max_abs"] == pytest.approx(1.0)
    assert scores["mse"] == pytest.approx(0.5)
    assert scores["rel_l2"] == pytest.approx(0.2)
    with pytest.raises(ArgumentError):
        bench.fidelity(TokenMap.zeros(1, 1, 1), base)


def test_ratio_sweep_on_last_step() -> None:
    frame = bench.ratio_sweep(load_run_config(SMALL_RUN))
    assert frame["ratio"].tolist() == [0.0, 0.25, 0.5, 0.75, 0.9, 1.0]
    assert frame.loc[0, "max_abs"] == 0.0
    assert frame.loc[0, "flop_speedup"] == pytest.approx(1.0)
    assert frame["forwarded_last"].tolist()[-1] == 0
    assert frame["flop_speedup"].is_monotonic_increasing


def test_cache_step_sweep_stops_at_first_step() -> None:
    frame = bench.cache_step_sweep(load_run_config(SMALL_RUN))
    assert frame["cache_step"].tolist() == [3, 2, 1]
    assert (frame["max_abs"] >= 0).all()


def test_cache_step_sweep_needs_pruning() -> None:
    unpruned = load_run_config({**SMALL_RUN, "schedule": {"sides": [1, 2, 3], "n_prune": 1}})
    with pytest.raises(ArgumentError):
        bench.cache_step_sweep(unpruned)


def test_scale_sensitivity_sweep_groups() -> None:
    cfg = load_run_config(SMALL_RUN)
    assert bench.default_sensitivity_groups(cfg.to_schedule()) == [(2, 3), (4, 5)]
    frame = bench.scale_sensitivity_sweep(cfg, ratios=(0.5,))
    assert frame["group"].tolist() == ["2-3", "4-6"]
    assert (frame["flop_speedup"] > 1.0).all()
    with pytest.raises(ArgumentError):
        bench.scale_sensitivity_sweep(cfg, groups=[(1, 2)])
