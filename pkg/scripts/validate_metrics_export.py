"""Validate that CSV reports represent the in-memory RunMetrics.

Consistency check for the report path:
- run a short seeded baseline and pruned generation
- export metrics through ``metrics.metrics_report``
- rebuild expected DataFrames from the in-memory step metrics
- reload the CSVs and compare

Run:
  python scripts/validate_metrics_export.py [--out DIR]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

# Allow running as a script without installing the package.
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import pandas as pd  # noqa: E402
from pandas.testing import assert_frame_equal  # noqa: E402

from config import load_run_config  # noqa: E402
from engine.fastvar import FastVarPruner  # noqa: E402
from engine.varnet import generate, init_model  # noqa: E402
from metrics import REPORT_COLUMNS, RunMetrics, metrics_report, read_metrics_csv  # noqa: E402

SMALL_RUN = {
    "model": {"depth": 1, "d": 8, "heads": 2, "d_ff": 16, "vocab": 16},
    "schedule": {"sides": [1, 2, 4, 6], "n_prune": 2, "ratios": [0.5, 0.75]},
}


def expected_frame(metrics: RunMetrics) -> pd.DataFrame:
    return metrics.to_frame()[REPORT_COLUMNS].reset_index(drop=True)


def reloaded_frame(path: Path) -> pd.DataFrame:
    return read_metrics_csv(path).to_frame()[REPORT_COLUMNS].reset_index(drop=True)


def validate(out_dir: Path) -> None:
    cfg = load_run_config(SMALL_RUN)
    sched = cfg.to_schedule()
    model = init_model(cfg.to_model_config(), sched.sizes)
    baseline = generate(model, sched, cfg.seeds.condition, cfg.seeds.sampling, label="baseline")
    pruned = generate(
        model, sched, cfg.seeds.condition, cfg.seeds.sampling, pruner=FastVarPruner(sched), label="pruned"
    )
    for name, metrics, ref in (("baseline", baseline.metrics, None), ("pruned", pruned.metrics, baseline.metrics)):
        path = metrics_report(metrics, out_dir / f"{name}.csv", baseline=ref)
        assert_frame_equal(expected_frame(metrics), reloaded_frame(path), check_dtype=False)
        print(f"{name}: {len(metrics.steps)} steps match {path}")


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(ROOT / "output" / "validate_export"))
    args = parser.parse_args(argv)
    validate(Path(args.out))


if __name__ == "__main__":
    main()
