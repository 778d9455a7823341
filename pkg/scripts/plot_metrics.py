"""Render Matplotlib plots for a run directory written by ``main.py``."""

from __future__ import annotations

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

REPO_ROOT = Path(__file__).resolve().parents[1]
RUN_DIR = REPO_ROOT / "output"


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Plot per-step latency, token counts and spectra of a run.")
    parser.add_argument("--dir", default=str(RUN_DIR), help="Run directory with baseline.csv / pruned.csv (default: output).")
    parser.add_argument("--plots-dir", default=None, help="Where to write PNGs (default: <dir>/plots).")
    return parser.parse_args(argv)


def load_step_rows(path: Path) -> pd.DataFrame:
    """Per-step rows of a metrics CSV; the total and speedup rows are dropped."""
    df = pd.read_csv(path, dtype={"step": str})
    df = df[df["step"].str.isdigit()].copy()
    for column in df.columns:
        df[column] = pd.to_numeric(df[column])
    return df.sort_values("step").reset_index(drop=True)


def plot_step_latency(runs: dict[str, pd.DataFrame]) -> tuple[plt.Figure, str]:
    fig, ax = plt.subplots(figsize=(10, 6))
    width = 0.8 / max(len(runs), 1)
    for i, (label, df) in enumerate(runs.items()):
        ax.bar(df["step"] + i * width, df["wall_ns"] / 1e6, width=width, label=label)
    ax.set_xlabel("scale step")
    ax.set_ylabel("wall time (ms)")
    ax.set_title("Per-step latency")
    ax.legend()
    return fig, "step_latency.png"


def plot_forwarded_tokens(runs: dict[str, pd.DataFrame]) -> tuple[plt.Figure, str]:
    fig, ax = plt.subplots(figsize=(10, 6))
    for label, df in runs.items():
        ax.plot(df["step"], df["forwarded_tokens"], marker="o", label=f"{label} forwarded")
        ax.plot(df["step"], df["kv_total"], linestyle="--", label=f"{label} kv total")
    ax.set_yscale("log")
    ax.set_xlabel("scale step")
    ax.set_ylabel("tokens")
    ax.set_title("Forwarded tokens and KV cache size")
    ax.legend()
    return fig, "tokens.png"


def plot_spectra(spectra: pd.DataFrame) -> tuple[plt.Figure, str]:
    fig, ax = plt.subplots(figsize=(10, 6))
    for step, group in spectra.groupby("step"):
        ax.plot(group["radius"], group["power"], label=f"step {step}")
    ax.set_yscale("log")
    ax.set_xlabel("radius (frequency bin)")
    ax.set_ylabel("power")
    ax.set_title("Radial power spectrum of intermediate predictions")
    ax.legend(fontsize="small", ncol=2)
    return fig, "spectra.png"


def save_figure(fig: plt.Figure, filename: str, plots_dir: Path) -> Path:
    plots_dir.mkdir(parents=True, exist_ok=True)
    path = plots_dir / filename
    fig.savefig(path, bbox_inches="tight", dpi=150)
    plt.close(fig)
    return path


def main(argv: list[str] | None = None) -> list[Path]:
    args = parse_args(argv)
    run_dir = Path(args.dir)
    plots_dir = Path(args.plots_dir) if args.plots_dir else run_dir / "plots"
    runs = {
        name: load_step_rows(run_dir / f"{name}.csv")
        for name in ("baseline", "pruned")
        if (run_dir / f"{name}.csv").exists()
    }
    if not runs:
        raise FileNotFoundError(f"No baseline.csv or pruned.csv in {run_dir}.")
    written = [
        save_figure(*plot_step_latency(runs), plots_dir),
        save_figure(*plot_forwarded_tokens(runs), plots_dir),
    ]
    spectra_path = run_dir / "spectra.csv"
    if spectra_path.exists():
        written.append(save_figure(*plot_spectra(pd.read_csv(spectra_path)), plots_dir))
    for path in written:
        print(f"wrote {path}")
    return written


if __name__ == "__main__":
    main()
