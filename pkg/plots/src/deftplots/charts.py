"""The five chart kinds rendered from metrics artifacts.

Every function takes the loaded runs and an output path and writes one
image.  Density charts draw a horizontal reference at each configured
density; the speedup chart draws the linear-speedup reference.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import PHASE_COLUMNS, RunArtifact, SchemaError, configured_densities

CHART_KINDS = (
    "density_vs_workers",
    "density_vs_iteration",
    "error_vs_iteration",
    "speedup_vs_workers",
    "time_breakdown_bars",
)


def _require_config(runs: list[RunArtifact], chart: str) -> None:
    missing = [r.name for r in runs if r.config is None]
    if missing:
        raise SchemaError(
            f"{chart} needs the sibling summary JSON for run metadata; missing for: {', '.join(missing)}"
        )


def _density_reference(ax, runs: list[RunArtifact]) -> None:
    for d in configured_densities(runs):
        ax.axhline(d, linestyle="--", color="gray", linewidth=1, label=f"target d={d:g}")


def density_vs_workers(runs: list[RunArtifact], out: Path) -> None:
    _require_config(runs, "density_vs_workers")
    series: dict[str, dict[int, float]] = defaultdict(dict)
    for r in runs:
        series[r.kind][r.n_workers] = float(np.mean(r.columns["actual_density"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in sorted(series):
        ns = sorted(series[kind])
        ax.plot(ns, [series[kind][n] for n in ns], marker="o", label=kind)
    _density_reference(ax, runs)
    ax.set_xlabel("workers (count)")
    ax.set_ylabel("mean actual density (selected fraction)")
    ax.set_xscale("log", base=2)
    ax.set_title("Actual density vs cluster size")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def density_vs_iteration(runs: list[RunArtifact], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in runs:
        ax.plot(r.columns["iteration"], r.columns["actual_density"], label=r.name, linewidth=0.9)
    _density_reference(ax, runs)
    ax.set_xlabel("iteration")
    ax.set_ylabel("actual density (selected fraction)")
    ax.set_title("Actual density over training")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def error_vs_iteration(runs: list[RunArtifact], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in runs:
        ax.plot(r.columns["iteration"], r.columns["error_norm"], label=r.name, linewidth=0.9)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean residual L2 norm (gradient units)")
    ax.set_yscale("log")
    ax.set_title("Error-feedback residual over training")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def speedup_vs_workers(runs: list[RunArtifact], out: Path) -> None:
    _require_config(runs, "speedup_vs_workers")
    measured: dict[int, float] = {}
    analytic: dict[int, float] = {}
    for r in runs:
        f_n = r.columns["f_n"]
        if np.all(np.isnan(f_n)):
            continue
        n = r.n_workers
        measured[n] = float(np.nanmean(f_n))
        f_triv = r.columns["f_trivial"]
        if not np.all(np.isnan(f_triv)):
            analytic[n] = float(np.nanmean(f_triv))
    if not measured:
        raise SchemaError("no runs carry f_n values; nothing to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = sorted(measured)
    ax.plot(ns, [measured[n] for n in ns], marker="o", label="measured f(n)")
    if analytic:
        na = sorted(analytic)
        ax.plot(na, [analytic[n] for n in na], marker="s", label="equal-split baseline f_trivial(n)")
    ax.plot(ns, ns, linestyle="--", color="gray", linewidth=1, label="linear speedup")
    ax.set_xlabel("workers (count)")
    ax.set_ylabel("selection speedup over one global top-k (ratio)")
    ax.set_xscale("log", base=2)
    ax.set_title("Selection-cost speedup vs cluster size")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def time_breakdown_bars(runs: list[RunArtifact], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(runs)), 4))
    bottoms = np.zeros(len(runs))
    xs = np.arange(len(runs))
    for phase in PHASE_COLUMNS:
        heights = np.array([float(np.mean(r.columns[phase])) for r in runs])
        ax.bar(xs, heights, bottom=bottoms, label=phase.removeprefix("t_"))
        bottoms += heights
    ax.set_xticks(xs)
    ax.set_xticklabels([r.name for r in runs], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("mean wall seconds per iteration")
    ax.set_title("Training time breakdown")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


RENDERERS = {
    "density_vs_workers": density_vs_workers,
    "density_vs_iteration": density_vs_iteration,
    "error_vs_iteration": error_vs_iteration,
    "speedup_vs_workers": speedup_vs_workers,
    "time_breakdown_bars": time_breakdown_bars,
}


def render(kind: str, runs: list[RunArtifact], out: Path) -> Path:
    if kind not in RENDERERS:
        raise SchemaError(f"unknown chart kind {kind!r}; expected one of {CHART_KINDS}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    RENDERERS[kind](runs, out)
    return out
