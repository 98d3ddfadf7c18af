"""Measured and analytic run metrics, plus the CSV/JSON artifact schemas.

Cost conventions: bin-packing weights and the reported speedups use
``size * log2(k + 1)`` so single-gradient layers stay defined; the
closed-form trivial-partitioning speedup is also available in its raw
``log2(k)`` form (only defined for k > n) for analytic spot checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CSV_COLUMNS = [
    "iteration", "actual_density", "error_norm", "loss", "acc",
    "t_forward", "t_backward", "t_select", "t_comm", "t_partition",
    "C_n", "f_n", "f_trivial", "bytes_idx", "bytes_grad",
]


@dataclass
class IterationMetrics:
    iteration: int
    actual_density: float
    error_norm: float
    loss: float
    accuracy: float | None
    t_forward: float
    t_backward: float
    t_select: float
    t_comm: float
    t_partition: float
    t_total: float
    worker_costs: tuple[float, ...]
    c_n: float
    f_n: float | None
    f_trivial: float | None
    bytes_idx: int
    bytes_grad: int

    def csv_row(self) -> list[str]:
        return [
            str(self.iteration),
            _fmt(self.actual_density), _fmt(self.error_norm), _fmt(self.loss), _fmt(self.accuracy),
            _fmt(self.t_forward), _fmt(self.t_backward), _fmt(self.t_select),
            _fmt(self.t_comm), _fmt(self.t_partition),
            _fmt(self.c_n), _fmt(self.f_n), _fmt(self.f_trivial),
            str(self.bytes_idx), str(self.bytes_grad),
        ]


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def measure_density(union: np.ndarray | int, n_total: int) -> float:
    """Fraction of coordinates actually synchronized this iteration."""
    size = union if isinstance(union, int) else int(np.asarray(union).size)
    return size / n_total


def measure_error(error_norms: Sequence[float]) -> float:
    """Mean of the workers' residual L2 norms."""
    return float(sum(error_norms) / len(error_norms))


def full_selection_cost(n_total: int, k: int) -> float:
    """Cost of one global top-k over the whole vector."""
    return n_total * math.log2(k + 1)


@dataclass(frozen=True)
class CostSummary:
    worker_costs: tuple[float, ...]
    c_n: float
    f_n: float | None
    c_trivial: float | None
    f_trivial: float | None


def cost_model(worker_costs: Sequence[float], n_total: int, k: int, n_workers: int) -> CostSummary:
    """Per-worker selection costs rolled up into the speedup figures.

    ``C(n)`` is the slowest worker's cost; ``f(n)`` compares it to one
    global top-k; the trivial variants assume the vector were split into
    ``n_workers`` equal parts with k split evenly too.  ``f_trivial`` is
    absent when k < n_workers (no budget left per part).
    """
    costs = tuple(float(c) for c in worker_costs)
    c_n = max(costs)
    full = full_selection_cost(n_total, k)
    f_n = full / c_n if c_n > 0 else None
    if k >= n_workers:
        c_trivial = (n_total / n_workers) * math.log2(k / n_workers + 1)
        f_trivial = full / c_trivial
    else:
        c_trivial = None
        f_trivial = None
    return CostSummary(costs, c_n, f_n, c_trivial, f_trivial)


def raw_trivial_speedup(n_workers: int, k: int) -> float:
    """Closed-form trivial-partitioning speedup, raw log2(k) convention.

    Equals ``n * log2(k) / log2(k / n)``; the vector length cancels.
    Only defined when each of the n parts keeps a budget above one.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if k <= n_workers:
        raise ValueError("raw form undefined for k <= n_workers")
    return n_workers * math.log2(k) / math.log2(k / n_workers)


@dataclass(frozen=True)
class PhaseBreakdown:
    means: dict[str, float]
    mean_total: float
    partition_share: float


def time_breakdown(metrics: Sequence[IterationMetrics]) -> PhaseBreakdown:
    """Mean seconds per phase across iterations, slowest-worker convention."""
    n = len(metrics)
    means = {
        "forward": sum(m.t_forward for m in metrics) / n,
        "backward": sum(m.t_backward for m in metrics) / n,
        "select": sum(m.t_select for m in metrics) / n,
        "comm": sum(m.t_comm for m in metrics) / n,
        "partition": sum(m.t_partition for m in metrics) / n,
    }
    mean_total = sum(m.t_total for m in metrics) / n
    share = means["partition"] / mean_total if mean_total > 0 else 0.0
    return PhaseBreakdown(means=means, mean_total=mean_total, partition_share=share)


class MetricsCsvWriter:
    """Streams one row per iteration so partial runs still leave a file."""

    def __init__(self, path) -> None:
        self._fh = open(path, "w", newline="")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")

    def write(self, m: IterationMetrics) -> None:
        self._fh.write(",".join(m.csv_row()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsCsvWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_metrics_csv(path, metrics: Sequence[IterationMetrics]) -> None:
    with MetricsCsvWriter(path) as writer:
        for m in metrics:
            writer.write(m)


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
