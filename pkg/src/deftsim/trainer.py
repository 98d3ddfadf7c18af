"""Data-parallel SGD with error feedback over simulated collectives.

Each iteration, every worker accumulates its residual plus the scaled
fresh gradient, picks indices with the configured sparsifier, gathers
the global index union, all-reduces the accumulated values at those
indices, applies the averaged update, and keeps the unsent mass as next
iteration's residual.  Workers run under either scheduler; results are
identical.

``run_dense_reference`` is the no-sparsification oracle: same model,
same per-worker RNG streams, plain synchronous SGD with a rank-ordered
gradient fold, written without any of the selection or collective
machinery so equivalence tests mean something.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Generator

import numpy as np

from .collectives import (
    AllGather,
    AllReduce,
    CollectiveLedger,
    PhaseTimer,
    analytic_comm_cost,
    make_scheduler,
)
from .kernels import l2_norm
from .metrics import IterationMetrics, cost_model, measure_density, measure_error
from .models import (
    BlockQuadraticSpec,
    MlpSpec,
    NumericFault,
    Workload,
    build_workload,
    compute_gradient,
)
from .partition import ModelLayout
from .sparsifiers import SelectionContext, SparsifierConfig, run_selection

MODES = ("lockstep", "concurrent")


@dataclass(frozen=True)
class TrainConfig:
    n_workers: int
    iterations: int
    lr: float
    lr_decay_at: int | None = None
    lr_decay_factor: float = 0.1
    batch_size: int = 1
    mode: str = "lockstep"
    strict_alg1: bool = True
    timing: bool = True
    record_trajectory: bool = False

    def __post_init__(self) -> None:
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def eta(self, iteration: int) -> float:
        if self.lr_decay_at is not None and iteration >= self.lr_decay_at:
            return self.lr * self.lr_decay_factor
        return self.lr


@dataclass(frozen=True)
class RunConfig:
    model: BlockQuadraticSpec | MlpSpec
    train: TrainConfig
    sparsifier: SparsifierConfig
    seed: int
    alpha: float = 1.0
    beta: float = 0.001


@dataclass
class WorkerState:
    rank: int
    x: np.ndarray
    error: np.ndarray
    rng: np.random.Generator


@dataclass
class IterationDetail:
    """Partitioned-selection bookkeeping kept out of the CSV schema."""

    iteration: int
    budget_totals: tuple[int, ...]       # each worker's sum of local_k over all layers
    own_k_totals: tuple[int, ...]        # selected counts per worker (allocated layers)
    delegate_costs: np.ndarray           # delegate's per-layer cost vector
    bin_of_layer: np.ndarray             # delegate's allocation, one bin id per layer

    def bin_totals(self, n_workers: int) -> np.ndarray:
        return np.bincount(self.bin_of_layer, weights=self.delegate_costs, minlength=n_workers)


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[IterationMetrics]
    details: list[IterationDetail]
    ledger: CollectiveLedger
    final_x: np.ndarray
    final_errors: list[np.ndarray]
    final_loss: float
    final_accuracy: float | None
    trajectory: list[np.ndarray] = field(default_factory=list)

    def mean_density(self) -> float:
        return sum(m.actual_density for m in self.metrics) / len(self.metrics)

    def effective_k(self) -> float:
        """Mean per-iteration effective k for the analytic comm model."""
        n_total = model_layout(self.config.model).n_total
        if self.config.sparsifier.kind == "deft":
            return sum(max(d.own_k_totals) for d in self.details) / len(self.details)
        if self.config.sparsifier.kind == "cltk":
            return float(self.config.sparsifier.target_k(n_total))
        # build-up included: the synchronized union
        return sum(m.actual_density * n_total for m in self.metrics) / len(self.metrics)

    def summary(self, config_dict: dict | None = None) -> dict:
        cfg = self.config
        n = cfg.train.n_workers
        mean_f_n = _mean_present([m.f_n for m in self.metrics])
        mean_f_trivial = _mean_present([m.f_trivial for m in self.metrics])
        return {
            "config": config_dict if config_dict is not None else _config_dict(cfg),
            "iterations": len(self.metrics),
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "final_error_norm": self.metrics[-1].error_norm,
            "mean_density": self.mean_density(),
            "speedup": {
                "mean_f_n": mean_f_n,
                "mean_f_trivial": mean_f_trivial,
                "analytic_comm_cost": analytic_comm_cost(n, self.effective_k(), cfg.alpha, cfg.beta),
            },
            "bytes": {
                "index": sum(m.bytes_idx for m in self.metrics),
                "gradient": sum(m.bytes_grad for m in self.metrics),
            },
        }


def _mean_present(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def _config_dict(cfg: RunConfig) -> dict:
    out = {
        "model": {"kind": cfg.model.kind, **asdict(cfg.model)},
        "train": asdict(cfg.train),
        "sparsifier": asdict(cfg.sparsifier),
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
    }
    return out


def model_layout(spec: BlockQuadraticSpec | MlpSpec) -> ModelLayout:
    """Layout of a model spec without building its data."""
    rng = np.random.default_rng(0)
    return build_workload(spec, rng).layout


def make_streams(seed: int, n_workers: int) -> tuple[np.random.Generator, list[np.random.Generator]]:
    """One model/init stream plus one independent stream per worker."""
    children = np.random.SeedSequence(seed).spawn(n_workers + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def _own_values(acc: np.ndarray, union: np.ndarray, own: np.ndarray, strict: bool) -> np.ndarray:
    """This worker's contribution at the union indices.

    Strict mode reads the accumulator verbatim, so residuals stored at
    indices other workers picked are contributed too.  Zero-fill mode
    contributes only at this worker's own picks.
    """
    values = acc[union]
    if strict:
        return values
    pos = np.searchsorted(own, union)
    pos = np.minimum(pos, max(own.size - 1, 0))
    member = (own.size > 0) & (own[pos] == union) if own.size else np.zeros(union.size, dtype=bool)
    return np.where(member, values, 0.0)


def _worker_iteration(
    model: Workload,
    worker: WorkerState,
    iteration: int,
    eta: float,
    cfg: RunConfig,
    ctx: SelectionContext,
) -> Generator[Any, Any, dict]:
    train = cfg.train
    batch = model.sample_batch(worker.rng, train.batch_size)
    batch_loss = model.forward(worker.x, batch)
    ctx.timer.mark("forward")

    grad = compute_gradient(model, worker.x, batch)
    acc = worker.error + eta * grad
    ctx.timer.mark("backward")

    selection, detail = yield from run_selection(cfg.sparsifier, acc, ctx)

    union = yield AllGather(selection.indices)
    values = _own_values(acc, union, selection.indices, train.strict_alg1)
    summed = yield AllReduce(values)

    worker.x[union] -= summed / train.n_workers
    if train.strict_alg1:
        acc[union] = 0.0
    else:
        acc[selection.indices] = 0.0
    worker.error = acc
    ctx.timer.mark("comm")

    return {
        "batch_loss": batch_loss,
        "union_size": int(union.size),
        "own_k": selection.local_k_total,
        "sel_cost": selection.selection_cost,
        "detail": detail,
    }


def run_training(
    cfg: RunConfig,
    on_iteration: Callable[[IterationMetrics], None] | None = None,
) -> RunResult:
    """Execute the configured run; fully deterministic given the seed."""
    train = cfg.train
    n = train.n_workers
    model_rng, worker_rngs = make_streams(cfg.seed, n)
    model = build_workload(cfg.model, model_rng)
    layout = model.layout
    n_total = layout.n_total

    if cfg.sparsifier.kind != "hard_threshold":
        k_target = cfg.sparsifier.target_k(n_total)
    else:
        k_target = None
    if n > n_total:
        raise ValueError("more workers than parameters")

    x0 = model.init_params(model_rng)
    workers = [
        WorkerState(rank=r, x=x0.copy(), error=np.zeros(n_total), rng=worker_rngs[r])
        for r in range(n)
    ]

    ledger = CollectiveLedger()
    scheduler = make_scheduler(train.mode, n, ledger, timing=train.timing)

    metrics: list[IterationMetrics] = []
    details: list[IterationDetail] = []
    trajectory: list[np.ndarray] = []

    for t in range(train.iterations):
        eta = train.eta(t)
        timers = [PhaseTimer(train.timing) for _ in range(n)]
        contexts = [SelectionContext(t, r, n, layout, timers[r]) for r in range(n)]
        ledger_mark = len(ledger.records)

        gens = [
            _worker_iteration(model, workers[r], t, eta, cfg, contexts[r])
            for r in range(n)
        ]
        outcome = scheduler.run_iteration(gens, timers, t)
        results = outcome.results

        x_ref = workers[0].x
        for w in workers[1:]:
            if not np.array_equal(w.x, x_ref):
                raise RuntimeError(f"replica divergence at iteration {t}")

        error_norms = [l2_norm(w.error) for w in workers]
        error_norm = measure_error(error_norms)
        loss = model.full_loss(x_ref)
        accuracy = model.full_accuracy(x_ref)
        if not np.isfinite(loss) or not np.isfinite(error_norm):
            raise NumericFault(f"non-finite loss or error at iteration {t}")

        worker_costs = tuple(res["sel_cost"] for res in results)
        if k_target is not None:
            summary = cost_model(worker_costs, n_total, k_target, n)
            c_n, f_n, f_trivial = summary.c_n, summary.f_n, summary.f_trivial
        else:
            c_n, f_n, f_trivial = max(worker_costs), None, None

        bytes_idx, bytes_grad = ledger.bytes_since(ledger_mark)
        phase = lambda name: max(tm.phases.get(name, 0.0) for tm in timers)  # noqa: E731
        row = IterationMetrics(
            iteration=t,
            actual_density=measure_density(results[0]["union_size"], n_total),
            error_norm=error_norm,
            loss=loss,
            accuracy=accuracy,
            t_forward=phase("forward"),
            t_backward=phase("backward"),
            t_select=phase("select"),
            t_comm=phase("comm"),
            t_partition=phase("partition"),
            t_total=max(outcome.elapsed) if train.timing else 0.0,
            worker_costs=worker_costs,
            c_n=c_n,
            f_n=f_n,
            f_trivial=f_trivial,
            bytes_idx=bytes_idx,
            bytes_grad=bytes_grad,
        )
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(row)

        if cfg.sparsifier.kind == "deft":
            delegate = t % n
            det = results[delegate]["detail"]
            details.append(
                IterationDetail(
                    iteration=t,
                    budget_totals=tuple(res["detail"].budget_total for res in results),
                    own_k_totals=tuple(res["own_k"] for res in results),
                    delegate_costs=det.delegate_costs,
                    bin_of_layer=det.bin_of_layer,
                )
            )

        if train.record_trajectory:
            trajectory.append(x_ref.copy())

    final_x = workers[0].x
    return RunResult(
        config=cfg,
        metrics=metrics,
        details=details,
        ledger=ledger,
        final_x=final_x,
        final_errors=[w.error for w in workers],
        final_loss=metrics[-1].loss,
        final_accuracy=metrics[-1].accuracy,
        trajectory=trajectory,
    )


def run_dense_reference(cfg: RunConfig) -> RunResult:
    """Plain synchronous SGD with the same streams; the equivalence oracle."""
    train = cfg.train
    n = train.n_workers
    model_rng, worker_rngs = make_streams(cfg.seed, n)
    model = build_workload(cfg.model, model_rng)
    x = model.init_params(model_rng)

    metrics: list[IterationMetrics] = []
    trajectory: list[np.ndarray] = []
    for t in range(train.iterations):
        eta = train.eta(t)
        total = None
        for r in range(n):
            batch = model.sample_batch(worker_rngs[r], train.batch_size)
            scaled = eta * compute_gradient(model, x, batch)
            if total is None:
                total = scaled
            else:
                total += scaled
        x -= total / n

        loss = model.full_loss(x)
        accuracy = model.full_accuracy(x)
        if not np.isfinite(loss):
            raise NumericFault(f"non-finite loss at iteration {t}")
        metrics.append(
            IterationMetrics(
                iteration=t, actual_density=1.0, error_norm=0.0,
                loss=loss, accuracy=accuracy,
                t_forward=0.0, t_backward=0.0, t_select=0.0, t_comm=0.0,
                t_partition=0.0, t_total=0.0,
                worker_costs=(0.0,) * n, c_n=0.0, f_n=None, f_trivial=None,
                bytes_idx=0, bytes_grad=0,
            )
        )
        if train.record_trajectory:
            trajectory.append(x.copy())

    return RunResult(
        config=cfg,
        metrics=metrics,
        details=[],
        ledger=CollectiveLedger(),
        final_x=x,
        final_errors=[np.zeros_like(x) for _ in range(n)],
        final_loss=metrics[-1].loss,
        final_accuracy=metrics[-1].accuracy,
        trajectory=trajectory,
    )
