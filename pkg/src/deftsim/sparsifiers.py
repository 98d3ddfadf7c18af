"""The four gradient sparsifiers behind one selection interface.

``run_selection`` is a generator so that sparsifiers needing a
collective (the partitioned selector broadcasts its allocation plan,
the cyclic-leader selector broadcasts its index pick) can yield the
request and resume with the result; the purely local kinds simply
return.  Every selector reports the indices it chose plus its
selection-cost value ``sum(size * log2(local_k + 1))`` for the cost
model.

Kinds:

* ``deft``            -- per-layer top-k in norm-weighted, bin-packed,
                         worker-exclusive layers; no index overlap
                         between ranks by construction.
* ``topk``            -- classic global top-k on every rank.
* ``cltk``            -- one leader per iteration (cyclic) picks the
                         global top-k and broadcasts the indices.
* ``hard_threshold``  -- keep every entry with magnitude above a fixed
                         threshold; emergent, uncontrolled density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Generator, Sequence

import numpy as np

from .collectives import INDEX_BYTES, Broadcast, PhaseTimer
from .kernels import segment_norms, topk_indices
from .partition import (
    LayerPartition,
    ModelLayout,
    assign_local_k,
    greedy_binpack,
    layer_cost,
    layer_costs,
    partition_two_stage,
    round_half_up,
)

KINDS = ("deft", "topk", "cltk", "hard_threshold")


@dataclass(frozen=True)
class SparsifierConfig:
    kind: str
    density: float | None = None
    threshold: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown sparsifier kind: {self.kind!r}")
        if self.kind == "hard_threshold":
            if self.threshold is None or self.threshold < 0:
                raise ValueError("hard_threshold requires a threshold >= 0")
        else:
            if self.threshold is not None:
                raise ValueError("threshold is only valid for hard_threshold")
            if self.density is None or not 0.0 < self.density <= 1.0:
                raise ValueError("invalid density")

    def target_k(self, n_total: int) -> int:
        """Global selection budget k = round(density * n_total)."""
        if self.density is None:
            raise ValueError("no density for this sparsifier kind")
        k = round_half_up(self.density * n_total)
        if k < 1:
            raise ValueError("invalid density")
        return k


@dataclass
class SelectionResult:
    indices: np.ndarray
    local_k_total: int
    selection_cost: float


@dataclass
class SelectionDetail:
    """Extras the metrics layer wants from a partitioned selection."""

    own_layers: list[tuple[int, int]]        # (size, local_k) this worker selected in
    budget_total: int                        # sum of local_k over all layers, own norms
    bin_of_layer: np.ndarray | None = None   # delegate only: the shared assignment
    delegate_costs: np.ndarray | None = None  # delegate only, per-layer


@dataclass
class SelectionContext:
    iteration: int
    rank: int
    n_workers: int
    layout: ModelLayout
    timer: PhaseTimer


def select_allocated(
    acc: np.ndarray, partitions: Sequence[LayerPartition], owned: Sequence[int]
) -> tuple[np.ndarray, int, float]:
    """Per-layer top-k over the owned layers; global sorted indices out."""
    chunks = []
    k_total = 0
    cost = 0.0
    for li in owned:
        layer = partitions[li]
        local = topk_indices(acc[layer.start:layer.end], layer.local_k)
        chunks.append(local + layer.start)
        k_total += layer.local_k
        cost += layer_cost(layer.size, layer.local_k)
    if chunks:
        indices = np.sort(np.concatenate(chunks))
    else:
        indices = np.empty(0, dtype=np.int64)
    return indices, k_total, cost


def prepare_partitions(
    acc: np.ndarray, layout: ModelLayout, n_workers: int, density: float
) -> list[LayerPartition]:
    """Partition, measure norms on ``acc``, and assign per-layer budgets."""
    partitions = partition_two_stage(layout, n_workers)
    starts = np.array([p.start for p in partitions], dtype=np.int64)
    norms = segment_norms(acc, starts)
    for layer, value in zip(partitions, norms):
        layer.norm = float(value)
    prioritized = sorted(partitions, key=lambda p: (-p.norm, p.index))
    assign_local_k(prioritized, layout.n_total, density)
    return partitions


def _deft_select(
    acc: np.ndarray, cfg: SparsifierConfig, ctx: SelectionContext
) -> Generator[Broadcast, Any, tuple[SelectionResult, SelectionDetail]]:
    partitions = prepare_partitions(acc, ctx.layout, ctx.n_workers, cfg.density)
    budget_total = sum(p.local_k for p in partitions)  # type: ignore[misc]
    ctx.timer.mark("select")

    delegate = ctx.iteration % ctx.n_workers
    delegate_costs = None
    delegate_assignment = None
    if ctx.rank == delegate:
        delegate_costs = layer_costs(partitions)
        delegate_assignment = greedy_binpack(delegate_costs, ctx.n_workers)
        payload = delegate_assignment.tobytes()
    else:
        payload = None
    ctx.timer.mark("partition")

    wire = yield Broadcast(payload, root=delegate, phase="partition")
    # everyone works from the broadcast bytes, delegate included
    assignment = np.frombuffer(wire, dtype=np.uint32)
    owned = np.flatnonzero(assignment == (delegate + ctx.rank) % ctx.n_workers)
    ctx.timer.mark("partition")

    indices, k_total, cost = select_allocated(acc, partitions, owned)
    ctx.timer.mark("select")
    detail = SelectionDetail(
        own_layers=[(partitions[i].size, partitions[i].local_k) for i in owned],  # type: ignore[list-item]
        budget_total=budget_total,
        bin_of_layer=delegate_assignment,
        delegate_costs=delegate_costs,
    )
    return SelectionResult(indices, k_total, cost), detail


def _topk_select(acc: np.ndarray, cfg: SparsifierConfig, ctx: SelectionContext) -> SelectionResult:
    n = acc.size
    k = cfg.target_k(n)
    indices = topk_indices(acc, k)
    ctx.timer.mark("select")
    return SelectionResult(indices, k, n * math.log2(k + 1))


def _cltk_select(
    acc: np.ndarray, cfg: SparsifierConfig, ctx: SelectionContext
) -> Generator[Broadcast, Any, SelectionResult]:
    n = acc.size
    k = cfg.target_k(n)
    leader = ctx.iteration % ctx.n_workers
    if ctx.rank == leader:
        payload = topk_indices(acc, k).astype(np.uint32).tobytes()
        cost = n * math.log2(k + 1)
    else:
        payload = None
        cost = 0.0  # idle while the leader selects
    ctx.timer.mark("select")

    wire = yield Broadcast(payload, root=leader, phase="comm")
    indices = np.frombuffer(wire, dtype=np.uint32).astype(np.int64)
    ctx.timer.mark("comm")
    return SelectionResult(indices, k, cost)


def _hard_threshold_select(acc: np.ndarray, cfg: SparsifierConfig, ctx: SelectionContext) -> SelectionResult:
    indices = np.flatnonzero(np.abs(acc) > cfg.threshold).astype(np.int64)
    ctx.timer.mark("select")
    return SelectionResult(indices, indices.size, float(acc.size))


def run_selection(
    cfg: SparsifierConfig, acc: np.ndarray, ctx: SelectionContext
) -> Generator[Broadcast, Any, tuple[SelectionResult, SelectionDetail | None]]:
    """Dispatch to the configured sparsifier; yields any collectives it needs."""
    if cfg.kind == "deft":
        return (yield from _deft_select(acc, cfg, ctx))
    if cfg.kind == "cltk":
        return (yield from _cltk_select(acc, cfg, ctx)), None
    if cfg.kind == "topk":
        return _topk_select(acc, cfg, ctx), None
    return _hard_threshold_select(acc, cfg, ctx), None
