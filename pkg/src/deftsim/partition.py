"""Gradient-vector partitioning and worker allocation.

Three stages run each iteration:

1. ``partition_two_stage`` tiles the flat gradient vector into layers,
   splitting any model tensor larger than ``n_total / n_workers`` into
   ``n_workers`` near-equal fragments.  Boundaries depend only on the
   model layout and worker count, so they are cached.
2. ``assign_local_k`` hands each layer a selection budget proportional
   to its share of the remaining gradient norm, floored at 1 and capped
   at the layer size.
3. ``allocate_layers_binpack`` greedily packs layers (weighted by
   selection cost) onto workers, largest cost first into the currently
   lightest bin, so the slowest worker's selection load is minimized.

The resulting plan serializes to 4 bytes per layer (a uint32 bin id per
layer) for the delegate-to-all broadcast.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from the floor."""
    return int(math.floor(x + 0.5))


def layer_cost(size: int, local_k: int) -> float:
    """Selection-cost weight of one layer: size * log2(local_k + 1).

    The +1 keeps single-gradient layers at a positive weight so they
    still participate in load balancing; the log base cancels out of
    every speedup ratio.
    """
    return size * math.log2(local_k + 1)


@dataclass(frozen=True)
class ModelLayout:
    """Per-tensor parameter counts in fixed model order."""

    tensor_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tensor_sizes or any(s < 1 for s in self.tensor_sizes):
            raise ValueError("tensor sizes must all be >= 1")

    @property
    def n_total(self) -> int:
        return sum(self.tensor_sizes)


@dataclass
class LayerPartition:
    """A contiguous slice [start, end) of the gradient vector."""

    index: int
    start: int
    end: int
    norm: float = 0.0
    local_k: int | None = None
    cost: float | None = None

    @property
    def size(self) -> int:
        return self.end - self.start


@lru_cache(maxsize=64)
def partition_boundaries(tensor_sizes: tuple[int, ...], n_workers: int) -> tuple[tuple[int, int], ...]:
    """Layer boundaries for a layout; pure function of (layout, workers)."""
    n_total = sum(tensor_sizes)
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if n_workers > n_total:
        raise ValueError("more workers than parameters")

    threshold = n_total / n_workers
    bounds: list[tuple[int, int]] = []
    pos = 0
    for size in tensor_sizes:
        if size > threshold:
            quotient, remainder = divmod(size, n_workers)
            for i in range(n_workers):
                piece = quotient + (1 if i < remainder else 0)
                if piece == 0:
                    # quotient 0 fragments carry no gradients; drop them
                    continue
                bounds.append((pos, pos + piece))
                pos += piece
        else:
            bounds.append((pos, pos + size))
            pos += size
    return tuple(bounds)


def partition_two_stage(layout: ModelLayout, n_workers: int) -> list[LayerPartition]:
    """Tile [0, n_total) into layers; oversized tensors split n_workers ways."""
    bounds = partition_boundaries(layout.tensor_sizes, n_workers)
    return [LayerPartition(index=i, start=s, end=e) for i, (s, e) in enumerate(bounds)]


def assign_local_k(partitions: list[LayerPartition], n_total: int, density: float) -> list[LayerPartition]:
    """Distribute the global budget k = round(density * n_total) over layers.

    ``partitions`` must already be in priority order (descending norm,
    lower layer index on ties).  Each layer receives its share of the
    remaining budget proportional to its share of the remaining norm,
    floored at 1 and capped at the layer size, and the remainders are
    decremented as assignment proceeds.
    """
    if not partitions:
        raise ValueError("no partitions")
    if not 0.0 < density <= 1.0:
        raise ValueError("invalid density")
    k_target = round_half_up(density * n_total)
    if k_target < 1:
        raise ValueError("invalid density")
    for prev, cur in zip(partitions, partitions[1:]):
        if cur.norm > prev.norm:
            raise ValueError("partitions not in priority order")

    k_remain = float(k_target)
    norm_remain = 0.0
    for layer in partitions:
        norm_remain += layer.norm
    for layer in partitions:
        if norm_remain > 0.0:
            k_temp = k_remain * (layer.norm / norm_remain)
        else:
            k_temp = 0.0
        local_k = min(layer.size, max(1, round_half_up(k_temp)))
        layer.local_k = local_k
        k_remain -= local_k
        norm_remain -= layer.norm
    return partitions


@dataclass(frozen=True)
class AllocationPlan:
    """Exclusive layer-to-worker assignment for one iteration."""

    bins: tuple[tuple[int, ...], ...]
    delegate_rank: int
    iteration: int

    n_layers: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_layers", sum(len(b) for b in self.bins))

    def bin_for_rank(self, rank: int) -> tuple[int, ...]:
        """Layers owned by ``rank``; bin index rotates with the cycle."""
        return self.bins[(self.delegate_rank + rank) % len(self.bins)]


def allocate_layers_binpack(
    partitions: list[LayerPartition], n_workers: int, iteration: int
) -> AllocationPlan:
    """Greedy cost-descending packing of layers into worker bins.

    Ties break deterministically: equal costs go to the lower layer
    index first, equal bin totals to the lower bin index.
    """
    costs = layer_costs(partitions)
    assignment = greedy_binpack(costs, n_workers)
    bins: list[list[int]] = [[] for _ in range(n_workers)]
    for i in np.argsort(-costs, kind="stable").tolist():
        bins[int(assignment[i])].append(i)
    return AllocationPlan(
        bins=tuple(tuple(b) for b in bins),
        delegate_rank=iteration % n_workers,
        iteration=iteration,
    )


def layer_costs(partitions: list[LayerPartition]) -> np.ndarray:
    """Vectorized selection-cost weights; also stamps each layer's cost."""
    ks = []
    for layer in partitions:
        if layer.local_k is None:
            raise ValueError("local_k not assigned")
        ks.append(layer.local_k)
    sizes = np.fromiter((p.size for p in partitions), dtype=np.float64, count=len(partitions))
    costs = sizes * np.log2(np.asarray(ks, dtype=np.float64) + 1.0)
    for layer, cost in zip(partitions, costs):
        layer.cost = float(cost)
    return costs


def greedy_binpack(costs: np.ndarray, n_bins: int) -> np.ndarray:
    """Largest cost first into the lightest bin; returns a bin id per item.

    Ties break deterministically: equal costs go to the lower item index
    first, equal bin totals to the lower bin index.
    """
    # stable argsort on the negated costs == (-cost, index) ordering
    order = np.argsort(-np.asarray(costs), kind="stable")
    cost_list = [float(c) for c in costs]
    heap = [(0.0, b) for b in range(n_bins)]
    assignment = np.empty(len(cost_list), dtype=np.uint32)
    for i in order.tolist():
        total, b = heapq.heappop(heap)
        assignment[i] = b
        heapq.heappush(heap, (total + cost_list[i], b))
    return assignment


def encode_plan(plan: AllocationPlan) -> bytes:
    """Wire format: one uint32 bin id per layer, 4 bytes each."""
    arr = np.empty(plan.n_layers, dtype=np.uint32)
    for b, members in enumerate(plan.bins):
        for i in members:
            arr[i] = b
    return arr.tobytes()


def decode_plan(payload: bytes, n_workers: int, iteration: int) -> AllocationPlan:
    """Inverse of :func:`encode_plan`; bins list layers in ascending order."""
    arr = np.frombuffer(payload, dtype=np.uint32)
    bins = tuple(tuple(int(i) for i in np.flatnonzero(arr == b)) for b in range(n_workers))
    return AllocationPlan(bins=bins, delegate_rank=iteration % n_workers, iteration=iteration)
