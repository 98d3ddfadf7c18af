"""In-process collective communication with byte accounting.

Workers are written as generators that yield collective requests
(:class:`AllGather`, :class:`AllReduce`, :class:`Broadcast`) and receive
the collective result back at the yield point.  Two schedulers drive
them: :class:`LockstepScheduler` advances ranks sequentially, and
:class:`ThreadedScheduler` runs one thread per rank synchronized at each
collective.  Both fulfil requests through the same pure functions, so
results are bit-identical across schedulers and across any rank
ordering.

Every fulfilment is logged to a :class:`CollectiveLedger` in wire units:
4 bytes per index or plan entry, 8 bytes per gradient value.
"""

from __future__ import annotations

import csv
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from math import log2
from typing import Any, Callable, Generator, Sequence

import numpy as np

INDEX_BYTES = 4
VALUE_BYTES = 8

COLLECTIVE_TIMEOUT_S = 120.0


class CollectiveDesync(RuntimeError):
    """Raised when ranks disagree on the op sequence or payload shape."""


@dataclass
class AllGather:
    """Gather index sets from all ranks; result is their sorted union."""

    indices: np.ndarray
    phase: str = "comm"


@dataclass
class AllReduce:
    """Element-wise sum of equal-length value vectors across ranks."""

    values: np.ndarray
    phase: str = "comm"


@dataclass
class Broadcast:
    """Root's byte payload delivered verbatim to every rank."""

    payload: bytes | None
    root: int
    phase: str = "comm"


CollectiveRequest = AllGather | AllReduce | Broadcast
WorkerGen = Generator[CollectiveRequest, Any, Any]


@dataclass
class LedgerRecord:
    iteration: int
    op: str
    element_count: int
    byte_count: int
    n_ranks: int


class CollectiveLedger:
    """Per-iteration element/byte log for every collective call."""

    def __init__(self) -> None:
        self.records: list[LedgerRecord] = []

    def record(self, iteration: int, op: str, element_count: int, element_bytes: int, n_ranks: int) -> None:
        self.records.append(
            LedgerRecord(iteration, op, element_count, element_count * element_bytes, n_ranks)
        )

    def totals(self) -> dict[str, tuple[int, int]]:
        """Cumulative (elements, bytes) per op kind."""
        out: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        for r in self.records:
            out[r.op][0] += r.element_count
            out[r.op][1] += r.byte_count
        return {op: (e, b) for op, (e, b) in out.items()}

    def bytes_since(self, mark: int) -> tuple[int, int]:
        """(index_bytes, value_bytes) over records appended after ``mark``."""
        idx = val = 0
        for r in self.records[mark:]:
            if r.op == "all_reduce":
                val += r.byte_count
            else:
                idx += r.byte_count
        return idx, val

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "op", "element_count", "byte_count"])
            for r in self.records:
                writer.writerow([r.iteration, r.op, r.element_count, r.byte_count])


def gather_union(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Sorted deduplicated union of all ranks' index sets."""
    return np.unique(np.concatenate([np.asarray(p, dtype=np.int64) for p in parts]))


def reduce_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Rank-ascending sequential fold; fixed order keeps it bit-reproducible."""
    acc = parts[0].astype(np.float64, copy=True)
    for p in parts[1:]:
        acc += p
    return acc


def fulfill(requests: Sequence[CollectiveRequest], iteration: int, ledger: CollectiveLedger) -> Any:
    """Compute one collective's result and log it; same value for all ranks."""
    kinds = {type(r) for r in requests}
    if len(kinds) != 1:
        raise CollectiveDesync(
            f"collective desync: mixed ops {sorted(k.__name__ for k in kinds)} at iteration {iteration}"
        )
    n = len(requests)
    first = requests[0]

    if isinstance(first, AllGather):
        parts = [r.indices for r in requests]
        result = gather_union(parts)
        result.setflags(write=False)
        ledger.record(iteration, "all_gather", sum(p.size for p in parts), INDEX_BYTES, n)
        return result

    if isinstance(first, AllReduce):
        length = first.values.size
        if any(r.values.size != length for r in requests):
            raise CollectiveDesync(f"collective desync: all_reduce length mismatch at iteration {iteration}")
        result = reduce_sum([r.values for r in requests])
        result.setflags(write=False)
        ledger.record(iteration, "all_reduce", n * length, VALUE_BYTES, n)
        return result

    roots = {r.root for r in requests}
    if len(roots) != 1:
        raise CollectiveDesync(f"collective desync: broadcast root mismatch at iteration {iteration}")
    payload = requests[first.root].payload
    if payload is None:
        raise CollectiveDesync(f"collective desync: broadcast root sent no payload at iteration {iteration}")
    ledger.record(iteration, "broadcast", len(payload) // INDEX_BYTES, INDEX_BYTES, n)
    return payload


class PhaseTimer:
    """Accumulates per-phase wall time for one rank.

    Worker code calls :meth:`mark` at each phase boundary; the scheduler
    calls :meth:`resume` whenever the rank regains control so time spent
    in other ranks or at a rendezvous never leaks into a phase.
    """

    __slots__ = ("enabled", "phases", "_last")

    def __init__(self, enabled: bool) -> None:
        self.enabled = enabled
        self.phases: dict[str, float] = defaultdict(float)
        self._last = 0.0

    def resume(self) -> None:
        if self.enabled:
            self._last = time.perf_counter()

    def mark(self, phase: str) -> None:
        if self.enabled:
            now = time.perf_counter()
            self.phases[phase] += now - self._last
            self._last = now

    def add(self, phase: str, dt: float) -> None:
        if self.enabled:
            self.phases[phase] += dt


@dataclass
class IterationOutcome:
    """Per-rank return values plus simulated per-rank wall time."""

    results: list[Any]
    elapsed: list[float] = field(default_factory=list)


class LockstepScheduler:
    """Drives workers rank by rank, pausing each at its collective calls."""

    def __init__(self, n_workers: int, ledger: CollectiveLedger, timing: bool = False,
                 rank_order: Sequence[int] | None = None) -> None:
        self.n_workers = n_workers
        self.ledger = ledger
        self.timing = timing
        self.rank_order = list(rank_order) if rank_order is not None else list(range(n_workers))

    def run_iteration(self, gens: Sequence[WorkerGen], timers: Sequence[PhaseTimer],
                      iteration: int) -> IterationOutcome:
        n = self.n_workers
        requests: list[CollectiveRequest | None] = [None] * n
        results: list[Any] = [None] * n
        done = [False] * n
        drive = [0.0] * n
        shared = 0.0

        def advance(rank: int, value: Any) -> None:
            timers[rank].resume()
            t0 = time.perf_counter() if self.timing else 0.0
            try:
                if value is _START:
                    requests[rank] = next(gens[rank])
                else:
                    requests[rank] = gens[rank].send(value)
            except StopIteration as stop:
                done[rank] = True
                results[rank] = stop.value
            if self.timing:
                drive[rank] += time.perf_counter() - t0

        for rank in self.rank_order:
            advance(rank, _START)

        while not all(done):
            if any(done):
                raise CollectiveDesync(
                    f"collective desync: ranks finished iteration {iteration} at different points"
                )
            t0 = time.perf_counter() if self.timing else 0.0
            value = fulfill(requests, iteration, self.ledger)  # type: ignore[arg-type]
            if self.timing:
                dt = time.perf_counter() - t0
                shared += dt
                phase = requests[0].phase  # type: ignore[union-attr]
                for t in timers:
                    t.add(phase, dt)
            for rank in self.rank_order:
                advance(rank, value)

        return IterationOutcome(results=results, elapsed=[d + shared for d in drive])


_START = object()


class ThreadedScheduler:
    """One thread per rank; collectives rendezvous at a shared barrier."""

    def __init__(self, n_workers: int, ledger: CollectiveLedger, timing: bool = False) -> None:
        self.n_workers = n_workers
        self.ledger = ledger
        self.timing = timing

    def run_iteration(self, gens: Sequence[WorkerGen], timers: Sequence[PhaseTimer],
                      iteration: int) -> IterationOutcome:
        n = self.n_workers
        slots: list[CollectiveRequest | None] = [None] * n
        box: dict[str, Any] = {"value": None, "error": None, "shared": 0.0}
        results: list[Any] = [None] * n
        errors: list[BaseException | None] = [None] * n
        drive = [0.0] * n

        def rendezvous_action() -> None:
            try:
                t0 = time.perf_counter() if self.timing else 0.0
                box["value"] = fulfill(slots, iteration, self.ledger)  # type: ignore[arg-type]
                if self.timing:
                    dt = time.perf_counter() - t0
                    box["shared"] += dt
                    phase = slots[0].phase  # type: ignore[union-attr]
                    for t in timers:
                        t.add(phase, dt)
            except BaseException as exc:  # surfaced by every rank after the barrier
                box["error"] = exc

        barrier = threading.Barrier(n, action=rendezvous_action)
        gate = threading.Barrier(n)

        def drive_rank(rank: int) -> None:
            gen = gens[rank]
            timer = timers[rank]
            try:
                timer.resume()
                t0 = time.perf_counter() if self.timing else 0.0
                try:
                    request = next(gen)
                except StopIteration as stop:
                    results[rank] = stop.value
                    return
                finally:
                    if self.timing:
                        drive[rank] += time.perf_counter() - t0
                while True:
                    slots[rank] = request
                    try:
                        barrier.wait(COLLECTIVE_TIMEOUT_S)
                    except threading.BrokenBarrierError:
                        raise CollectiveDesync(
                            f"collective desync: rendezvous broken at iteration {iteration}"
                        ) from None
                    if box["error"] is not None:
                        raise box["error"]
                    value = box["value"]
                    gate.wait(COLLECTIVE_TIMEOUT_S)
                    timer.resume()
                    t0 = time.perf_counter() if self.timing else 0.0
                    try:
                        request = gen.send(value)
                    except StopIteration as stop:
                        results[rank] = stop.value
                        return
                    finally:
                        if self.timing:
                            drive[rank] += time.perf_counter() - t0
            except BaseException as exc:
                errors[rank] = exc
                barrier.abort()
                gate.abort()

        threads = [threading.Thread(target=drive_rank, args=(r,), daemon=True) for r in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        raised = [e for e in errors if e is not None]
        if raised:
            # prefer the root cause over secondary broken-barrier faults
            for exc in raised:
                if not isinstance(exc, CollectiveDesync):
                    raise exc
            raise raised[0]
        return IterationOutcome(results=results, elapsed=[d + box["shared"] for d in drive])


def make_scheduler(mode: str, n_workers: int, ledger: CollectiveLedger, timing: bool = False):
    if mode == "lockstep":
        return LockstepScheduler(n_workers, ledger, timing)
    if mode == "concurrent":
        return ThreadedScheduler(n_workers, ledger, timing)
    raise ValueError(f"unknown execution mode: {mode!r}")


def analytic_comm_cost(n_workers: int, k_effective: float, alpha: float, beta: float) -> float:
    """Latency/bandwidth time model: log2(n) * alpha + 2 (n-1) k_eff * beta.

    Callers supply the sparsifier-appropriate effective k: the measured
    index union for plain top-k, the heaviest worker's summed per-layer
    budget for partitioned selection, and the target k when a single
    leader picks for everyone.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    return log2(n_workers) * alpha + 2.0 * (n_workers - 1) * k_effective * beta
