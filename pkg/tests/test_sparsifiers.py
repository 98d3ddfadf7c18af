import math

import numpy as np
import pytest

from deftsim.collectives import CollectiveLedger, LockstepScheduler, PhaseTimer
from deftsim.partition import ModelLayout, partition_two_stage
from deftsim.sparsifiers import (
    SelectionContext,
    SparsifierConfig,
    prepare_partitions,
    run_selection,
)


def run_ranks(cfg, accs, layout, iteration=0):
    """Drive one selection round for every rank under the lockstep scheduler."""
    n = len(accs)
    ledger = CollectiveLedger()
    sched = LockstepScheduler(n, ledger, timing=False)
    timers = [PhaseTimer(False) for _ in range(n)]
    ctxs = [SelectionContext(iteration, r, n, layout, timers[r]) for r in range(n)]
    gens = [run_selection(cfg, accs[r], ctxs[r]) for r in range(n)]
    outcome = sched.run_iteration(gens, timers, iteration)
    return outcome.results, ledger


class TestConfig:
    def test_threshold_only_for_hard_threshold(self):
        with pytest.raises(ValueError):
            SparsifierConfig(kind="topk", density=0.5, threshold=1.0)
        with pytest.raises(ValueError):
            SparsifierConfig(kind="hard_threshold")

    def test_density_required_and_bounded(self):
        for d in (None, 0.0, 1.0001):
            with pytest.raises(ValueError):
                SparsifierConfig(kind="deft", density=d)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown sparsifier"):
            SparsifierConfig(kind="magic", density=0.5)

    def test_target_k_rounds(self):
        assert SparsifierConfig(kind="topk", density=0.5).target_k(5) == 3
        assert SparsifierConfig(kind="topk", density=1.0).target_k(7) == 7
        with pytest.raises(ValueError, match="invalid density"):
            SparsifierConfig(kind="topk", density=0.001).target_k(10)


class TestTopk:
    def test_basic_pick(self):
        acc = np.array([0.1, -0.5, 0.3, 0.05])
        cfg = SparsifierConfig(kind="topk", density=0.5)
        results, _ = run_ranks(cfg, [acc], ModelLayout((4,)))
        sel, detail = results[0]
        assert sel.indices.tolist() == [1, 2]
        assert sel.local_k_total == 2
        assert sel.selection_cost == pytest.approx(4 * math.log2(3))
        assert detail is None

    def test_full_density_selects_all(self):
        acc = np.array([0.0, 1.0, -2.0])
        cfg = SparsifierConfig(kind="topk", density=1.0)
        results, _ = run_ranks(cfg, [acc], ModelLayout((3,)))
        assert results[0][0].indices.tolist() == [0, 1, 2]

    def test_build_up_with_disjoint_worker_tops(self):
        # workers whose large entries sit at different coordinates double the union
        acc_a = np.array([9.0, 8.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2])
        acc_b = np.array([0.1, 0.1, 9.0, 8.0, 0.1, 0.1, 0.1, 0.2])
        cfg = SparsifierConfig(kind="topk", density=0.25)
        results, _ = run_ranks(cfg, [acc_a, acc_b], ModelLayout((8,)))
        union = np.union1d(results[0][0].indices, results[1][0].indices)
        assert union.size == 4  # 2k with fully disjoint picks


class TestCltk:
    def test_single_worker_matches_topk(self):
        acc = np.array([0.1, -0.5, 0.3, 0.05])
        top = SparsifierConfig(kind="topk", density=0.5)
        clt = SparsifierConfig(kind="cltk", density=0.5)
        r_top, _ = run_ranks(top, [acc], ModelLayout((4,)))
        r_clt, _ = run_ranks(clt, [acc], ModelLayout((4,)))
        assert r_top[0][0].indices.tolist() == r_clt[0][0].indices.tolist()

    def test_all_ranks_identical_and_leader_cycles(self):
        rng = np.random.default_rng(0)
        layout = ModelLayout((40,))
        cfg = SparsifierConfig(kind="cltk", density=0.1)
        for iteration in range(5):
            accs = [rng.standard_normal(40) for _ in range(3)]
            results, ledger = run_ranks(cfg, accs, layout, iteration=iteration)
            sets = [r[0].indices.tolist() for r in results]
            assert sets[0] == sets[1] == sets[2]
            leader = iteration % 3
            expected_cost = 40 * math.log2(4 + 1)
            for rank, (sel, _) in enumerate(results):
                assert sel.selection_cost == (expected_cost if rank == leader else 0.0)
            # leader's index pick broadcast at 4 bytes each
            rec = ledger.records[0]
            assert (rec.op, rec.byte_count) == ("broadcast", 4 * 4)

    def test_density_exact_for_eight_workers(self):
        rng = np.random.default_rng(7)
        layout = ModelLayout((100,))
        cfg = SparsifierConfig(kind="cltk", density=0.07)
        accs = [rng.standard_normal(100) for _ in range(8)]
        results, _ = run_ranks(cfg, accs, layout)
        union = np.unique(np.concatenate([r[0].indices for r in results]))
        assert union.size == 7  # round(0.07 * 100), exactly


class TestHardThreshold:
    def test_basic(self):
        acc = np.array([0.1, -0.5, 0.3])
        cfg = SparsifierConfig(kind="hard_threshold", threshold=0.2)
        results, _ = run_ranks(cfg, [acc], ModelLayout((3,)))
        sel = results[0][0]
        assert sel.indices.tolist() == [1, 2]
        assert sel.selection_cost == 3.0  # linear scan

    def test_zero_threshold_keeps_nonzeros(self):
        acc = np.array([0.0, -0.5, 0.3])
        cfg = SparsifierConfig(kind="hard_threshold", threshold=0.0)
        results, _ = run_ranks(cfg, [acc], ModelLayout((3,)))
        assert results[0][0].indices.tolist() == [1, 2]

    def test_infinite_threshold_selects_nothing(self):
        acc = np.array([1.0, 2.0])
        cfg = SparsifierConfig(kind="hard_threshold", threshold=math.inf)
        results, _ = run_ranks(cfg, [acc], ModelLayout((2,)))
        assert results[0][0].indices.size == 0


class TestDeft:
    def test_single_worker_full_density_selects_everything(self):
        rng = np.random.default_rng(1)
        layout = ModelLayout((16, 16, 16, 16))
        acc = rng.standard_normal(64)
        cfg = SparsifierConfig(kind="deft", density=1.0)
        results, _ = run_ranks(cfg, [acc], layout)
        assert results[0][0].indices.tolist() == list(range(64))

    def test_two_workers_disjoint_cover(self):
        rng = np.random.default_rng(2)
        layout = ModelLayout((30, 50, 20))
        acc = rng.standard_normal(100)
        cfg = SparsifierConfig(kind="deft", density=0.2)
        # identical accumulators: union size equals the shared budget total
        results, ledger = run_ranks(cfg, [acc.copy(), acc.copy()], layout)
        (sel_a, det_a), (sel_b, det_b) = results
        assert np.intersect1d(sel_a.indices, sel_b.indices).size == 0
        assert sel_a.local_k_total + sel_b.local_k_total == det_a.budget_total
        assert det_a.budget_total == det_b.budget_total
        # one plan broadcast of 4 bytes per layer
        bcasts = [r for r in ledger.records if r.op == "broadcast"]
        parts = partition_two_stage(layout, 2)
        assert len(bcasts) == 1
        assert bcasts[0].byte_count == 4 * len(parts)

    def test_highest_norm_layer_gets_largest_budget(self):
        layout = ModelLayout((16, 16, 16, 16))
        acc = np.concatenate([
            np.full(16, 8.0), np.full(16, 4.0), np.full(16, 2.0), np.full(16, 1.0),
        ])
        parts = prepare_partitions(acc, layout, 1, density=0.25)
        ks = [p.local_k for p in parts]
        assert ks[0] == max(ks)
        assert sum(ks) >= 16 - 4

    def test_indices_respect_layer_boundaries(self):
        rng = np.random.default_rng(3)
        layout = ModelLayout((10, 30, 25, 35))
        accs = [rng.standard_normal(100) for _ in range(4)]
        cfg = SparsifierConfig(kind="deft", density=0.1)
        results, _ = run_ranks(cfg, accs, layout, iteration=2)
        parts = partition_two_stage(layout, 4)
        for rank, (sel, det) in enumerate(results):
            assert np.all(sel.indices >= 0) and np.all(sel.indices < 100)
            assert np.all(np.diff(sel.indices) > 0)
            assert sel.local_k_total == sel.indices.size

    def test_rank_sets_disjoint_even_with_different_accs(self):
        rng = np.random.default_rng(4)
        layout = ModelLayout((64, 64))
        accs = [rng.standard_normal(128) for _ in range(4)]
        cfg = SparsifierConfig(kind="deft", density=0.25)
        results, _ = run_ranks(cfg, accs, layout, iteration=3)
        all_idx = np.concatenate([r[0].indices for r in results])
        assert np.unique(all_idx).size == all_idx.size

    def test_selection_cost_matches_own_layers(self):
        rng = np.random.default_rng(5)
        layout = ModelLayout((40, 40, 40))
        accs = [rng.standard_normal(120) for _ in range(3)]
        cfg = SparsifierConfig(kind="deft", density=0.1)
        results, _ = run_ranks(cfg, accs, layout)
        for sel, det in results:
            expected = sum(size * math.log2(k + 1) for size, k in det.own_layers)
            assert sel.selection_cost == pytest.approx(expected)
