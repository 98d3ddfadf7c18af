import numpy as np
import pytest

from deftsim.metrics import write_metrics_csv
from deftsim.models import BlockQuadraticSpec, MlpSpec, NumericFault, build_workload
from deftsim.sparsifiers import SparsifierConfig
from deftsim.trainer import (
    RunConfig,
    TrainConfig,
    make_streams,
    run_dense_reference,
    run_training,
)

QUAD = BlockQuadraticSpec(block_sizes=(32, 32, 32, 32), scales=(8.0, 1.0, 4.0, 2.0), noise_sigma=0.3)


def quad_config(sparsifier, n_workers=2, iterations=25, seed=11, **train_kw):
    train = TrainConfig(
        n_workers=n_workers, iterations=iterations, lr=0.05,
        timing=False, record_trajectory=True, **train_kw,
    )
    return RunConfig(model=QUAD, train=train, sparsifier=sparsifier, seed=seed)


def assert_trajectories_identical(a, b):
    assert len(a.trajectory) == len(b.trajectory)
    for xa, xb in zip(a.trajectory, b.trajectory):
        assert np.array_equal(xa, xb)


DENSE_EQUIVALENT_SPARSIFIERS = [
    SparsifierConfig(kind="topk", density=1.0),
    SparsifierConfig(kind="cltk", density=1.0),
    SparsifierConfig(kind="deft", density=1.0),
    SparsifierConfig(kind="hard_threshold", threshold=0.0),
]


class TestDenseEquivalence:
    @pytest.mark.parametrize("sparsifier", DENSE_EQUIVALENT_SPARSIFIERS, ids=lambda s: s.kind)
    @pytest.mark.parametrize("n_workers", [1, 2])
    def test_bit_identical_to_dense_reference(self, sparsifier, n_workers):
        cfg = quad_config(sparsifier, n_workers=n_workers)
        sparse = run_training(cfg)
        dense = run_dense_reference(cfg)
        assert_trajectories_identical(sparse, dense)
        assert sparse.metrics[-1].error_norm == 0.0

    def test_single_step_equals_plain_sgd(self):
        cfg = quad_config(SparsifierConfig(kind="topk", density=1.0), n_workers=1, iterations=1)
        result = run_training(cfg)
        model_rng, worker_rngs = make_streams(cfg.seed, 1)
        model = build_workload(cfg.model, model_rng)
        x = model.init_params(model_rng)
        batch = model.sample_batch(worker_rngs[0], 1)
        expected = x - (0.05 * model.gradient(x, batch)) / 1
        assert np.array_equal(result.trajectory[0], expected)


class TestErrorFeedback:
    def _replay_gradients(self, cfg):
        model_rng, worker_rngs = make_streams(cfg.seed, cfg.train.n_workers)
        model = build_workload(cfg.model, model_rng)
        x0 = model.init_params(model_rng)
        grads = []
        for rng in worker_rngs:
            batch = model.sample_batch(rng, cfg.train.batch_size)
            grads.append(model.gradient(x0, batch))
        return model, x0, grads

    def test_residuals_conserve_unselected_mass(self):
        cfg = quad_config(SparsifierConfig(kind="deft", density=0.05), n_workers=2, iterations=1)
        result = run_training(cfg)
        model, x0, grads = self._replay_gradients(cfg)
        eta = cfg.train.lr
        x1 = result.trajectory[0]

        accs = [eta * g for g in grads]  # error starts at zero
        # the zero-set of every worker's residual is the shared index union;
        # everything outside it survives verbatim into the residual
        zero_sets = []
        for rank in range(2):
            e_res = result.final_errors[rank]
            flushed = e_res == 0.0
            kept = ~flushed
            assert np.array_equal(e_res[kept], accs[rank][kept])
            zero_sets.append(flushed)
        assert np.array_equal(zero_sets[0], zero_sets[1])
        union = np.flatnonzero(zero_sets[0])
        # parameters moved exactly by the rank-ordered average at the union
        fold = accs[0][union].copy()
        fold += accs[1][union]
        expected = x0.copy()
        expected[union] -= fold / 2
        assert np.array_equal(x1, expected)
        # untouched outside the union
        outside = np.flatnonzero(~zero_sets[0])
        assert np.array_equal(x1[outside], x0[outside])

    def test_strict_contributes_foreign_residuals_zero_fill_does_not(self):
        sp = SparsifierConfig(kind="topk", density=0.05)
        strict = run_training(quad_config(sp, n_workers=2, iterations=10, strict_alg1=True))
        zerof = run_training(quad_config(sp, n_workers=2, iterations=10, strict_alg1=False))
        diverged = any(
            not np.array_equal(a, b) for a, b in zip(strict.trajectory, zerof.trajectory)
        )
        assert diverged

    def test_modes_agree_for_single_worker(self):
        sp = SparsifierConfig(kind="topk", density=0.2)
        strict = run_training(quad_config(sp, n_workers=1, iterations=8, strict_alg1=True))
        zerof = run_training(quad_config(sp, n_workers=1, iterations=8, strict_alg1=False))
        assert_trajectories_identical(strict, zerof)

    def test_error_norm_drops_after_lr_decay(self):
        cfg = quad_config(
            SparsifierConfig(kind="deft", density=0.02),
            n_workers=4, iterations=300, seed=3,
            lr_decay_at=150, lr_decay_factor=0.1,
        )
        result = run_training(cfg)
        errors = [m.error_norm for m in result.metrics]
        before = np.mean(errors[120:150])
        after = np.mean(errors[270:300])
        assert after < before
        assert all(np.isfinite(errors))


class TestDeterminism:
    def test_same_config_same_bytes(self, tmp_path):
        cfg = quad_config(SparsifierConfig(kind="deft", density=0.05), n_workers=3, iterations=12)
        paths = []
        for name in ("a.csv", "b.csv"):
            result = run_training(cfg)
            path = tmp_path / name
            write_metrics_csv(path, result.metrics)
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    @pytest.mark.parametrize("kind,extra", [
        ("deft", {"density": 0.05}),
        ("cltk", {"density": 0.05}),
        ("topk", {"density": 0.05}),
        ("hard_threshold", {"threshold": 0.05}),
    ])
    def test_lockstep_matches_concurrent(self, kind, extra):
        sp = SparsifierConfig(kind=kind, **extra)
        lock = run_training(quad_config(sp, n_workers=4, iterations=10, mode="lockstep"))
        conc = run_training(quad_config(sp, n_workers=4, iterations=10, mode="concurrent"))
        assert_trajectories_identical(lock, conc)
        assert [m.csv_row() for m in lock.metrics] == [m.csv_row() for m in conc.metrics]
        assert lock.ledger.totals() == conc.ledger.totals()


class TestFaults:
    def test_divergence_raises_numeric_fault(self):
        spec = BlockQuadraticSpec(block_sizes=(16,), scales=(8.0,), noise_sigma=0.0)
        cfg = RunConfig(
            model=spec,
            train=TrainConfig(n_workers=1, iterations=500, lr=10.0, timing=False),
            sparsifier=SparsifierConfig(kind="topk", density=1.0),
            seed=0,
        )
        with pytest.raises(NumericFault):
            run_training(cfg)

    def test_more_workers_than_parameters(self):
        spec = BlockQuadraticSpec(block_sizes=(2,), scales=(1.0,), noise_sigma=0.0)
        cfg = RunConfig(
            model=spec,
            train=TrainConfig(n_workers=4, iterations=1, lr=0.1, timing=False),
            sparsifier=SparsifierConfig(kind="topk", density=1.0),
            seed=0,
        )
        with pytest.raises(ValueError, match="more workers than parameters"):
            run_training(cfg)


def test_mlp_training_runs_and_improves():
    spec = MlpSpec(input_dim=8, hidden=(16, 16), n_classes=2, n_samples=128, class_offset=1.5)
    cfg = RunConfig(
        model=spec,
        train=TrainConfig(n_workers=2, iterations=150, lr=0.3, batch_size=16, timing=False),
        sparsifier=SparsifierConfig(kind="deft", density=0.05),
        seed=21,
    )
    result = run_training(cfg)
    assert result.final_accuracy > 0.8
    assert result.metrics[0].loss > result.final_loss
