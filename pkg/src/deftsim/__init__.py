"""Deterministic desk-scale simulator for layer-partitioned gradient
sparsification in data-parallel SGD with error feedback."""

from .collectives import (
    AllGather,
    AllReduce,
    Broadcast,
    CollectiveDesync,
    CollectiveLedger,
    LockstepScheduler,
    PhaseTimer,
    ThreadedScheduler,
    analytic_comm_cost,
    make_scheduler,
)
from .kernels import l2_norm, segment_norms, topk_indices
from .metrics import (
    CSV_COLUMNS,
    IterationMetrics,
    cost_model,
    measure_density,
    measure_error,
    raw_trivial_speedup,
    time_breakdown,
)
from .models import BlockQuadratic, BlockQuadraticSpec, Mlp, MlpSpec, NumericFault, build_workload
from .partition import (
    AllocationPlan,
    LayerPartition,
    ModelLayout,
    allocate_layers_binpack,
    assign_local_k,
    decode_plan,
    encode_plan,
    layer_cost,
    partition_two_stage,
)
from .sparsifiers import (
    SelectionContext,
    SelectionResult,
    SparsifierConfig,
    prepare_partitions,
    run_selection,
    select_allocated,
)
from .trainer import (
    RunConfig,
    RunResult,
    TrainConfig,
    WorkerState,
    make_streams,
    run_dense_reference,
    run_training,
)

__version__ = "0.1.0"
