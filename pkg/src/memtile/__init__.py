"""memtile: peak working-memory optimization for DNN inference graphs.

The pipeline: a graph is fused, scheduled memory-aware, its buffers packed
into one linear arena, and the buffers that pin the arena size are tiled —
either along the channel/feature axis (no recompute, bounded by two
weighted ops per path) or spatially (halo overlap, arbitrary depth) — until
no rewrite shrinks the layout further.
"""

from .discovery import (
    BlockKind,
    CriticalBuffer,
    DiscoveryFailed,
    PartitionKind,
    TilingConfig,
    enumerate_configs,
    find_critical_buffers,
)
from .executor import (
    ExecutionError,
    MacCount,
    count_macs,
    execute,
    max_rel_deviation,
    outputs_equivalent,
    random_inputs,
    read_tensor,
    write_tensor,
)
from .explorer import ExplorationReport, ExplorerOptions, VerificationError, evaluate_config, optimize
from .fusion import FusedGroup, FusedView, empty_view, fuse, planned_tensor_ids, unfuse
from .ir import (
    DataType,
    Graph,
    GraphError,
    Node,
    OpKind,
    TensorDef,
    TensorKind,
    buffer_size,
    deserialize,
    graphs_equal,
    infer_shapes,
    load,
    save,
    serialize,
    validate,
)
from .layout import (
    MemoryLayout,
    PlannerTimeout,
    derive_conflicts,
    plan,
    plan_exact,
    plan_heuristic,
    validate_layout,
)
from .models import GraphBuilder, InvalidScale, ModelTemplate, TemplateKind, generate
from .pipeline import PipelineOptions, PipelineResult, evaluate_graph
from .scheduling import (
    LifetimeTable,
    Schedule,
    ScheduleCost,
    SchedulerTimeout,
    best_schedule,
    compute_lifetimes,
    is_topological,
    schedule_cost,
    schedule_exact,
    schedule_hill_valley,
)
from .transform import InvalidConfig, NonDivisibleExtent, apply_tiling, chunks, peak_after

__version__ = "0.1.0"
