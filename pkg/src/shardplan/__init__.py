"""Partition layered models across heterogeneous devices and replay the result.

Two planners (minimum sequential latency, maximum pipeline throughput),
brute-force oracles for both, and a discrete-event pipeline simulator.
"""

from .core import (
    ClusterProfile,
    DeviceProfile,
    LatencyPlan,
    LayerProfile,
    ModelProfile,
    PhaseTimes,
    Stage,
    StageCost,
    ThroughputPlan,
    Violation,
    comm_time,
    effective_layer_time,
    plan_bottleneck,
    plan_total_latency,
    segment_memory,
    stage_costs,
    validate_plan,
)
from .errors import (
    ConsistencyError,
    Infeasible,
    InvalidPlan,
    InvalidRange,
    InvalidSpec,
    IoError,
    KvOverflow,
    MemoryNotSlack,
    ParseError,
    SchemaError,
    ShardPlanError,
    TooLarge,
    UnsupportedLayer,
    UnusableLink,
)
from .latency import backtrack_latency, fill_latency_dp, plan_min_latency
from .oracle import brute_force_latency, brute_force_throughput
from .profile_io import (
    ProfileDocument,
    SynthesisSpec,
    load_plan,
    load_profile,
    save_plan,
    save_profile,
    synthesize_profile,
)
from .sim import SimConfig, SimResult, export_timeline, max_feasible_batch, simulate
from .throughput import backtrack_throughput, fill_throughput_dp, plan_max_throughput

__version__ = "0.1.0"
