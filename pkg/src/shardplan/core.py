"""Domain types and the cost / constraint primitives shared by every planner.

Units are fixed throughout the package: times in milliseconds, sizes in bytes,
bandwidth in bytes per second (profile files store bits per second, see
:mod:`shardplan.profile_io`).  Device 0 is always the source device holding the
input tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import (
    ConsistencyError,
    InvalidPlan,
    InvalidRange,
    UnsupportedLayer,
    UnusableLink,
)

DEFAULT_TOKEN_RETURN_BYTES = 64


@dataclass(frozen=True)
class PhaseTimes:
    prefill_ms: float
    decode_ms: float


@dataclass(frozen=True)
class LayerProfile:
    """One model layer: per-device compute times plus its memory / activation footprint.

    ``compute_time`` maps a device index to the prefill and decode time of the
    layer on that device.  A device absent from the map cannot host the layer.
    """

    index: int
    compute_time: Mapping[int, PhaseTimes]
    activation_bytes: float
    memory_bytes: float
    kv_bytes_per_token: float = 0

    def __post_init__(self):
        object.__setattr__(self, "compute_time", {int(k): v for k, v in self.compute_time.items()})
        if self.activation_bytes < 0 or self.kv_bytes_per_token < 0:
            raise ConsistencyError(f"layer {self.index}: negative activation or KV size")
        if not self.memory_bytes > 0:
            raise ConsistencyError(f"layer {self.index}: memory_bytes must be positive")
        for dev, t in self.compute_time.items():
            if t.prefill_ms < 0 or t.decode_ms < 0:
                raise ConsistencyError(f"layer {self.index}: negative compute time on device {dev}")


@dataclass(frozen=True)
class DeviceProfile:
    index: int
    memory_budget_bytes: float
    label: str = ""

    def __post_init__(self):
        if not self.memory_budget_bytes > 0:
            raise ConsistencyError(f"device {self.index}: memory budget must be positive")


@dataclass(frozen=True)
class ClusterProfile:
    """Devices plus the pairwise bandwidth matrix (bytes/s, diagonal ignored).

    A zero entry marks an unusable link.
    """

    devices: tuple[DeviceProfile, ...]
    bandwidth_bps: tuple[tuple[float, ...], ...]
    source_device: int = 0

    def __post_init__(self):
        devices = tuple(self.devices)
        bw = tuple(tuple(float(x) for x in row) for row in self.bandwidth_bps)
        object.__setattr__(self, "devices", devices)
        object.__setattr__(self, "bandwidth_bps", bw)
        m = len(devices)
        if m < 1:
            raise ConsistencyError("cluster needs at least one device")
        if [d.index for d in devices] != list(range(m)):
            raise ConsistencyError("device indices must be 0..M-1 in order")
        if len(bw) != m or any(len(row) != m for row in bw):
            raise ConsistencyError(f"bandwidth matrix must be {m}x{m}")
        for k in range(m):
            for j in range(m):
                if k != j and not (bw[k][j] >= 0 and math.isfinite(bw[k][j])):
                    raise ConsistencyError(f"bandwidth {k}->{j} must be finite and >= 0")
        if not 0 <= self.source_device < m:
            raise ConsistencyError(f"source device {self.source_device} out of range")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def bandwidth(self, src: int, dst: int) -> float:
        return self.bandwidth_bps[src][dst]

    def budget(self, device: int) -> float:
        return self.devices[device].memory_budget_bytes


@dataclass(frozen=True)
class ModelProfile:
    layers: tuple[LayerProfile, ...]
    token_return_bytes: float = DEFAULT_TOKEN_RETURN_BYTES
    prompt_len: int = 32
    gen_len: int = 96

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConsistencyError("model needs at least one layer")
        if [l.index for l in layers] != list(range(len(layers))):
            raise ConsistencyError("layer indices must be 0..N-1 in order")
        if self.prompt_len < 1 or self.gen_len < 1:
            raise ConsistencyError("prompt_len and gen_len must be >= 1")
        if self.token_return_bytes < 0:
            raise ConsistencyError("token_return_bytes must be >= 0")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def total_memory(self) -> float:
        return sum(l.memory_bytes for l in self.layers)


@dataclass(frozen=True)
class LatencyPlan:
    """Per-layer device assignment for sequential inference."""

    assignment: tuple[int, ...]
    predicted_latency_ms: float
    mode: str = "paper"

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))


@dataclass(frozen=True)
class Stage:
    layer_lo: int
    layer_hi: int
    device: int

    @property
    def n_layers(self) -> int:
        return self.layer_hi - self.layer_lo


@dataclass(frozen=True)
class ThroughputPlan:
    """Contiguous pipeline stages, one device per stage."""

    stages: tuple[Stage, ...]
    predicted_stage_time_ms: float

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def devices(self) -> tuple[int, ...]:
        return tuple(s.device for s in self.stages)

    def assignment(self) -> tuple[int, ...]:
        out = []
        for s in self.stages:
            out.extend([s.device] * s.n_layers)
        return tuple(out)


@dataclass(frozen=True)
class StageCost:
    compute_ms: float
    comm_in_ms: float
    memory_bytes: float

    @property
    def stage_time_ms(self) -> float:
        return max(self.compute_ms, self.comm_in_ms)


@dataclass(frozen=True)
class Violation:
    """A broken constraint.  ``kind`` is one of ``privacy``, ``memory``,
    ``contiguity``, ``distinct_devices``, ``unsupported_layer``,
    ``unusable_link``, ``invalid_device`` or ``length``."""

    kind: str
    index: int
    detail: str = field(default="", compare=False)

    def __str__(self):
        return f"{self.kind}[{self.index}]: {self.detail}" if self.detail else f"{self.kind}[{self.index}]"


# ---------------------------------------------------------------------------
# cost primitives


def can_host(layer: LayerProfile, device: int) -> bool:
    return device in layer.compute_time


def effective_layer_time(layer: LayerProfile, device: int) -> float:
    """Planning time of a layer: mean of its prefill and decode times on ``device``."""
    try:
        t = layer.compute_time[device]
    except KeyError:
        raise UnsupportedLayer(layer.index, device) from None
    return (t.prefill_ms + t.decode_ms) / 2


def link_usable(src: int, dst: int, cluster: ClusterProfile) -> bool:
    return src == dst or cluster.bandwidth(src, dst) > 0


def comm_time(payload_bytes: float, src: int, dst: int, cluster: ClusterProfile) -> float:
    """Transfer time in ms; exactly 0 when source and destination coincide."""
    m = cluster.n_devices
    if not (0 <= src < m and 0 <= dst < m):
        raise InvalidPlan(f"device id out of range: {src}->{dst}")
    if src == dst:
        return 0.0
    bw = cluster.bandwidth(src, dst)
    if bw <= 0:
        raise UnusableLink(src, dst)
    return payload_bytes / bw * 1e3


def segment_memory(layer_lo: int, layer_hi: int, model: ModelProfile) -> float:
    """Summed ``memory_bytes`` over the half-open layer range ``[layer_lo, layer_hi)``."""
    if not 0 <= layer_lo < layer_hi <= model.n_layers:
        raise InvalidRange(f"bad layer range [{layer_lo}, {layer_hi}) for N={model.n_layers}")
    return sum(l.memory_bytes for l in model.layers[layer_lo:layer_hi])


def segment_compute_time(layer_lo: int, layer_hi: int, device: int, model: ModelProfile) -> float:
    """Summed effective time of ``[layer_lo, layer_hi)`` on one device (correctly rounded)."""
    if not 0 <= layer_lo < layer_hi <= model.n_layers:
        raise InvalidRange(f"bad layer range [{layer_lo}, {layer_hi}) for N={model.n_layers}")
    return math.fsum(effective_layer_time(l, device) for l in model.layers[layer_lo:layer_hi])


def _assignment_of(plan) -> tuple[int, ...]:
    if isinstance(plan, LatencyPlan):
        return plan.assignment
    if isinstance(plan, ThroughputPlan):
        return plan.assignment()
    return tuple(int(a) for a in plan)


def plan_total_latency(plan, model: ModelProfile, cluster: ClusterProfile) -> float:
    """Sequential per-token latency of an assignment.

    Sum of layer compute times, activation transfers at every device change,
    and the generated token's trip back to the source.  ``plan`` may be a
    :class:`LatencyPlan`, a :class:`ThroughputPlan` or a plain sequence of
    device ids.
    """
    a = _assignment_of(plan)
    n = model.n_layers
    if len(a) != n:
        raise InvalidPlan(f"assignment has {len(a)} entries, model has {n} layers")
    m = cluster.n_devices
    for i, d in enumerate(a):
        if not 0 <= d < m:
            raise InvalidPlan(f"layer {i} assigned to unknown device {d}")
    terms = [effective_layer_time(model.layers[i], a[i]) for i in range(n)]
    for i in range(1, n):
        terms.append(comm_time(model.layers[i - 1].activation_bytes, a[i - 1], a[i], cluster))
    terms.append(comm_time(model.token_return_bytes, a[-1], 0, cluster))
    return math.fsum(terms)


def stages_from_assignment(assignment: Sequence[int]) -> list[Stage]:
    """Collapse runs of equal device ids into stages (devices may repeat)."""
    stages = []
    lo = 0
    for i in range(1, len(assignment) + 1):
        if i == len(assignment) or assignment[i] != assignment[lo]:
            stages.append(Stage(lo, i, int(assignment[lo])))
            lo = i
    return stages


def stage_costs(stages: Sequence[Stage], model: ModelProfile, cluster: ClusterProfile) -> list[StageCost]:
    """Per-stage compute time, incoming activation transfer time and resident weights."""
    out = []
    for s, st in enumerate(stages):
        if s == 0:
            comm_in = 0.0
        else:
            prev = stages[s - 1]
            comm_in = comm_time(model.layers[st.layer_lo - 1].activation_bytes, prev.device, st.device, cluster)
        out.append(StageCost(
            compute_ms=segment_compute_time(st.layer_lo, st.layer_hi, st.device, model),
            comm_in_ms=comm_in,
            memory_bytes=segment_memory(st.layer_lo, st.layer_hi, model),
        ))
    return out


def plan_bottleneck(stages, model: ModelProfile, cluster: ClusterProfile) -> float:
    """Slowest stage time: max over stages of max(compute, incoming transfer)."""
    if isinstance(stages, ThroughputPlan):
        stages = stages.stages
    return max(c.stage_time_ms for c in stage_costs(stages, model, cluster))


# ---------------------------------------------------------------------------
# constraint checking


def _device_memory_violations(per_device: dict[int, float], cluster: ClusterProfile) -> list[Violation]:
    out = []
    for dev in sorted(per_device):
        used = per_device[dev]
        budget = cluster.budget(dev)
        if used > budget:
            out.append(Violation("memory", dev, f"{used:g} bytes assigned, budget {budget:g}"))
    return out


def _validate_assignment(a: Sequence[int], model: ModelProfile, cluster: ClusterProfile) -> list[Violation]:
    n, m = model.n_layers, cluster.n_devices
    if len(a) != n:
        return [Violation("length", len(a), f"expected {n} layers")]
    bad = [Violation("invalid_device", i, f"device {d}") for i, d in enumerate(a) if not 0 <= d < m]
    if bad:
        return bad
    out = []
    if a[0] != 0:
        out.append(Violation("privacy", 0, f"layer 0 placed on device {a[0]}"))
    for i, d in enumerate(a):
        if not can_host(model.layers[i], d):
            out.append(Violation("unsupported_layer", i, f"device {d} has no profile"))
    for i in range(1, n):
        if not link_usable(a[i - 1], a[i], cluster):
            out.append(Violation("unusable_link", i, f"{a[i - 1]}->{a[i]}"))
    if not link_usable(a[-1], 0, cluster):
        out.append(Violation("unusable_link", n, f"token return {a[-1]}->0"))
    per_device: dict[int, float] = {}
    for i, d in enumerate(a):
        per_device[d] = per_device.get(d, 0) + model.layers[i].memory_bytes
    out.extend(_device_memory_violations(per_device, cluster))
    return out


def _validate_stages(stages: Sequence[Stage], model: ModelProfile, cluster: ClusterProfile) -> list[Violation]:
    n, m = model.n_layers, cluster.n_devices
    if not stages:
        return [Violation("length", 0, "plan has no stages")]
    out = []
    expect = 0
    for s, st in enumerate(stages):
        if st.layer_lo != expect or st.layer_hi <= st.layer_lo:
            out.append(Violation("contiguity", s, f"stage covers [{st.layer_lo}, {st.layer_hi}), expected start {expect}"))
        expect = st.layer_hi
    if expect != n:
        out.append(Violation("contiguity", len(stages), f"stages end at {expect}, model has {n} layers"))
    bad = [Violation("invalid_device", s, f"device {st.device}") for s, st in enumerate(stages) if not 0 <= st.device < m]
    if bad or out:
        return out + bad
    if stages[0].device != 0:
        out.append(Violation("privacy", 0, f"stage 0 placed on device {stages[0].device}"))
    seen = set()
    for s, st in enumerate(stages):
        if st.device in seen:
            out.append(Violation("distinct_devices", s, f"device {st.device} reused"))
        seen.add(st.device)
        for i in range(st.layer_lo, st.layer_hi):
            if not can_host(model.layers[i], st.device):
                out.append(Violation("unsupported_layer", i, f"device {st.device} has no profile"))
        if s > 0 and not link_usable(stages[s - 1].device, st.device, cluster):
            out.append(Violation("unusable_link", s, f"{stages[s - 1].device}->{st.device}"))
    per_device: dict[int, float] = {}
    for st in stages:
        per_device[st.device] = per_device.get(st.device, 0) + segment_memory(st.layer_lo, st.layer_hi, model)
    out.extend(_device_memory_violations(per_device, cluster))
    return out


def validate_plan(plan, model: ModelProfile, cluster: ClusterProfile) -> list[Violation]:
    """Return every constraint the plan breaks; an empty list means feasible.

    Accepts a :class:`LatencyPlan`, a :class:`ThroughputPlan`, a sequence of
    :class:`Stage` or a plain assignment sequence.
    """
    if isinstance(plan, ThroughputPlan):
        return _validate_stages(plan.stages, model, cluster)
    if isinstance(plan, LatencyPlan):
        return _validate_assignment(plan.assignment, model, cluster)
    plan = list(plan)
    if plan and isinstance(plan[0], Stage):
        return _validate_stages(plan, model, cluster)
    return _validate_assignment(plan, model, cluster)
