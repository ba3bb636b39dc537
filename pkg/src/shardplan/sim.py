"""Discrete-event replay of pipelined autoregressive inference.

Every micro-batch runs one prefill iteration followed by ``gen_len - 1``
decode iterations.  An iteration visits the stages in order, and the
generated token then travels from the last stage back to the source before
the micro-batch can start its next iteration.

Devices run one compute task at a time.  Directed links carry one transfer
at a time.  Both serve their queues first-come first-served, and equal ready
times are broken by (iteration, micro-batch).  Compute and transfers overlap
freely.

Two schedules are supported:

``no_bubbles``
    a micro-batch starts its next iteration as soon as its own token is back.
``bubbles``
    stage 0 additionally waits until every micro-batch has finished the
    previous iteration (an iteration barrier).
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .core import (
    ClusterProfile,
    LatencyPlan,
    ModelProfile,
    Stage,
    ThroughputPlan,
    comm_time,
    stages_from_assignment,
    validate_plan,
)
from .errors import InvalidPlan, IoError, KvOverflow

BUBBLES = "bubbles"
NO_BUBBLES = "no_bubbles"
STRATEGIES = (BUBBLES, NO_BUBBLES)

DEFAULT_BATCH_CAP = 4096


@dataclass(frozen=True)
class SimConfig:
    micro_batches: int = 1
    batch_per_micro: int = 1
    prompt_len: int | None = None
    gen_len: int | None = None
    strategy: str = NO_BUBBLES

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.micro_batches < 1 or self.batch_per_micro < 1:
            raise ValueError("micro_batches and batch_per_micro must be >= 1")
        for name in ("prompt_len", "gen_len"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")

    def resolved(self, model: ModelProfile) -> tuple[int, int]:
        return (self.prompt_len or model.prompt_len, self.gen_len or model.gen_len)


@dataclass(frozen=True)
class ComputeEvent:
    device: int
    micro_batch: int
    iteration: int
    phase: str  # "prefill" or "decode"
    start_ms: float
    end_ms: float
    stage: int = 0
    ready_ms: float = 0.0


@dataclass(frozen=True)
class TransferEvent:
    src: int
    dst: int
    micro_batch: int
    iteration: int
    kind: str  # "activation" or "token_return"
    start_ms: float
    end_ms: float
    stage: int = 0
    ready_ms: float = 0.0


@dataclass
class SimResult:
    makespan_ms: float
    tokens_total: int
    throughput_tps: float
    avg_token_latency_ms: float
    device_busy_ms: dict[int, float]
    timeline: list[ComputeEvent]
    transfers: list[TransferEvent] = field(default_factory=list)
    token_arrivals_ms: list[list[float]] = field(default_factory=list)
    stages: tuple[Stage, ...] = ()
    config: SimConfig | None = None
    plan_hash: str = ""

    @property
    def utilization(self) -> dict[int, float]:
        if self.makespan_ms <= 0:
            return {d: 0.0 for d in self.device_busy_ms}
        return {d: busy / self.makespan_ms for d, busy in self.device_busy_ms.items()}


@dataclass(frozen=True)
class KvAccount:
    """Bytes each device must reserve: resident weights plus the pre-allocated KV cache."""

    weights: dict[int, float]
    kv: dict[int, float]

    def total(self, device: int) -> float:
        return self.weights[device] + self.kv[device]

    def overflows(self, cluster: ClusterProfile) -> list[int]:
        return [d for d in sorted(self.weights) if self.total(d) > cluster.budget(d)]


# ---------------------------------------------------------------------------
# plan handling


def _plan_stages(plan, model: ModelProfile, cluster: ClusterProfile, allow_revisit: bool) -> tuple[Stage, ...]:
    if isinstance(plan, ThroughputPlan):
        stages = tuple(plan.stages)
        problems = validate_plan(plan, model, cluster)
    else:
        assignment = plan.assignment if isinstance(plan, LatencyPlan) else tuple(plan)
        problems = validate_plan(list(assignment), model, cluster)
        if problems:
            raise InvalidPlan("; ".join(map(str, problems)))
        stages = tuple(stages_from_assignment(assignment))
        devices = [s.device for s in stages]
        if len(set(devices)) != len(devices) and not allow_revisit:
            raise InvalidPlan("assignment revisits a device; only sequential (single micro-batch) replay supports that")
    if problems:
        raise InvalidPlan("; ".join(map(str, problems)))
    return stages


def kv_account(plan, model: ModelProfile, total_batch: int, prompt_len: int, gen_len: int) -> KvAccount:
    """Per-device weights and KV pre-allocation for ``total_batch`` requests of ``prompt_len + gen_len`` tokens."""
    if isinstance(plan, ThroughputPlan):
        assignment = plan.assignment()
    elif isinstance(plan, LatencyPlan):
        assignment = plan.assignment
    else:
        stages = list(plan)
        assignment = ThroughputPlan(tuple(stages), 0.0).assignment() if stages and isinstance(stages[0], Stage) else stages
    weights: dict[int, float] = {}
    kv: dict[int, float] = {}
    tokens = prompt_len + gen_len
    for i, d in enumerate(assignment):
        layer = model.layers[i]
        weights[d] = weights.get(d, 0) + layer.memory_bytes
        kv[d] = kv.get(d, 0) + total_batch * layer.kv_bytes_per_token * tokens
    return KvAccount(weights, kv)


def max_feasible_batch(plan, model: ModelProfile, cluster: ClusterProfile,
                       prompt_len: int | None = None, gen_len: int | None = None,
                       cap: int = DEFAULT_BATCH_CAP) -> int:
    """Largest total batch whose KV pre-allocation fits next to the weights on every device.

    Returns 0 when even a single request does not fit, and ``cap`` when the
    model has no KV cache at all.
    """
    prompt_len = prompt_len or model.prompt_len
    gen_len = gen_len or model.gen_len
    per_request = kv_account(plan, model, 1, prompt_len, gen_len)
    best = cap
    for d in sorted(per_request.weights):
        free = cluster.budget(d) - per_request.weights[d]
        if free < 0:
            return 0
        need = per_request.kv[d]
        if need > 0:
            best = min(best, int(free // need))
    return max(best, 0)


def plan_hash(stages: Sequence[Stage]) -> str:
    text = json.dumps([[s.layer_lo, s.layer_hi, s.device] for s in stages])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# event loop


@dataclass
class _Task:
    key: tuple  # (iteration, micro_batch, order) tie-break
    kind: str
    stage: int
    micro_batch: int
    iteration: int
    resource: tuple | None
    duration: float
    ready: float = 0.0


class _Replay:
    def __init__(self, stages, model, cluster, cfg: SimConfig):
        self.stages = stages
        self.model = model
        self.cluster = cluster
        self.cfg = cfg
        self.prompt_len, self.gen_len = cfg.resolved(model)
        self.n_stages = len(stages)
        self.G = cfg.micro_batches
        b = cfg.batch_per_micro

        self.prefill = [sum(model.layers[i].compute_time[s.device].prefill_ms for i in range(s.layer_lo, s.layer_hi))
                        for s in stages]
        self.decode = [sum(model.layers[i].compute_time[s.device].decode_ms for i in range(s.layer_lo, s.layer_hi))
                       for s in stages]
        self.hop_prefill = []
        self.hop_decode = []
        for s in range(self.n_stages - 1):
            src, dst = stages[s].device, stages[s + 1].device
            act = model.layers[stages[s].layer_hi - 1].activation_bytes * b
            self.hop_prefill.append(comm_time(act * self.prompt_len, src, dst, cluster))
            self.hop_decode.append(comm_time(act, src, dst, cluster))
        self.ret = comm_time(model.token_return_bytes * b, stages[-1].device, 0, cluster)

        self.events: list = []
        self.seq = 0
        self.queues: dict[tuple, list] = {}
        self.busy: dict[tuple, bool] = {}
        self.timeline: list[ComputeEvent] = []
        self.transfers: list[TransferEvent] = []
        self.arrivals = [[math.nan] * self.gen_len for _ in range(self.G)]
        self.returned = [0] * self.gen_len

    # task constructors -----------------------------------------------------

    def compute(self, s, g, t):
        dev = self.stages[s].device
        dur = self.prefill[s] if t == 0 else self.decode[s]
        return _Task((t, g, 2 * s), "compute", s, g, t, ("dev", dev), dur)

    def hop(self, s, g, t):
        src, dst = self.stages[s].device, self.stages[s + 1].device
        dur = self.hop_prefill[s] if t == 0 else self.hop_decode[s]
        res = ("link", src, dst) if dur > 0 else None
        return _Task((t, g, 2 * s + 1), "activation", s, g, t, res, dur)

    def token_return(self, g, t):
        src = self.stages[-1].device
        res = ("link", src, 0) if self.ret > 0 and src != 0 else None
        return _Task((t, g, 2 * self.n_stages), "token_return", self.n_stages - 1, g, t, res, self.ret if res else 0.0)

    # event plumbing --------------------------------------------------------

    def push(self, time, kind, task):
        heapq.heappush(self.events, (time, task.key, self.seq, kind, task))
        self.seq += 1

    def ready(self, time, task):
        self.push(time, "ready", task)

    def run(self):
        for g in range(self.G):
            self.ready(0.0, self.compute(0, g, 0))
        while self.events:
            now = self.events[0][0]
            while self.events and self.events[0][0] == now:
                _, _, _, kind, task = heapq.heappop(self.events)
                if kind == "ready":
                    task.ready = now
                    if task.resource is None:
                        self.push(now, "done", task)
                    else:
                        heapq.heappush(self.queues.setdefault(task.resource, []), (now, task.key, id(task), task))
                else:
                    if task.resource is not None:
                        self.busy[task.resource] = False
                    self.finish(now, task)
            for res in sorted(self.queues, key=repr):
                q = self.queues[res]
                if q and not self.busy.get(res, False):
                    _, _, _, task = heapq.heappop(q)
                    self.busy[res] = True
                    self.record(now, task)
                    self.push(now + task.duration, "done", task)

    def record(self, start, task):
        end = start + task.duration
        if task.kind == "compute":
            self.timeline.append(ComputeEvent(task.resource[1], task.micro_batch, task.iteration,
                                              "prefill" if task.iteration == 0 else "decode",
                                              start, end, task.stage, task.ready))
        else:
            _, src, dst = task.resource
            self.transfers.append(TransferEvent(src, dst, task.micro_batch, task.iteration, task.kind,
                                                start, end, task.stage, task.ready))

    def finish(self, now, task):
        s, g, t = task.stage, task.micro_batch, task.iteration
        if task.kind == "compute":
            if s + 1 < self.n_stages:
                self.ready(now, self.hop(s, g, t))
            else:
                self.ready(now, self.token_return(g, t))
        elif task.kind == "activation":
            self.ready(now, self.compute(s + 1, g, t))
        else:
            self.arrivals[g][t] = now
            if t + 1 >= self.gen_len:
                return
            if self.cfg.strategy == NO_BUBBLES:
                self.ready(now, self.compute(0, g, t + 1))
            else:
                self.returned[t] += 1
                if self.returned[t] == self.G:
                    for gg in range(self.G):
                        self.ready(now, self.compute(0, gg, t + 1))


def simulate(plan, model: ModelProfile, cluster: ClusterProfile, config: SimConfig | None = None) -> SimResult:
    """Replay ``plan`` and report makespan, throughput, per-token latency and device busy time.

    ``plan`` is a :class:`ThroughputPlan`, a :class:`LatencyPlan` or an
    assignment.  Assignments are cut into stages at device changes; one that
    returns to an earlier device can only be replayed with a single
    micro-batch (sequential inference).
    """
    cfg = config or SimConfig()
    stages = _plan_stages(plan, model, cluster, allow_revisit=cfg.micro_batches == 1)
    prompt_len, gen_len = cfg.resolved(model)
    total_batch = cfg.micro_batches * cfg.batch_per_micro
    account = kv_account(stages, model, total_batch, prompt_len, gen_len)
    over = account.overflows(cluster)
    if over:
        d = over[0]
        raise KvOverflow(f"device {d} needs {account.total(d):g} bytes for weights + KV, budget {cluster.budget(d):g}")

    replay = _Replay(stages, model, cluster, cfg)
    replay.run()

    makespan = max(a[-1] for a in replay.arrivals)
    tokens = cfg.micro_batches * cfg.batch_per_micro * gen_len
    busy: dict[int, float] = {}
    for s in stages:
        busy.setdefault(s.device, 0.0)
    for ev in replay.timeline:
        busy[ev.device] += ev.end_ms - ev.start_ms
    timeline = sorted(replay.timeline, key=lambda e: (e.start_ms, e.device, e.iteration, e.micro_batch))
    return SimResult(
        makespan_ms=makespan,
        tokens_total=tokens,
        throughput_tps=tokens / (makespan / 1e3) if makespan > 0 else math.inf,
        avg_token_latency_ms=sum(a[-1] for a in replay.arrivals) / (cfg.micro_batches * gen_len),
        device_busy_ms=busy,
        timeline=timeline,
        transfers=sorted(replay.transfers, key=lambda e: (e.start_ms, e.src, e.dst)),
        token_arrivals_ms=replay.arrivals,
        stages=tuple(stages),
        config=cfg,
        plan_hash=plan_hash(stages),
    )


def export_timeline(result: SimResult, path) -> None:
    """Write compute events, one per line, sorted by start time."""
    cfg = result.config or SimConfig()
    header = {"micro_batches": cfg.micro_batches, "batch_per_micro": cfg.batch_per_micro,
              "prompt_len": cfg.prompt_len, "gen_len": cfg.gen_len, "strategy": cfg.strategy}
    lines = [f"# plan={result.plan_hash} config={json.dumps(header, sort_keys=True)}",
             "device,micro_batch,iteration,phase,start_ms,end_ms"]
    for ev in sorted(result.timeline, key=lambda e: (e.start_ms, e.device, e.iteration, e.micro_batch)):
        lines.append(f"{ev.device},{ev.micro_batch},{ev.iteration},{ev.phase},{ev.start_ms:.6f},{ev.end_ms:.6f}")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
