"""Pipeline partitioning that minimizes the slowest stage (maximizes throughput).

State ``g(m, S, j)``: the smallest achievable bottleneck for running layers
``[0, m)`` on the device set ``S`` (a bitmask that always contains the source,
bit 0) with the last segment ending at ``m`` on device ``j``.  A transition
appends the segment ``[i, m)`` on a device ``j`` not yet in ``S``; its cost is
the larger of the segment compute time and the transfer of layer ``i-1``'s
activation from the previous device.  Each device hosts at most one segment,
so per-segment memory checks are exact and the result is globally optimal.

Cost is ``O(N^2 * 2^M * M^2)``; ``M`` is capped at :data:`MAX_DEVICES`.
A few seconds for ``N=32, M=10``; ``M=15`` takes minutes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import (
    ClusterProfile,
    ModelProfile,
    Stage,
    ThroughputPlan,
    can_host,
    comm_time,
    link_usable,
    segment_compute_time,
)
from .errors import Infeasible, TooLarge

MAX_DEVICES = 20
INF = math.inf


@dataclass
class ThroughputDpState:
    n_layers: int
    g: dict[tuple[int, int, int], float] = field(default_factory=dict)
    # (m, S, j) -> (i, k) of the predecessor state (i, S without j, k); None for the first segment
    choice: dict[tuple[int, int, int], tuple[int, int] | None] = field(default_factory=dict)


def _segment_table(model: ModelProfile, cluster: ClusterProfile):
    """seg[j][lo][hi] = compute time of [lo, hi) on device j, None if it does not fit."""
    n, m = model.n_layers, cluster.n_devices
    seg = [[[None] * (n + 1) for _ in range(n + 1)] for _ in range(m)]
    for j in range(m):
        budget = cluster.budget(j)
        for lo in range(n):
            mem = 0
            for hi in range(lo + 1, n + 1):
                layer = model.layers[hi - 1]
                mem += layer.memory_bytes
                if mem > budget or not can_host(layer, j):
                    break
                seg[j][lo][hi] = segment_compute_time(lo, hi, j, model)
    return seg


def fill_throughput_dp(model: ModelProfile, cluster: ClusterProfile) -> ThroughputDpState:
    n, m = model.n_layers, cluster.n_devices
    if m > MAX_DEVICES:
        raise TooLarge(f"{m} devices exceed the bitmask limit of {MAX_DEVICES}")
    seg = _segment_table(model, cluster)
    state = ThroughputDpState(n)
    g, choice = state.g, state.choice

    # by_count[i] holds the (S, k) pairs reached with exactly i layers placed
    by_count: list[dict[tuple[int, int], float]] = [dict() for _ in range(n + 1)]
    for hi in range(1, n + 1):
        t = seg[0][0][hi]
        if t is None:
            break
        g[(hi, 1, 0)] = t
        choice[(hi, 1, 0)] = None
        by_count[hi][(1, 0)] = t

    for i in range(1, n):
        payload = model.layers[i - 1].activation_bytes
        for (mask, k) in sorted(by_count[i]):
            base = by_count[i][(mask, k)]
            for j in range(m):
                if mask >> j & 1 or not link_usable(k, j, cluster):
                    continue
                entry = max(base, comm_time(payload, k, j, cluster))
                new_mask = mask | 1 << j
                row = seg[j][i]
                for hi in range(i + 1, n + 1):
                    t = row[hi]
                    if t is None:
                        break
                    cand = max(entry, t)
                    key = (hi, new_mask, j)
                    if cand < g.get(key, INF):
                        g[key] = cand
                        choice[key] = (i, k)
                        if hi < n:
                            by_count[hi][(new_mask, j)] = cand
    return state


def _walk(state: ThroughputDpState, key) -> list[Stage]:
    stages = []
    while True:
        hi, mask, j = key
        prev = state.choice[key]
        lo = 0 if prev is None else prev[0]
        stages.append(Stage(lo, hi, j))
        if prev is None:
            break
        key = (prev[0], mask & ~(1 << j), prev[1])
    stages.reverse()
    return stages


def best_final_value(state: ThroughputDpState) -> float:
    values = [v for key, v in state.g.items() if key[0] == state.n_layers]
    if not values:
        raise Infeasible("no memory- and link-feasible segmentation covers all layers")
    return min(values)


def backtrack_throughput(state: ThroughputDpState) -> list[Stage]:
    """Pick the best final state and rebuild its stages.

    Among equal-valued final states the one with fewer stages wins, then the
    lexicographically smaller device sequence.
    """
    best = best_final_value(state)
    ranked = []
    for key, v in state.g.items():
        if key[0] == state.n_layers and v == best:
            stages = _walk(state, key)
            ranked.append((len(stages), [s.device for s in stages], [s.layer_lo for s in stages], stages))
    ranked.sort(key=lambda r: r[:3])
    return ranked[0][3]


def plan_max_throughput(model: ModelProfile, cluster: ClusterProfile) -> ThroughputPlan:
    """Choose devices and contiguous layer segments minimizing the bottleneck stage time."""
    state = fill_throughput_dp(model, cluster)
    return ThroughputPlan(tuple(backtrack_throughput(state)), best_final_value(state))
