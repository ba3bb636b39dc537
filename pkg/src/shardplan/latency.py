"""Layer-to-device placement minimizing sequential per-token latency.

``DP[i][j]`` is the cheapest way to run layers ``0..i`` with layer ``i`` on
device ``j``.  Layer 0 is pinned to the source device.  The last layer also
pays for returning the generated token to the source.

In ``paper`` mode each cell carries the remaining-memory vector of the path
that produced it and a transition is only taken when the next layer still fits
on that path.  This is a greedy rule: with binding memory it can miss the
optimum or even every feasible placement.  ``exact`` mode refuses instances
whose memory is not slack and then drops the bookkeeping, which makes the
result globally optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import (
    ClusterProfile,
    LatencyPlan,
    ModelProfile,
    can_host,
    comm_time,
    effective_layer_time,
    link_usable,
    plan_total_latency,
)
from .errors import Infeasible, MemoryNotSlack

PAPER = "paper"
EXACT = "exact-unconstrained"
MODES = (PAPER, EXACT)

INF = math.inf


@dataclass
class LatencyDpState:
    dp: list[list[float]]
    choice: list[list[int | None]]
    remaining_mem: list[list[tuple[float, ...] | None]]


def memory_is_slack(model: ModelProfile, cluster: ClusterProfile) -> bool:
    """True when every device could hold every layer it is able to run at once."""
    for j, dev in enumerate(cluster.devices):
        need = sum(l.memory_bytes for l in model.layers if can_host(l, j))
        if need > dev.memory_budget_bytes:
            return False
    return True


def fill_latency_dp(model: ModelProfile, cluster: ClusterProfile, mode: str = PAPER) -> LatencyDpState:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    n, m = model.n_layers, cluster.n_devices
    track = mode == PAPER
    last = n - 1

    dp = [[INF] * m for _ in range(n)]
    choice: list[list[int | None]] = [[None] * m for _ in range(n)]
    rem: list[list[tuple[float, ...] | None]] = [[None] * m for _ in range(n)]

    def token_return(j):
        return comm_time(model.token_return_bytes, j, 0, cluster)

    layer0 = model.layers[0]
    budgets = [d.memory_budget_bytes for d in cluster.devices]
    if not can_host(layer0, 0) or layer0.memory_bytes > budgets[0]:
        return LatencyDpState(dp, choice, rem)
    dp[0][0] = effective_layer_time(layer0, 0) + (token_return(0) if last == 0 else 0.0)
    choice[0][0] = 0
    start = list(budgets)
    start[0] -= layer0.memory_bytes
    rem[0][0] = tuple(start)

    for i in range(1, n):
        layer = model.layers[i]
        payload = model.layers[i - 1].activation_bytes
        for j in range(m):
            if not can_host(layer, j):
                continue
            if i == last and not link_usable(j, 0, cluster):
                continue
            t_comp = effective_layer_time(layer, j)
            t_ret = token_return(j) if i == last else 0.0
            for k in range(m):
                prev = dp[i - 1][k]
                if prev == INF or not link_usable(k, j, cluster):
                    continue
                if track and rem[i - 1][k][j] < layer.memory_bytes:
                    continue
                total = prev + t_comp + comm_time(payload, k, j, cluster) + t_ret
                if total < dp[i][j]:
                    dp[i][j] = total
                    choice[i][j] = k
                    if track:
                        r = list(rem[i - 1][k])
                        r[j] -= layer.memory_bytes
                        rem[i][j] = tuple(r)
    return LatencyDpState(dp, choice, rem)


def backtrack_latency(state: LatencyDpState) -> tuple[int, ...]:
    """Recover the assignment from the filled table (ties on the last layer go to the lowest device)."""
    final = state.dp[-1]
    best = min(final)
    if best == INF:
        raise Infeasible("no memory- and link-feasible placement reaches the last layer")
    j = final.index(best)
    out = [j]
    for i in range(len(state.dp) - 1, 0, -1):
        j = state.choice[i][j]
        out.append(j)
    out.reverse()
    return tuple(out)


def plan_min_latency(model: ModelProfile, cluster: ClusterProfile, mode: str = PAPER) -> LatencyPlan:
    """Plan a latency-optimal placement.

    ``predicted_latency_ms`` is recomputed from the returned assignment with
    :func:`~shardplan.core.plan_total_latency`, so it agrees exactly with any
    later re-evaluation.
    """
    if mode == EXACT and not memory_is_slack(model, cluster):
        raise MemoryNotSlack("exact-unconstrained mode needs every device to fit all layers it can run")
    state = fill_latency_dp(model, cluster, mode)
    assignment = backtrack_latency(state)
    return LatencyPlan(assignment, plan_total_latency(assignment, model, cluster), mode)
