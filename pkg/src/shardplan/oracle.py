"""Exhaustive solvers used as ground truth for the dynamic programs.

Nothing here imports the planners.  Both solvers only use the cost primitives
from :mod:`shardplan.core`, evaluated into lookup tables up front.
"""

from __future__ import annotations

import math
from itertools import combinations, permutations

import numpy as np

from .core import (
    ClusterProfile,
    ModelProfile,
    Stage,
    can_host,
    comm_time,
    effective_layer_time,
    link_usable,
    plan_bottleneck,
    plan_total_latency,
    segment_compute_time,
    segment_memory,
)
from .errors import Infeasible, TooLarge

MAX_CANDIDATES = 10**7


def latency_search_size(n_layers: int, n_devices: int) -> int:
    return n_devices**n_layers


def throughput_search_size(n_layers: int, n_devices: int) -> int:
    return sum(math.comb(n_layers - 1, s - 1) * math.perm(n_devices - 1, s - 1)
               for s in range(1, min(n_layers, n_devices) + 1))


def brute_force_latency(model: ModelProfile, cluster: ClusterProfile, limit: int = MAX_CANDIDATES):
    """Best sequential-latency assignment over all ``M**(N-1)`` placements with layer 0 on device 0.

    Returns ``(latency_ms, assignment)``.  Exact per-device memory sums are
    checked; ties go to the lexicographically smallest assignment.
    """
    n, m = model.n_layers, cluster.n_devices
    if latency_search_size(n, m) > limit:
        raise TooLarge(f"{m}^{n} assignments exceed the limit of {limit}")

    inf = math.inf
    comp = np.array([[effective_layer_time(l, j) if can_host(l, j) else inf for j in range(m)]
                     for l in model.layers])
    hop = np.array([[[comm_time(model.layers[i - 1].activation_bytes, k, j, cluster)
                      if link_usable(k, j, cluster) else inf for j in range(m)] for k in range(m)]
                    for i in range(1, n)]).reshape(n - 1, m, m)
    ret = np.array([comm_time(model.token_return_bytes, j, 0, cluster) if link_usable(j, 0, cluster) else inf
                    for j in range(m)])
    req = np.array([l.memory_bytes for l in model.layers], dtype=float)
    budget = np.array([d.memory_budget_bytes for d in cluster.devices], dtype=float)

    # every assignment with a[0] = 0, in lexicographic order
    free = np.indices((m,) * (n - 1)).reshape(n - 1, -1).T if n > 1 else np.zeros((1, 0), dtype=int)
    a = np.concatenate([np.zeros((free.shape[0], 1), dtype=int), free], axis=1)

    total = comp[np.arange(n), a].sum(axis=1)
    for i in range(1, n):
        total += hop[i - 1, a[:, i - 1], a[:, i]]
    total += ret[a[:, -1]]
    for j in range(m):
        used = (a == j).astype(float) @ req
        total[used > budget[j]] = inf

    best = total.min()
    if not math.isfinite(best):
        raise Infeasible("no assignment satisfies memory, privacy and link constraints")
    # first index within rounding of the minimum = lexicographically smallest optimum
    idx = int(np.flatnonzero(total <= best * (1 + 1e-12) + 1e-300)[0])
    assignment = tuple(int(x) for x in a[idx])
    return plan_total_latency(assignment, model, cluster), assignment


def brute_force_throughput(model: ModelProfile, cluster: ClusterProfile, limit: int = MAX_CANDIDATES):
    """Best pipeline bottleneck over every contiguous partition and injective device sequence.

    Stage 0 sits on device 0.  Returns ``(bottleneck_ms, stages)``.  Candidates
    are scanned by stage count, then device sequence, then cut positions, and
    only a strictly better value replaces the incumbent.
    """
    n, m = model.n_layers, cluster.n_devices
    if throughput_search_size(n, m) > limit:
        raise TooLarge("contiguous partitions x device sequences exceed the limit")

    # seg[j][lo][hi]: compute time of [lo, hi) on j, or None when it cannot be hosted
    seg = [[[None] * (n + 1) for _ in range(n + 1)] for _ in range(m)]
    for j in range(m):
        budget = cluster.budget(j)
        for lo in range(n):
            for hi in range(lo + 1, n + 1):
                if not can_host(model.layers[hi - 1], j) or segment_memory(lo, hi, model) > budget:
                    break
                seg[j][lo][hi] = segment_compute_time(lo, hi, j, model)
    hop = [[[comm_time(model.layers[lo - 1].activation_bytes, k, j, cluster) if link_usable(k, j, cluster) else None
             for j in range(m)] for k in range(m)] if lo > 0 else None for lo in range(n)]

    best_val, best_bounds, best_devs = math.inf, None, None
    for s in range(1, min(n, m) + 1):
        for rest in permutations(range(1, m), s - 1):
            devs = (0,) + rest
            for cuts in combinations(range(1, n), s - 1):
                bounds = (0,) + cuts + (n,)
                worst = 0.0
                for t in range(s):
                    lo, hi, dev = bounds[t], bounds[t + 1], devs[t]
                    c = seg[dev][lo][hi]
                    if c is None:
                        break
                    if t > 0:
                        x = hop[lo][devs[t - 1]][dev]
                        if x is None:
                            break
                        c = max(c, x)
                    if c > worst:
                        worst = c
                    if worst >= best_val:
                        break
                else:
                    best_val, best_bounds, best_devs = worst, bounds, devs
    if best_bounds is None:
        raise Infeasible("no contiguous segmentation fits the devices")
    stages = tuple(Stage(best_bounds[t], best_bounds[t + 1], best_devs[t]) for t in range(len(best_devs)))
    return plan_bottleneck(stages, model, cluster), stages
