import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardplan.core import (
    ClusterProfile,
    DeviceProfile,
    LayerProfile,
    ModelProfile,
    PhaseTimes,
    Stage,
    plan_bottleneck,
    plan_total_latency,
    validate_plan,
)
from shardplan.errors import Infeasible, TooLarge, UnsupportedLayer, UnusableLink
from shardplan.oracle import brute_force_latency, brute_force_throughput, throughput_search_size

from instances import random_instance


def loop_latency_oracle(model, cluster):
    """Plain per-assignment reference for the vectorized oracle."""
    best = (math.inf, None)
    for rest in itertools.product(range(cluster.n_devices), repeat=model.n_layers - 1):
        a = (0,) + rest
        if validate_plan(list(a), model, cluster):
            continue
        try:
            v = plan_total_latency(a, model, cluster)
        except (UnusableLink, UnsupportedLayer):
            continue
        if v < best[0]:
            best = (v, a)
    return best


def uniform_cluster(m, budget=1000, bw=1e30):
    devices = tuple(DeviceProfile(j, budget) for j in range(m))
    return ClusterProfile(devices, tuple(tuple(0.0 if k == j else bw for j in range(m)) for k in range(m)))


def uniform_model(n, m, t=1.0, act=0.0, mem=1):
    return ModelProfile(tuple(LayerProfile(i, {j: PhaseTimes(t, t) for j in range(m)}, act, mem) for i in range(n)))


def test_single_device():
    model, cluster = uniform_model(5, 1), uniform_cluster(1)
    assert brute_force_latency(model, cluster) == (5.0, (0,) * 5)
    value, stages = brute_force_throughput(model, cluster)
    assert value == 5.0 and stages == (Stage(0, 5, 0),)


def test_memory_filter_two_layers():
    model = uniform_model(2, 2, mem=5)
    cluster = ClusterProfile((DeviceProfile(0, 10), DeviceProfile(1, 4)), ((0, 1e30), (1e30, 0)))
    assert brute_force_latency(model, cluster)[1] == (0, 0)


def test_f1_recorded(f1, f1_expected):
    value, a = brute_force_latency(f1.model, f1.cluster)
    assert a == tuple(f1_expected["latency_optimum"]["assignment"])
    assert value == pytest.approx(f1_expected["latency_optimum"]["total_ms"], rel=1e-9)
    assert loop_latency_oracle(f1.model, f1.cluster) == (value, a)
    value, stages = brute_force_throughput(f1.model, f1.cluster)
    assert value == f1_expected["throughput_optimum"]["bottleneck_ms"]
    assert [[s.layer_lo, s.layer_hi, s.device] for s in stages] == f1_expected["throughput_optimum"]["stages"]


@pytest.mark.parametrize("n", [2, 4, 5, 7])
def test_uniform_symmetric_even_split(n):
    value, stages = brute_force_throughput(uniform_model(n, 2), uniform_cluster(2))
    assert value == math.ceil(n / 2)
    assert sorted(s.n_layers for s in stages) == sorted([n // 2, n - n // 2])


def test_infeasible():
    model = uniform_model(3, 2, mem=50)
    cluster = uniform_cluster(2, budget=10)
    with pytest.raises(Infeasible):
        brute_force_latency(model, cluster)
    with pytest.raises(Infeasible):
        brute_force_throughput(model, cluster)


def test_too_large():
    model, cluster = uniform_model(12, 5), uniform_cluster(5)
    with pytest.raises(TooLarge):
        brute_force_latency(model, cluster)
    with pytest.raises(TooLarge):
        brute_force_throughput(model, cluster, limit=10)


def test_throughput_search_size():
    # C(19, s-1) * P(5, s-1) summed over s = 1..6
    assert throughput_search_size(20, 6) == 1 + 19 * 5 + 171 * 20 + 969 * 60 + 3876 * 120 + 11628 * 120


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10**6), slack=st.booleans(), missing=st.sampled_from([0.0, 0.2]),
       dead=st.sampled_from([0.0, 0.2]))
def test_vectorized_oracle_matches_loop(seed, slack, missing, dead):
    model, cluster = random_instance(seed, max_layers=6, max_devices=3, slack=slack,
                                     missing_prob=missing, dead_link_prob=dead)
    ref_value, ref_a = loop_latency_oracle(model, cluster)
    if ref_a is None:
        with pytest.raises(Infeasible):
            brute_force_latency(model, cluster)
        return
    value, a = brute_force_latency(model, cluster)
    assert value == pytest.approx(ref_value, rel=1e-9)
    assert plan_total_latency(a, model, cluster) == value


def relabel(model, cluster, perm):
    """Permute non-source devices: new index perm[old]."""
    m = cluster.n_devices
    inv = {perm[old]: old for old in range(m)}
    devices = tuple(DeviceProfile(new, cluster.devices[inv[new]].memory_budget_bytes) for new in range(m))
    bw = tuple(tuple(cluster.bandwidth(inv[k], inv[j]) for j in range(m)) for k in range(m))
    layers = tuple(LayerProfile(l.index, {perm[d]: t for d, t in l.compute_time.items()},
                                l.activation_bytes, l.memory_bytes) for l in model.layers)
    return ModelProfile(layers, model.token_return_bytes, model.prompt_len, model.gen_len), ClusterProfile(devices, bw)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), slack=st.booleans(), data=st.data())
def test_relabeling_invariance(seed, slack, data):
    model, cluster = random_instance(seed, max_layers=6, max_devices=4, slack=slack)
    m = cluster.n_devices
    rest = data.draw(st.permutations(list(range(1, m))))
    perm = [0] + list(rest)
    model2, cluster2 = relabel(model, cluster, perm)
    for solve in (brute_force_latency, brute_force_throughput):
        try:
            v1 = solve(model, cluster)[0]
        except Infeasible:
            with pytest.raises(Infeasible):
                solve(model2, cluster2)
            continue
        assert solve(model2, cluster2)[0] == pytest.approx(v1, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), slack=st.booleans())
def test_oracle_plans_are_valid(seed, slack):
    model, cluster = random_instance(seed, max_layers=7, max_devices=4, slack=slack, missing_prob=0.1)
    try:
        v, a = brute_force_latency(model, cluster)
        assert validate_plan(list(a), model, cluster) == []
    except Infeasible:
        pass
    try:
        v, stages = brute_force_throughput(model, cluster)
        assert validate_plan(list(stages), model, cluster) == []
        assert plan_bottleneck(stages, model, cluster) == v
    except Infeasible:
        pass
