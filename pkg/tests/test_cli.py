import csv
import io
import json

import pytest

from shardplan.cli import main, parse_bandwidth, parse_bandwidth_list, resolve_device, UsageError
from shardplan.oracle import brute_force_latency
from shardplan.profile_io import load_plan, load_profile

from conftest import FIXTURES

F1 = str(FIXTURES / "f1.profile.json")


def run(*argv):
    buf = io.StringIO()
    code = main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


@pytest.fixture
def edge_cloud(tmp_path):
    path = tmp_path / "ec.json"
    code, _ = run("gen-profile", "--layers", 8, "--devices", "edge,cloud", "--bandwidth", "10Mbps",
                  "--uniform", "--out", path)
    assert code == 0
    return path


def test_parse_bandwidth():
    assert parse_bandwidth("50Mbps") == 50e6
    assert parse_bandwidth("1.5Gbps") == 1.5e9
    assert parse_bandwidth("800", "kbps") == 800e3
    assert parse_bandwidth_list("1,5,10Mbps") == [1e6, 5e6, 10e6]
    for bad in ("fast", "-3Mbps", "3 parsecs"):
        with pytest.raises(UsageError):
            parse_bandwidth(bad)


def test_resolve_device(edge_cloud):
    cluster = load_profile(edge_cloud).cluster
    assert resolve_device("source", cluster) == 0
    assert resolve_device("1", cluster) == 1
    labels = [d.label for d in cluster.devices]
    assert resolve_device(labels[1], cluster) == 1
    with pytest.raises(UsageError):
        resolve_device("moon", cluster)


def test_gen_profile_examples(tmp_path):
    path = tmp_path / "p.json"
    code, text = run("gen-profile", "--layers", 32, "--devices", "agx_orin,orin_nx,rtx3090", "--seed", 3,
                     "--link", "source:rtx3090=1Mbps", "--out", path)
    assert code == 0 and "N=32 M=3" in text
    doc = load_profile(path)
    assert doc.model.total_memory() == 28e9
    assert doc.cluster.bandwidth(0, 2) == doc.cluster.bandwidth(2, 0) == 1e6 / 8
    assert doc.cluster.bandwidth(0, 1) == 50e6 / 8


@pytest.mark.parametrize("argv", [
    ["--layers", 0, "--devices", "edge"],
    ["--layers", 4, "--devices", "warp_drive"],
    ["--layers", 4, "--devices", "edge,cloud", "--link", "edge:moon=1Mbps"],
    ["--layers", 4, "--devices", "edge,cloud", "--bandwidth", "fast"],
])
def test_gen_profile_bad_input(tmp_path, argv):
    code, _ = run("gen-profile", *argv, "--out", tmp_path / "p.json")
    assert code == 2


def test_usage_errors():
    assert run()[0] == 2
    assert run("plan")[0] == 2
    assert run("plan", F1, "--objective", "speed")[0] == 2


def test_plan_latency_matches_oracle(tmp_path, f1):
    code, text = run("plan", F1, "--objective", "latency", "--out", tmp_path / "plan.json")
    assert code == 0
    value = float(text.splitlines()[0].split("=")[1])
    assert value == pytest.approx(brute_force_latency(f1.model, f1.cluster)[0], rel=1e-9)
    assert load_plan(tmp_path / "plan.json").assignment == (0, 1, 1, 1)


def test_plan_throughput_table():
    code, text = run("plan", F1, "--objective", "throughput")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "predicted_stage_time_ms=20.000000"
    assert lines[1].split() == ["stage", "layers", "device", "compute_ms", "comm_in_ms", "memory_bytes"]
    assert len(lines) == 2 + 3


def test_plan_oversized_layer(tmp_path):
    raw = json.loads((FIXTURES / "f1.profile.json").read_text())
    raw["model"]["layers"][2]["memory_bytes"] = 10_000
    path = tmp_path / "big.json"
    path.write_text(json.dumps(raw))
    assert run("plan", path)[0] == 3
    assert run("plan", path, "--objective", "throughput")[0] == 3


def test_plan_exact_mode_needs_slack(tmp_path):
    raw = json.loads((FIXTURES / "f1.profile.json").read_text())
    for d in raw["cluster"]["devices"]:
        d["memory_budget_bytes"] = 250
    path = tmp_path / "tight.json"
    path.write_text(json.dumps(raw))
    assert run("plan", path, "--mode", "exact-unconstrained")[0] == 2
    assert run("plan", path)[0] == 0


def test_plan_missing_profile(tmp_path):
    assert run("plan", tmp_path / "none.json")[0] == 2


def test_validate(tmp_path):
    run("plan", F1, "--out", tmp_path / "ok.json")
    code, text = run("validate", F1, tmp_path / "ok.json")
    assert code == 0 and "0 violation(s)" in text
    bad = json.loads((tmp_path / "ok.json").read_text())
    bad["assignment"][0] = 1
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    code, text = run("validate", F1, tmp_path / "bad.json")
    assert code == 3 and "privacy" in text


def test_validate_oracle_report():
    code, text = run("validate", F1, "--oracle")
    assert code == 0
    lines = dict(l.split(": ", 1) for l in text.splitlines())
    assert "gap=0.000000" in lines["latency"]
    assert "gap=0.000000" in lines["throughput"]


def test_validate_oracle_too_large(tmp_path):
    path = tmp_path / "p.json"
    run("gen-profile", "--layers", 20, "--devices", "edge,edge,edge,cloud,cloud,cloud", "--out", path)
    code, text = run("validate", path, "--oracle", "--objective", "latency")
    assert code == 4 and "oracle skipped" in text


def test_validate_needs_something():
    assert run("validate", F1)[0] == 2


def test_simulate_strategies(tmp_path, edge_cloud):
    run("plan", edge_cloud, "--objective", "throughput", "--out", tmp_path / "tp.json")
    rates = {}
    for strategy in ("no_bubbles", "bubbles"):
        code, text = run("simulate", edge_cloud, tmp_path / "tp.json", "--micro-batches", 4, "--gen-len", 16,
                         "--strategy", strategy)
        assert code == 0
        values = dict(l.split("=", 1) for l in text.splitlines() if l.count("=") == 1)
        rates[strategy] = float(values["tokens_per_s"])
    assert rates["no_bubbles"] >= rates["bubbles"]


def test_simulate_export(tmp_path, edge_cloud):
    run("plan", edge_cloud, "--objective", "throughput", "--out", tmp_path / "tp.json")
    code, _ = run("simulate", edge_cloud, tmp_path / "tp.json", "--gen-len", 4, "--export", tmp_path / "t.csv")
    assert code == 0
    assert (tmp_path / "t.csv").read_text().splitlines()[1].startswith("device,")


def test_simulate_errors(tmp_path, edge_cloud):
    run("plan", edge_cloud, "--objective", "throughput", "--out", tmp_path / "tp.json")
    assert run("simulate", edge_cloud, tmp_path / "tp.json", "--strategy", "eager")[0] == 2
    assert run("simulate", edge_cloud, tmp_path / "tp.json", "--batch", 100000)[0] == 3


def test_sweep_trend(tmp_path, edge_cloud):
    code, text = run("sweep", edge_cloud, "--link", "source:cloud", "--values", "1,10,100,1000Mbps",
                     "--out", tmp_path / "s.csv")
    assert code == 0
    assert (tmp_path / "s.csv").read_text() == text
    rows = list(csv.DictReader(io.StringIO(text)))
    lat = [float(r["predicted_latency_ms"]) for r in rows]
    assert all(b <= a for a, b in zip(lat, lat[1:]))
    assert [float(r["bandwidth_bps"]) for r in rows] == [1e6, 1e7, 1e8, 1e9]


def test_sweep_throughput(edge_cloud):
    code, text = run("sweep", edge_cloud, "--link", "source:cloud", "--values", "1,100Mbps",
                     "--objective", "throughput", "--gen-len", 8)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    assert float(rows[1]["simulated_tokens_per_s"]) >= float(rows[0]["simulated_tokens_per_s"])


@pytest.mark.parametrize("argv", [
    ["--link", "source:cloud", "--values", ""],
    ["--link", "source:moon", "--values", "1Mbps"],
    ["--link", "source:source", "--values", "1Mbps"],
])
def test_sweep_bad_input(edge_cloud, argv):
    assert run("sweep", edge_cloud, *argv)[0] == 2


def test_outputs_are_deterministic(tmp_path):
    outs = []
    for tag in "ab":
        d = tmp_path / tag
        d.mkdir()
        texts = [run("gen-profile", "--layers", 12, "--devices", "edge,orin_nx,cloud", "--seed", 5,
                     "--out", d / "p.json")[1]]
        texts.append(run("plan", d / "p.json", "--objective", "throughput", "--out", d / "plan.json")[1])
        texts.append(run("simulate", d / "p.json", d / "plan.json", "--gen-len", 6, "--export", d / "t.csv")[1])
        texts.append(run("sweep", d / "p.json", "--link", "source:cloud", "--values", "1,50Mbps")[1])
        files = [(d / n).read_bytes() for n in ("p.json", "plan.json", "t.csv")]
        outs.append(([t.replace(str(d), "") for t in texts], files))
    assert outs[0] == outs[1]
