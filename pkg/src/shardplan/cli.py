"""Command-line front end.

Exit codes: 0 success, 2 bad input or usage, 3 infeasible plan / KV overflow,
4 oracle instance too large.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import re
import sys

from . import oracle
from .core import validate_plan
from .errors import (
    ConsistencyError,
    Infeasible,
    InvalidPlan,
    InvalidSpec,
    IoError,
    KvOverflow,
    MemoryNotSlack,
    ParseError,
    SchemaError,
    TooLarge,
    UnusableLink,
)
from .latency import MODES, PAPER, plan_min_latency
from .profile_io import (
    SynthesisSpec,
    load_plan,
    load_profile,
    plan_to_dict,
    save_plan,
    save_profile,
    synthesize_profile,
)
from .sim import STRATEGIES, NO_BUBBLES, SimConfig, export_timeline, simulate
from .throughput import plan_max_throughput

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_TOO_LARGE = 0, 2, 3, 4

_UNITS = {"": 1, "bps": 1, "kbps": 1e3, "mbps": 1e6, "gbps": 1e9}
_BW_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-zA-Z]*)\s*$")


class UsageError(Exception):
    pass


def parse_bandwidth(text: str, default_unit: str = "") -> float:
    """'50Mbps' -> 50e6 bits/s.  A bare number takes ``default_unit``."""
    match = _BW_RE.match(text)
    if not match:
        raise UsageError(f"bad bandwidth {text!r}")
    unit = (match.group(2) or default_unit).lower()
    if unit not in _UNITS:
        raise UsageError(f"unknown bandwidth unit in {text!r}")
    value = float(match.group(1)) * _UNITS[unit]
    if value <= 0:
        raise UsageError(f"bandwidth must be positive: {text!r}")
    return value


def parse_bandwidth_list(text: str) -> list[float]:
    """'1,5,10Mbps' -> [1e6, 5e6, 10e6]; a trailing unit applies to unitless entries."""
    items = [t for t in (s.strip() for s in text.split(",")) if t]
    if not items:
        raise UsageError("empty bandwidth list")
    last = _BW_RE.match(items[-1])
    default = last.group(2) if last else ""
    return [parse_bandwidth(t, default) for t in items]


def resolve_device(name: str, cluster) -> int:
    if name == "source":
        return 0
    if name.isdigit():
        idx = int(name)
        if idx < cluster.n_devices:
            return idx
        raise UsageError(f"no device {idx}")
    exact = [d.index for d in cluster.devices if d.label == name]
    if len(exact) == 1:
        return exact[0]
    prefix = [d.index for d in cluster.devices if d.label.split("-")[0] == name]
    if len(prefix) == 1:
        return prefix[0]
    if not exact and not prefix:
        raise UsageError(f"no device named {name!r}")
    raise UsageError(f"device name {name!r} is ambiguous")


def parse_link(text: str, cluster) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"link must look like A:B, got {text!r}")
    a, b = (resolve_device(p, cluster) for p in parts)
    if a == b:
        raise UsageError("a link needs two different devices")
    return a, b


def with_link_bandwidth(cluster, a: int, b: int, bits_per_s: float):
    bw = [list(row) for row in cluster.bandwidth_bps]
    bw[a][b] = bw[b][a] = bits_per_s / 8
    return dataclasses.replace(cluster, bandwidth_bps=tuple(tuple(r) for r in bw))


# ---------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def latency_table(plan, model, cluster) -> str:
    doc = plan_to_dict(plan, model, cluster)
    lines = ["layer  device  compute_ms  comm_in_ms"]
    for row in doc["breakdown"]:
        lines.append(f"{row['layer']:>5}  {row['device']:>6}  {row['compute_ms']:>10.4f}  {row['comm_in_ms']:>10.4f}")
    lines.append(f"token return: {doc['token_return_ms']:.4f} ms")
    return "\n".join(lines)


def stage_table(plan, model, cluster) -> str:
    doc = plan_to_dict(plan, model, cluster)
    lines = ["stage  layers      device  compute_ms  comm_in_ms  memory_bytes"]
    for s, row in enumerate(doc["stages"]):
        span = f"[{row['layer_lo']},{row['layer_hi']})"
        lines.append(f"{s:>5}  {span:<10}  {row['device']:>6}  {row['compute_ms']:>10.4f}  "
                     f"{row['comm_in_ms']:>10.4f}  {row['memory_bytes']:>12g}")
    return "\n".join(lines)


def _plan(model, cluster, objective, mode=PAPER):
    if objective == "latency":
        return plan_min_latency(model, cluster, mode)
    return plan_max_throughput(model, cluster)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_profile(args, out) -> int:
    devices = [d.strip() for d in args.devices.split(",") if d.strip()]
    bw = parse_bandwidth(args.bandwidth, "bps")
    spec = SynthesisSpec(
        n_layers=args.layers, devices=devices, seed=args.seed,
        bandwidth_bits_per_s=bw, prefill_factor=args.prefill_factor,
        base_decode_ms=args.decode_ms, layer_memory_bytes=args.layer_memory_bytes,
        activation_bytes=args.activation_bytes, kv_bytes_per_token=args.kv_bytes_per_token,
        token_return_bytes=args.token_return_bytes, prompt_len=args.prompt_len, gen_len=args.gen_len,
        uniform=args.uniform,
    )
    doc = synthesize_profile(spec)
    if args.link:
        cluster = doc.cluster
        for link in args.link:
            name, _, value = link.partition("=")
            if not value:
                raise UsageError(f"--link needs A:B=BANDWIDTH, got {link!r}")
            a, b = parse_link(name, cluster)
            cluster = with_link_bandwidth(cluster, a, b, parse_bandwidth(value, "bps"))
        doc = dataclasses.replace(doc, cluster=cluster)
    save_profile(doc, args.out)
    print(f"wrote {args.out}: N={doc.model.n_layers} M={doc.cluster.n_devices} "
          f"total_model_bytes={doc.model.total_memory():g}", file=out)
    return EXIT_OK


def cmd_plan(args, out) -> int:
    doc = load_profile(args.profile)
    model, cluster = doc.model, doc.cluster
    plan = _plan(model, cluster, args.objective, args.mode)
    if args.out:
        save_plan(plan, args.out, model, cluster)
    if args.objective == "latency":
        print(f"predicted_latency_ms={_fmt(plan.predicted_latency_ms)}", file=out)
        print(latency_table(plan, model, cluster), file=out)
    else:
        print(f"predicted_stage_time_ms={_fmt(plan.predicted_stage_time_ms)}", file=out)
        print(stage_table(plan, model, cluster), file=out)
    return EXIT_OK


def _oracle_report(model, cluster, objective, out) -> bool:
    """Print DP vs. brute-force values; returns False if the oracle was too large."""
    if objective == "latency":
        dp_fn, bf_fn = plan_min_latency, oracle.brute_force_latency
        value = lambda p: p.predicted_latency_ms  # noqa: E731
    else:
        dp_fn, bf_fn = plan_max_throughput, oracle.brute_force_throughput
        value = lambda p: p.predicted_stage_time_ms  # noqa: E731
    try:
        truth, _ = bf_fn(model, cluster)
    except TooLarge as e:
        print(f"{objective}: oracle skipped ({e})", file=out)
        return False
    except Infeasible:
        truth = None
    try:
        dp = value(dp_fn(model, cluster))
    except Infeasible:
        dp = None
    if truth is None and dp is None:
        print(f"{objective}: dp=infeasible oracle=infeasible gap=0", file=out)
    elif dp is None:
        print(f"{objective}: dp=infeasible oracle={_fmt(truth)} gap=inf", file=out)
    else:
        gap = dp - truth
        rel = gap / truth if truth else 0.0
        print(f"{objective}: dp={_fmt(dp)} oracle={_fmt(truth)} gap={_fmt(gap)} rel_gap={rel:.3e}", file=out)
    return True


def cmd_validate(args, out) -> int:
    doc = load_profile(args.profile)
    model, cluster = doc.model, doc.cluster
    if args.plan is None and not args.oracle:
        raise UsageError("give a plan file or --oracle")
    code = EXIT_OK
    if args.plan is not None:
        plan = load_plan(args.plan)
        problems = validate_plan(plan, model, cluster)
        for v in problems:
            print(f"violation: {v}", file=out)
        print(f"{len(problems)} violation(s)", file=out)
        if problems:
            code = EXIT_INFEASIBLE
    if args.oracle:
        objectives = ["latency", "throughput"] if args.objective == "both" else [args.objective]
        complete = [_oracle_report(model, cluster, o, out) for o in objectives]
        if not all(complete) and code == EXIT_OK:
            code = EXIT_TOO_LARGE
    return code


def _sim_config(args, gen_len=None):
    return SimConfig(micro_batches=args.micro_batches, batch_per_micro=args.batch,
                     prompt_len=args.prompt_len, gen_len=gen_len or args.gen_len, strategy=args.strategy)


def cmd_simulate(args, out) -> int:
    doc = load_profile(args.profile)
    plan = load_plan(args.plan)
    result = simulate(plan, doc.model, doc.cluster, _sim_config(args))
    print(f"makespan_ms={_fmt(result.makespan_ms)}", file=out)
    print(f"tokens={result.tokens_total}", file=out)
    print(f"tokens_per_s={_fmt(result.throughput_tps)}", file=out)
    print(f"ms_per_token={_fmt(result.avg_token_latency_ms)}", file=out)
    for dev, u in sorted(result.utilization.items()):
        print(f"device {dev} utilization={u:.4f} busy_ms={_fmt(result.device_busy_ms[dev])}", file=out)
    if args.export:
        export_timeline(result, args.export)
    return EXIT_OK


def sweep_rows(model, cluster, link, values, objective, config: SimConfig):
    """One row per bandwidth value: (bits/s, predicted metric, simulated metric, compact plan)."""
    a, b = link
    rows = []
    for bits in values:
        c = with_link_bandwidth(cluster, a, b, bits)
        plan = _plan(model, c, objective)
        if objective == "latency":
            sim = simulate(plan, model, c, dataclasses.replace(config, micro_batches=1))
            predicted, simulated = plan.predicted_latency_ms, sim.avg_token_latency_ms
            desc = "-".join(map(str, plan.assignment))
        else:
            sim = simulate(plan, model, c, config)
            predicted, simulated = plan.predicted_stage_time_ms, sim.throughput_tps
            desc = " ".join(f"[{s.layer_lo},{s.layer_hi})@{s.device}" for s in plan.stages)
        rows.append((bits, predicted, simulated, desc))
    return rows


def cmd_sweep(args, out) -> int:
    doc = load_profile(args.profile)
    model, cluster = doc.model, doc.cluster
    link = parse_link(args.link, cluster)
    values = parse_bandwidth_list(args.values)
    rows = sweep_rows(model, cluster, link, values, args.objective, _sim_config(args))
    if args.objective == "latency":
        header = ["bandwidth_bps", "predicted_latency_ms", "simulated_ms_per_token", "plan"]
    else:
        header = ["bandwidth_bps", "predicted_stage_time_ms", "simulated_tokens_per_s", "plan"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for bits, predicted, simulated, desc in rows:
        writer.writerow([f"{bits:g}", _fmt(predicted), _fmt(simulated), desc])
    text = buf.getvalue()
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        except OSError as e:
            raise IoError(f"cannot write {args.out}: {e}") from e
    out.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_sim_flags(p, default_micro=4):
    p.add_argument("--micro-batches", type=_positive_int, default=default_micro)
    p.add_argument("--batch", type=_positive_int, default=1, help="requests per micro-batch")
    p.add_argument("--strategy", choices=STRATEGIES, default=NO_BUBBLES)
    p.add_argument("--prompt-len", type=_positive_int, default=None)
    p.add_argument("--gen-len", type=_positive_int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-profile", help="synthesize a heterogeneous cluster/model profile")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--devices", required=True, help="comma-separated device classes, source first")
    p.add_argument("--bandwidth", default="50Mbps", help="default link bandwidth, e.g. 50Mbps")
    p.add_argument("--link", action="append", default=[], metavar="A:B=BW",
                   help="override one (symmetric) link, e.g. source:cloud=1Mbps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefill-factor", type=float, default=10.0)
    p.add_argument("--decode-ms", type=float, default=0.8, help="per-layer decode time on a speed-1 device")
    p.add_argument("--layer-memory-bytes", type=float, default=875_000_000)
    p.add_argument("--activation-bytes", type=float, default=16384)
    p.add_argument("--kv-bytes-per-token", type=float, default=32768)
    p.add_argument("--token-return-bytes", type=float, default=64)
    p.add_argument("--prompt-len", type=int, default=32)
    p.add_argument("--gen-len", type=int, default=96)
    p.add_argument("--uniform", action="store_true", help="no per-layer jitter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_profile)

    p = sub.add_parser("plan", help="plan for minimum latency or maximum throughput")
    p.add_argument("profile")
    p.add_argument("--objective", choices=("latency", "throughput"), default="latency")
    p.add_argument("--mode", choices=MODES, default=PAPER, help="latency DP variant")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("validate", help="check a plan, or compare the planners against brute force")
    p.add_argument("profile")
    p.add_argument("plan", nargs="?")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--objective", choices=("latency", "throughput", "both"), default="both")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="replay a plan through prefill and generation")
    p.add_argument("profile")
    p.add_argument("plan")
    _add_sim_flags(p)
    p.add_argument("--export", help="write the compute timeline here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="re-plan and re-simulate over a range of link bandwidths")
    p.add_argument("profile")
    p.add_argument("--link", required=True, help="A:B, e.g. source:cloud")
    p.add_argument("--values", required=True, help="e.g. 1,5,10,25,50Mbps")
    p.add_argument("--objective", choices=("latency", "throughput"), default="latency")
    _add_sim_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse: --help or a usage error
        return EXIT_OK if e.code in (0, None) else EXIT_INPUT
    try:
        return args.func(args, out)
    except (UsageError, InvalidSpec, ParseError, SchemaError, ConsistencyError, IoError, MemoryNotSlack) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (Infeasible, InvalidPlan, KvOverflow, UnusableLink) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except TooLarge as e:
        print(f"too large: {e}", file=sys.stderr)
        return EXIT_TOO_LARGE


if __name__ == "__main__":
    sys.exit(main())
