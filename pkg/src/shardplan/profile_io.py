"""Profile files, plan files and synthetic cluster/model profiles.

Profile files are UTF-8 JSON documents (``schema_version`` "1").  Bandwidth is
written in bits per second, the way link speeds are usually quoted, and held
in memory as bytes per second.  Loading re-indexes the source device to 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DEFAULT_TOKEN_RETURN_BYTES,
    ClusterProfile,
    DeviceProfile,
    LatencyPlan,
    LayerProfile,
    ModelProfile,
    PhaseTimes,
    Stage,
    ThroughputPlan,
    comm_time,
    effective_layer_time,
    stage_costs,
)
from .errors import ConsistencyError, InvalidSpec, IoError, ParseError, SchemaError

__all__ = [
    "SCHEMA_VERSION",
    "DEVICE_CLASSES",
    "DeviceClass",
    "ProfileDocument",
    "SynthesisSpec",
    "effective_layer_time",
    "load_profile",
    "save_profile",
    "profile_from_dict",
    "profile_to_dict",
    "synthesize_profile",
    "plan_to_dict",
    "plan_from_dict",
    "save_plan",
    "load_plan",
]

SCHEMA_VERSION = "1"
GB = 10**9
BITS_PER_BYTE = 8


@dataclass(frozen=True)
class ProfileDocument:
    model: ModelProfile
    cluster: ClusterProfile
    metadata: Mapping[str, str] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION


# ---------------------------------------------------------------------------
# schema checking

_TOP_KEYS = {"schema_version", "metadata", "cluster", "model"}
_CLUSTER_KEYS = {"devices", "bandwidth_bps_matrix", "source_device"}
_DEVICE_KEYS = {"index", "memory_budget_bytes", "label"}
_MODEL_KEYS = {"layers", "token_return_bytes", "prompt_len", "gen_len"}
_LAYER_KEYS = {"index", "compute_time", "activation_bytes", "memory_bytes", "kv_bytes_per_token"}
_PHASE_KEYS = {"prefill_ms", "decode_ms"}


def _check_keys(obj, required: set, where: str, optional: set = frozenset()):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = required - obj.keys()
    extra = obj.keys() - required - optional
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unknown field(s) {sorted(extra)}")


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise SchemaError(f"{where}: non-finite value")
    return value


def _int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where}: expected an integer, got {value!r}")
    return value


def _nonneg(value, where: str):
    v = _num(value, where)
    if v < 0:
        raise ConsistencyError(f"{where}: negative value {v}")
    return v


def _normalize_source(devices, bandwidth, layers, source):
    """Swap the source device with device 0 so that the source is always index 0."""
    m = len(devices)
    perm = list(range(m))
    perm[0], perm[source] = source, 0  # perm[new] = old
    old_to_new = {old: new for new, old in enumerate(perm)}
    devices = [DeviceProfile(new, devices[old].memory_budget_bytes, devices[old].label) for new, old in enumerate(perm)]
    bandwidth = [[bandwidth[perm[k]][perm[j]] for j in range(m)] for k in range(m)]
    layers = [
        LayerProfile(l.index, {old_to_new[d]: t for d, t in l.compute_time.items()},
                     l.activation_bytes, l.memory_bytes, l.kv_bytes_per_token)
        for l in layers
    ]
    return devices, bandwidth, layers


def profile_from_dict(raw) -> ProfileDocument:
    """Validate a decoded profile object and build a normalized document."""
    _check_keys(raw, _TOP_KEYS, "profile")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {raw['schema_version']!r}")
    meta = raw["metadata"]
    if not isinstance(meta, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
        raise SchemaError("metadata must map strings to strings")

    c = raw["cluster"]
    _check_keys(c, _CLUSTER_KEYS, "cluster")
    if not isinstance(c["devices"], list) or not c["devices"]:
        raise SchemaError("cluster.devices must be a non-empty list")
    devices = []
    for pos, d in enumerate(c["devices"]):
        where = f"cluster.devices[{pos}]"
        _check_keys(d, _DEVICE_KEYS - {"label"}, where, optional={"label"})
        if _int(d["index"], where + ".index") != pos:
            raise ConsistencyError(f"{where}: index {d['index']} does not match position {pos}")
        budget = _num(d["memory_budget_bytes"], where + ".memory_budget_bytes")
        if budget <= 0:
            raise ConsistencyError(f"{where}: memory budget must be positive")
        label = d.get("label", "")
        if not isinstance(label, str):
            raise SchemaError(f"{where}.label must be a string")
        devices.append(DeviceProfile(pos, budget, label))
    m = len(devices)

    matrix = c["bandwidth_bps_matrix"]
    if not isinstance(matrix, list) or len(matrix) != m or any(not isinstance(r, list) or len(r) != m for r in matrix):
        raise SchemaError(f"cluster.bandwidth_bps_matrix must be {m}x{m}")
    bandwidth = []
    for k, row in enumerate(matrix):
        out_row = []
        for j, bits in enumerate(row):
            if bits is None:
                out_row.append(0.0)
                continue
            out_row.append(_nonneg(bits, f"bandwidth[{k}][{j}]") / BITS_PER_BYTE)
        bandwidth.append(out_row)

    source = _int(c["source_device"], "cluster.source_device")
    if not 0 <= source < m:
        raise ConsistencyError(f"source_device {source} is not a known device")

    mo = raw["model"]
    _check_keys(mo, _MODEL_KEYS - {"token_return_bytes"}, "model", optional={"token_return_bytes"})
    if not isinstance(mo["layers"], list) or not mo["layers"]:
        raise SchemaError("model.layers must be a non-empty list")
    layers = []
    for pos, l in enumerate(mo["layers"]):
        where = f"model.layers[{pos}]"
        _check_keys(l, _LAYER_KEYS, where)
        if _int(l["index"], where + ".index") != pos:
            raise ConsistencyError(f"{where}: index {l['index']} does not match position {pos}")
        ct = l["compute_time"]
        if not isinstance(ct, dict):
            raise SchemaError(f"{where}.compute_time must be an object")
        times = {}
        for key, phases in ct.items():
            try:
                dev = int(key)
            except ValueError:
                raise SchemaError(f"{where}.compute_time: device key {key!r} is not an integer") from None
            if not 0 <= dev < m:
                raise ConsistencyError(f"{where}.compute_time refers to unknown device {dev}")
            _check_keys(phases, _PHASE_KEYS, f"{where}.compute_time[{key}]")
            times[dev] = PhaseTimes(_nonneg(phases["prefill_ms"], f"{where}.prefill_ms"),
                                    _nonneg(phases["decode_ms"], f"{where}.decode_ms"))
        mem = _num(l["memory_bytes"], where + ".memory_bytes")
        if mem <= 0:
            raise ConsistencyError(f"{where}: memory_bytes must be positive")
        layers.append(LayerProfile(pos, dict(sorted(times.items())),
                                   _nonneg(l["activation_bytes"], where + ".activation_bytes"), mem,
                                   _nonneg(l["kv_bytes_per_token"], where + ".kv_bytes_per_token")))

    metadata = dict(meta)
    if source != 0:
        devices, bandwidth, layers = _normalize_source(devices, bandwidth, layers, source)
        metadata.setdefault("original_source_device", str(source))
    token_return = _nonneg(mo.get("token_return_bytes", DEFAULT_TOKEN_RETURN_BYTES), "model.token_return_bytes")
    prompt_len = _int(mo["prompt_len"], "model.prompt_len")
    gen_len = _int(mo["gen_len"], "model.gen_len")
    if prompt_len < 1 or gen_len < 1:
        raise ConsistencyError("prompt_len and gen_len must be >= 1")
    model = ModelProfile(tuple(layers), token_return, prompt_len, gen_len)
    cluster = ClusterProfile(tuple(devices), tuple(tuple(r) for r in bandwidth), 0)
    return ProfileDocument(model, cluster, metadata, SCHEMA_VERSION)


def profile_to_dict(doc: ProfileDocument) -> dict:
    c, mo = doc.cluster, doc.model
    return {
        "schema_version": doc.schema_version,
        "metadata": dict(doc.metadata),
        "cluster": {
            "devices": [{"index": d.index, "memory_budget_bytes": d.memory_budget_bytes, "label": d.label}
                        for d in c.devices],
            "bandwidth_bps_matrix": [[b * BITS_PER_BYTE for b in row] for row in c.bandwidth_bps],
            "source_device": c.source_device,
        },
        "model": {
            "layers": [
                {
                    "index": l.index,
                    "compute_time": {str(d): {"prefill_ms": t.prefill_ms, "decode_ms": t.decode_ms}
                                     for d, t in sorted(l.compute_time.items())},
                    "activation_bytes": l.activation_bytes,
                    "memory_bytes": l.memory_bytes,
                    "kv_bytes_per_token": l.kv_bytes_per_token,
                }
                for l in mo.layers
            ],
            "token_return_bytes": mo.token_return_bytes,
            "prompt_len": mo.prompt_len,
            "gen_len": mo.gen_len,
        },
    }


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, allow_nan=False) + "\n"
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_profile(path) -> ProfileDocument:
    return profile_from_dict(_read_json(path))


def save_profile(doc: ProfileDocument, path) -> None:
    _write_json(profile_to_dict(doc), path)


# ---------------------------------------------------------------------------
# plan documents


def plan_to_dict(plan, model: ModelProfile | None = None, cluster: ClusterProfile | None = None) -> dict:
    """Serialize a plan; with ``model`` and ``cluster`` a per-layer / per-stage cost breakdown is added."""
    if isinstance(plan, LatencyPlan):
        doc = {"objective": "latency", "mode": plan.mode, "assignment": list(plan.assignment),
               "predicted_latency_ms": plan.predicted_latency_ms}
        if model is not None and cluster is not None:
            a = plan.assignment
            doc["breakdown"] = [
                {"layer": i, "device": a[i], "compute_ms": effective_layer_time(model.layers[i], a[i]),
                 "comm_in_ms": 0.0 if i == 0 else comm_time(model.layers[i - 1].activation_bytes, a[i - 1], a[i], cluster)}
                for i in range(len(a))
            ]
            doc["token_return_ms"] = comm_time(model.token_return_bytes, a[-1], 0, cluster)
        return doc
    if isinstance(plan, ThroughputPlan):
        stages = [{"layer_lo": s.layer_lo, "layer_hi": s.layer_hi, "device": s.device} for s in plan.stages]
        if model is not None and cluster is not None:
            for entry, cost in zip(stages, stage_costs(plan.stages, model, cluster)):
                entry.update(compute_ms=cost.compute_ms, comm_in_ms=cost.comm_in_ms, memory_bytes=cost.memory_bytes)
        return {"objective": "throughput", "stages": stages, "predicted_stage_time_ms": plan.predicted_stage_time_ms}
    raise TypeError(f"not a plan: {plan!r}")


def plan_from_dict(raw):
    if not isinstance(raw, dict) or "objective" not in raw:
        raise SchemaError("plan document needs an 'objective' field")
    if raw["objective"] == "latency":
        _check_keys(raw, {"objective", "assignment", "predicted_latency_ms"}, "plan",
                    optional={"mode", "breakdown", "token_return_ms"})
        if not isinstance(raw["assignment"], list):
            raise SchemaError("plan.assignment must be a list")
        a = tuple(_int(x, "plan.assignment") for x in raw["assignment"])
        return LatencyPlan(a, _num(raw["predicted_latency_ms"], "plan.predicted_latency_ms"),
                           raw.get("mode", "paper"))
    if raw["objective"] == "throughput":
        _check_keys(raw, {"objective", "stages", "predicted_stage_time_ms"}, "plan")
        if not isinstance(raw["stages"], list):
            raise SchemaError("plan.stages must be a list")
        stages = []
        for pos, s in enumerate(raw["stages"]):
            _check_keys(s, {"layer_lo", "layer_hi", "device"}, f"plan.stages[{pos}]",
                        optional={"compute_ms", "comm_in_ms", "memory_bytes"})
            stages.append(Stage(_int(s["layer_lo"], "layer_lo"), _int(s["layer_hi"], "layer_hi"),
                                _int(s["device"], "device")))
        return ThroughputPlan(tuple(stages), _num(raw["predicted_stage_time_ms"], "plan.predicted_stage_time_ms"))
    raise SchemaError(f"unknown plan objective {raw['objective']!r}")


def save_plan(plan, path, model=None, cluster=None) -> None:
    _write_json(plan_to_dict(plan, model, cluster), path)


def load_plan(path):
    return plan_from_dict(_read_json(path))


# ---------------------------------------------------------------------------
# synthetic profiles


@dataclass(frozen=True)
class DeviceClass:
    speed: float  # relative to a Jetson AGX Orin
    memory_bytes: int


_ORIN_TFLOPS = 3.33
_AGX = DeviceClass(1.0, 32 * GB)
_NX = DeviceClass(1.88 / _ORIN_TFLOPS, 16 * GB)
_RTX = DeviceClass(36.0 / _ORIN_TFLOPS, 24 * GB)

DEVICE_CLASSES: dict[str, DeviceClass] = {
    "agx_orin": _AGX,
    "orin_nx": _NX,
    "rtx3090": _RTX,
    "edge": _AGX,
    "cloud": _RTX,
    "fast": _RTX,
    "slow": _AGX,
}


@dataclass(frozen=True)
class SynthesisSpec:
    """Parameters of a synthetic heterogeneous profile.

    ``devices`` lists device class names (keys of :data:`DEVICE_CLASSES` or of
    ``speeds``); the first one is the source.  ``bandwidth_bits_per_s`` is a
    scalar applied to every link or a full matrix.  Per-layer defaults are
    Llama2-7B-like: 32 layers of 875 MB (28 GB total), 16 KiB activations.
    """

    n_layers: int
    devices: Sequence[str]
    seed: int = 0
    bandwidth_bits_per_s: float | Sequence[Sequence[float]] = 50e6
    speeds: Mapping[str, float] = field(default_factory=dict)
    memory_budgets: Mapping[str, float] = field(default_factory=dict)
    prefill_factor: float = 10.0
    base_decode_ms: float = 0.8
    layer_memory_bytes: float = 875_000_000
    activation_bytes: float = 16384
    kv_bytes_per_token: float = 32768
    token_return_bytes: float = DEFAULT_TOKEN_RETURN_BYTES
    prompt_len: int = 32
    gen_len: int = 96
    uniform: bool = False
    jitter: float = 0.1


def _device_class(name: str, spec: SynthesisSpec) -> tuple[float, float]:
    base = DEVICE_CLASSES.get(name)
    speed = spec.speeds.get(name, base.speed if base else None)
    mem = spec.memory_budgets.get(name, base.memory_bytes if base else None)
    if speed is None or mem is None:
        raise InvalidSpec(f"unknown device class {name!r}")
    if not speed > 0 or not mem > 0:
        raise InvalidSpec(f"device class {name!r} needs positive speed and memory")
    return float(speed), mem


def _labels(names: Sequence[str]) -> list[str]:
    counts: dict[str, int] = {}
    for n in names:
        counts[n] = counts.get(n, 0) + 1
    seen: dict[str, int] = {}
    out = []
    for n in names:
        if counts[n] == 1:
            out.append(n)
        else:
            out.append(f"{n}-{seen.get(n, 0)}")
            seen[n] = seen.get(n, 0) + 1
    return out


def synthesize_profile(spec: SynthesisSpec) -> ProfileDocument:
    """Build a deterministic profile from ``spec``.

    Decode time of layer ``i`` on a device is ``base_decode_ms * noise_i / speed``;
    prefill time is ``prefill_factor`` times that.  ``noise_i`` is a seeded
    uniform factor in ``[1 - jitter, 1 + jitter]`` (exactly 1 when ``uniform``),
    shared by all devices so cross-device time ratios equal speed ratios.
    """
    n, names = spec.n_layers, list(spec.devices)
    if not isinstance(n, int) or n < 1:
        raise InvalidSpec("need at least one layer")
    if not names:
        raise InvalidSpec("need at least one device")
    if not spec.prefill_factor > 0 or not spec.base_decode_ms > 0:
        raise InvalidSpec("prefill_factor and base_decode_ms must be positive")
    if not spec.layer_memory_bytes > 0 or spec.activation_bytes < 0 or spec.kv_bytes_per_token < 0:
        raise InvalidSpec("bad layer sizes")
    if spec.prompt_len < 1 or spec.gen_len < 1 or spec.token_return_bytes < 0:
        raise InvalidSpec("bad prompt/gen lengths or token payload")
    if not 0 <= spec.jitter < 1:
        raise InvalidSpec("jitter must be in [0, 1)")
    classes = [_device_class(name, spec) for name in names]
    m = len(names)

    bw = spec.bandwidth_bits_per_s
    if isinstance(bw, (int, float)):
        if not bw > 0:
            raise InvalidSpec("bandwidth must be positive")
        matrix = [[0.0 if k == j else float(bw) for j in range(m)] for k in range(m)]
    else:
        matrix = [[float(x) for x in row] for row in bw]
        if len(matrix) != m or any(len(r) != m for r in matrix):
            raise InvalidSpec(f"bandwidth matrix must be {m}x{m}")
        if any(x < 0 or not math.isfinite(x) for r in matrix for x in r):
            raise InvalidSpec("bandwidth entries must be finite and >= 0")

    if spec.uniform or spec.jitter == 0:
        noise = [1.0] * n
    else:
        rng = np.random.default_rng(spec.seed)
        noise = [float(x) for x in 1.0 + spec.jitter * rng.uniform(-1.0, 1.0, size=n)]

    layers = []
    for i in range(n):
        times = {}
        for d, (speed, _) in enumerate(classes):
            decode = spec.base_decode_ms * noise[i] / speed
            times[d] = PhaseTimes(spec.prefill_factor * decode, decode)
        layers.append(LayerProfile(i, times, spec.activation_bytes, spec.layer_memory_bytes, spec.kv_bytes_per_token))
    labels = _labels(names)
    devices = tuple(DeviceProfile(d, mem, labels[d]) for d, (_, mem) in enumerate(classes))
    cluster = ClusterProfile(devices, tuple(tuple(x / BITS_PER_BYTE for x in row) for row in matrix), 0)
    model = ModelProfile(tuple(layers), spec.token_return_bytes, spec.prompt_len, spec.gen_len)
    metadata = {
        "generator": "synthesize_profile",
        "seed": str(spec.seed),
        "devices": ",".join(names),
        "prefill_factor": repr(float(spec.prefill_factor)),
    }
    return ProfileDocument(model, cluster, metadata, SCHEMA_VERSION)
