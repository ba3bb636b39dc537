"""
Splitting a model into a pipeline
=================================

For batch workloads the slowest stage decides the token rate.  The planner
picks which devices to use and where to cut, and the simulator replays the
result with several micro-batches in flight.
"""

from shardplan import SimConfig, SynthesisSpec, max_feasible_batch, plan_max_throughput, simulate, synthesize_profile
from shardplan.core import stage_costs

doc = synthesize_profile(SynthesisSpec(32, ["agx_orin", "agx_orin", "orin_nx", "rtx3090"], seed=4))
model, cluster = doc.model, doc.cluster

plan = plan_max_throughput(model, cluster)
for s, cost in zip(plan.stages, stage_costs(plan.stages, model, cluster)):
    print(f"layers [{s.layer_lo:2d},{s.layer_hi:2d}) on device {s.device}: "
          f"compute {cost.compute_ms:6.2f} ms, incoming {cost.comm_in_ms:5.2f} ms")
print(f"bottleneck stage time: {plan.predicted_stage_time_ms:.2f} ms")

# More micro-batches keep more stages busy at once, until the KV cache
# no longer fits next to the weights.
cap = max_feasible_batch(plan, model, cluster, gen_len=32)
print(f"largest batch whose KV cache fits: {cap}")
for g in (1, 2, 4, 8):
    if g > cap:
        print(f"G={g}: does not fit")
        continue
    res = simulate(plan, model, cluster, SimConfig(micro_batches=g, gen_len=32))
    util = " ".join(f"{u:.2f}" for _, u in sorted(res.utilization.items()))
    print(f"G={g}: {res.throughput_tps:7.1f} tokens/s   utilization {util}")
