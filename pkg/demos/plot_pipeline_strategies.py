"""
Iteration barrier versus free-running micro-batches
===================================================

With an iteration barrier every micro-batch waits for the slowest one before
it starts its next token, so devices sit idle.  Letting each micro-batch
continue as soon as its own token is back removes most of that idle time.
"""

from shardplan import SimConfig, SynthesisSpec, plan_max_throughput, simulate, synthesize_profile
from shardplan.sim import BUBBLES, NO_BUBBLES, export_timeline

doc = synthesize_profile(SynthesisSpec(24, ["agx_orin", "orin_nx", "rtx3090"], seed=2))
model, cluster = doc.model, doc.cluster
plan = plan_max_throughput(model, cluster)

print("micro-batches  bubbles tok/s  no_bubbles tok/s")
for g in (1, 2, 4, 8):
    rates = {s: simulate(plan, model, cluster, SimConfig(g, 1, None, 32, s)).throughput_tps
             for s in (BUBBLES, NO_BUBBLES)}
    print(f"{g:>13}  {rates[BUBBLES]:>13.1f}  {rates[NO_BUBBLES]:>16.1f}")

# The compute timeline can be inspected or plotted from a CSV.
res = simulate(plan, model, cluster, SimConfig(4, 1, None, 8, NO_BUBBLES))
export_timeline(res, "timeline.csv")
print("wrote timeline.csv with", len(res.timeline), "compute events")
