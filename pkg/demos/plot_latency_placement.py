"""
Placing layers for minimum per-token latency
============================================

A small cloud-edge cluster: an AGX Orin holds the prompt, an Orin NX sits
next to it, and an RTX 3090 is further away.  We place a 32-layer model so
that a single request generates tokens as fast as possible.
"""

from shardplan import SynthesisSpec, plan_min_latency, plan_total_latency, synthesize_profile
from shardplan.cli import with_link_bandwidth

doc = synthesize_profile(SynthesisSpec(32, ["agx_orin", "orin_nx", "rtx3090"], seed=1))
model, cluster = doc.model, doc.cluster
print("devices:", [d.label for d in cluster.devices])
print(f"model weights: {model.total_memory() / 1e9:.0f} GB")

# With 50 Mbps everywhere the fast device takes most of the model.
plan = plan_min_latency(model, cluster)
print("assignment:", "".join(str(d) for d in plan.assignment))
print(f"predicted latency: {plan.predicted_latency_ms:.2f} ms/token")

# The prediction is just the cost model evaluated on the assignment.
assert plan.predicted_latency_ms == plan_total_latency(plan.assignment, model, cluster)

# Throttle every link to the RTX 3090 and watch the plan move back to the edge.
for mbps in (50, 10, 1):
    slow = cluster
    for k in (0, 1):
        slow = with_link_bandwidth(slow, k, 2, mbps * 1e6)
    p = plan_min_latency(model, slow)
    print(f"{mbps:>3} Mbps  {p.predicted_latency_ms:8.2f} ms/token  layers on cloud: {p.assignment.count(2)}")
