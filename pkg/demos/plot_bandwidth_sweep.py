"""
How much does the uplink matter?
================================

Sweep the bandwidth between the source device and a cloud GPU and re-plan
at every point.  Gains are large at first and flatten out once transfers
are cheap compared with compute.
"""

from shardplan import SimConfig, SynthesisSpec, synthesize_profile
from shardplan.cli import sweep_rows

doc = synthesize_profile(SynthesisSpec(32, ["agx_orin", "rtx3090"], seed=0))
values = [1e6, 5e6, 10e6, 25e6, 50e6, 100e6]

# The planner charges every layer the mean of its prefill and decode time and
# moves one token's activation per hop.  The replay runs one prefill that ships
# the whole prompt, then cheap decode steps.  So the two columns disagree,
# most visibly at low bandwidth where the prompt transfer dominates.
rows = sweep_rows(doc.model, doc.cluster, (0, 1), values, "latency", SimConfig(gen_len=32))
print("Mbps  predicted ms/token  simulated ms/token")
for bits, predicted, simulated, _ in rows:
    print(f"{bits / 1e6:>4.0f}  {predicted:>18.2f}  {simulated:>18.2f}")

rows = sweep_rows(doc.model, doc.cluster, (0, 1), values, "throughput", SimConfig(micro_batches=4, gen_len=32))
print("\nMbps  bottleneck ms  simulated tokens/s  stages")
for bits, predicted, simulated, desc in rows:
    print(f"{bits / 1e6:>4.0f}  {predicted:>13.2f}  {simulated:>18.1f}  {desc}")
