"""
Pruning a toy model
===================

Build a small decoder whose vision tokens stop mattering after layer 3,
then let the pruner discover that on its own.
"""

import numpy as np

from visipruner import ModelConfig, PruneParams, apply_schedule, build_fixture, prefill
from visipruner.kernels import MacCounter

# the fixture wires two "critical" vision tokens into layers 2..3 and makes
# every vision column invisible to text rows from layer 4 on
fx = build_fixture("vision-dead-after", ModelConfig(6, 32, 4, 64, 40, seed=0), layer=3)
print("critical vision positions:", fx.facts["critical_positions"])

dense_macs = MacCounter()
dense = prefill(fx.model, fx.stream, counter=dense_macs)

###############################################################################
# Run the schedule. Layer 1 merges vision attention, probes look for the
# first layer where removing a vision token moves the last row's output.

macs, probe_macs = MacCounter(), MacCounter()
res = apply_schedule(fx.model, fx.stream, PruneParams(), macs, probe_macs)
s = res.schedule
print("filtering layer:", s.filtering_layer, " exit layer:", s.exit_layer)
print("retained:", s.retained)
print("modes:", " -> ".join(s.modes))

###############################################################################
# The pruned run reproduces the dense logits to rounding error while doing
# less work.

print("max |logit diff|: %.2e" % np.max(np.abs(res.logits - dense.logits)))
print("MACs dense %d, pruned %d, probes %d" % (dense_macs.mac_count, macs.mac_count, probe_macs.mac_count))

###############################################################################
# Vision keys and values are gone from the cache wherever they were dropped.

for layer, mods in enumerate(res.cache.modalities, start=1):
    print(layer, mods.count("vision"), "vision rows cached")
