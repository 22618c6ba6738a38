"""
Counting the savings
====================

Closed-form costs for a 7B-scale shape, and how they move with the number
of vision tokens.
"""

from visipruner.costs import CostParams, headline, kv_memory, pruned_flops, sweep

p = CostParams.llava7b()
print(p)

###############################################################################
# Headline numbers under the one-op-per-multiply-add convention.

for k, v in headline(p).items():
    print("%-24s %s" % (k, v))

###############################################################################
# The same run under the 2-FLOPs-per-MAC convention, including the
# unembedding and the probe rows the detector spends.

rep = pruned_flops(p, "mac")
print("dense %.3e  pruned %.3e  overhead %.3e" % (rep.dense_total, rep.pruned_total, rep.probe_overhead))
print("kv:", kv_memory(p))

###############################################################################
# Shallow layers skip vision attention but still run the vision projections
# and FFN, so moving the filtering layer deeper (same exit layer) shrinks the
# savings. Longer images make the attention reduction approach 1.

for ls in (4, 8, 12):
    r = pruned_flops(CostParams.llava7b(l_shallow=ls, l_middle=23 - ls), "paper")
    print("l_shallow=%2d  visual %.1f%%  total %.1f%%" % (ls, 100 * r.visual_flops_reduction, 100 * r.total_reduction))

for row in sweep(p, [144, 576, 2304]):
    print(row)
