"""
Hot page pressure and the split/collapse plan
=============================================

HP is the amount of hot memory beyond the budget ``s_tot * f_use``. When it
is positive, the planner demotes (splits) hot huge pages with the highest
PSR first, since each one frees its untouched slices. When it is negative,
it promotes (collapses) base-mapped regions with the lowest PSR while HP
stays at or below zero.
"""

from hugepage_sim import MiB
from hugepage_sim.monitor import PsrRecord
from hugepage_sim.policy import (PolicyConfig, init_hot_page_pressure, plan_demotions,
                                 plan_promotions)

cfg = PolicyConfig(f_use=0.25, psr_lower_bound=0.5, s_tot=32 * MiB)

# %%
# Twelve hot 2 MiB regions: 24 MiB hot against an 8 MiB budget.
untouched = [461, 461, 461, 461, 300, 256, 100, 0, 0, 0, 0, 0]
records = [PsrRecord(r, u) for r, u in enumerate(untouched)]
hp = init_hot_page_pressure(24 * MiB, cfg)
print(f"hp = {hp.hp / MiB:+.2f} MiB")

plan = plan_demotions(hp, records, cfg)
for region, psr in plan.demote:
    print(f"demote region {region:2d}  psr {psr:.3f}")
print(f"hp after demotion {plan.hp_after / MiB:+.2f} MiB (regions below psr 0.5 are never split)")

# %%
# With pressure below zero, base regions are folded back into huge pages.
cands = [PsrRecord(20 + i, u) for i, u in enumerate([0, 12, 40, 200, 400])]
plan = plan_promotions(-1 * MiB, cands, cfg)
print("promote:", [(r, round(p, 3)) for r, p in plan.promote],
      f"hp after {plan.hp_after / MiB:+.3f} MiB")
