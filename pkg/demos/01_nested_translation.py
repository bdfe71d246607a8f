"""
Nested translation and walk cost
================================

A guest-physical address is translated through the extended page table.
A 2 MiB leaf takes fewer memory references to walk than a 4 KiB leaf, and
its TLB entry covers 512 times more memory.
"""

import numpy as np

from hugepage_sim import MiB
from hugepage_sim.ept import build_address_space, translate
from hugepage_sim.mmu import CostModel, Machine, replay
from hugepage_sim.tlb import Tlb
from hugepage_sim.workload import TraceSpec, generate_trace

# %%
# Two 16 MiB guests: one backed by huge leaves, one by base leaves.
huge = Machine(build_address_space(16 * MiB, "huge"), Tlb(), name="huge")
base = Machine(build_address_space(16 * MiB, "base"), Tlb(), name="base")

gpa = 5 * MiB + 0x1234
for m in (huge, base):
    t = translate(m.space, gpa)
    print(f"{m.name:5s} gpa {gpa:#x} -> hpa {t.hpa:#x}, walk refs {t.walk_refs}")

# %%
# The first access misses the TLB and walks; the second hits.
out = huge.access(gpa, False)
print("cold:", out.tlb_hit, out.walk_refs)
out = huge.access(gpa, False)
print("warm:", out.tlb_hit, out.walk_refs)

# %%
# Replaying the same uniform trace shows the TLB reach gap in cost units.
trace = generate_trace(TraceSpec(wss=16 * MiB, pattern="uniform", events=20_000, seed=1))
cost = CostModel()
for m in (huge, base):
    c = replay(m, trace, cost)
    print(f"{m.name:5s} cost {c:12.0f}  walk refs {m.stats.walk_refs:8d}  "
          f"TLB hit rate {m.stats.tlb_hits / m.stats.accesses:.3f}")

per_access = np.array([replay(Machine(build_address_space(16 * MiB, k), Tlb()), trace, cost)
                       for k in ("huge", "base")]) / len(trace)
print("cost per access (huge, base):", per_access.round(1))
