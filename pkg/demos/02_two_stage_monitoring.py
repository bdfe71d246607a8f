"""
Two-stage hotness monitoring
============================

Stage 1 scans A/D bits at leaf granularity and finds hot 2 MiB regions.
Stage 2 swaps each hot region's huge leaf for a companion page table so the
MMU records A/D bits per 4 KiB slice, then restores the huge leaf. The
result is a per-region count of touched slices and from it the page skew
ratio (PSR).
"""

from hugepage_sim import MiB
from hugepage_sim.ept import build_address_space
from hugepage_sim.mmu import Machine
from hugepage_sim.monitor import ScanConfig, baseline_monitor, compute_psr, two_stage_monitor
from hugepage_sim.tlb import Tlb
from hugepage_sim.workload import TraceSpec, generate_trace

# %%
# Half of the hot regions are unbalanced: only about 10% of their slices
# are ever touched.
spec = TraceSpec(wss=16 * MiB, pattern="uniform", events=10_000, seed=7,
                 unbalanced_fraction=0.5, target_psr=0.9)
trace = generate_trace(spec)
scan = ScanConfig(window_ticks=10_000, interval_ticks=1_000)

m = Machine(build_address_space(16 * MiB, "huge"), Tlb())
res = two_stage_monitor(m, trace, scan)
print("hot regions:", res.hot_regions)
for rep in res.reports:
    rec = compute_psr(rep)
    tag = "unbalanced" if rep.region in trace.unbalanced_regions else "balanced"
    print(f"region {rep.region:2d} {tag:10s} touched {rep.n_s:3d}/512  psr {rec.psr:.3f}")

# %%
# The companion swap is undone after monitoring: every region is a huge leaf
# again and no companion page is left behind.
print("huge leaves after monitoring:", len(m.space.huge_regions()), "of", m.space.n_regions)
print("peak companions:", m.space.peak_companions, " VM-exits:", res.stats.vm_exits)

# %%
# Hot bloat: a huge-granularity scan reports every byte of a touched region
# as hot, while the base-granularity scan counts only touched slices.
hs = baseline_monitor(Machine(build_address_space(16 * MiB, "huge"), Tlb()), trace,
                      ScanConfig(10_000, 1_000, mode="huge_scan"))
bs = baseline_monitor(Machine(build_address_space(16 * MiB, "base"), Tlb()), trace,
                      ScanConfig(10_000, 1_000, mode="base_scan"))
print(f"hot bytes: huge scan {hs.histogram.hot_bytes(1) / MiB:.2f} MiB, "
      f"base scan {bs.histogram.hot_bytes(1) / MiB:.2f} MiB")
