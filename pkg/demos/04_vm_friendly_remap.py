"""
Splitting and collapsing without VM-exits
=========================================

A lazy split leaves base entries unmapped, so the first touch of every
4 KiB slice traps to the hypervisor. The VM-friendly variant writes all 512
entries up front. Collapse behaves the same way at 2 MiB granularity.
"""

from hugepage_sim import MiB
from hugepage_sim.harness.experiments import vmexit_row

print(f"{'wss':>6s} {'mode':>12s} {'split exits':>12s} {'collapse exits':>15s} {'entries':>8s}")
for wss in (2 * MiB, 4 * MiB, 8 * MiB, 16 * MiB):
    for mode in ("linux_lazy", "vm_friendly"):
        r = vmexit_row(wss, mode)
        print(f"{wss // MiB:5d}M {mode:>12s} {r['exits']:12d} {r['collapse_exits']:15d} "
              f"{r['entries_written']:8d}")

# %%
# Lazy exits equal the swept bytes divided by 4 KiB, one per first touch.
