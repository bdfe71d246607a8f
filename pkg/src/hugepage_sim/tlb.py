"""Fully associative split TLB with LRU replacement."""

from __future__ import annotations

from collections import OrderedDict

from . import FRAMES_PER_HUGE

DEFAULT_BASE_ENTRIES = 64
DEFAULT_HUGE_ENTRIES = 32


class Tlb:
    """Two pools: 2 MiB tags (huge-region index) and 4 KiB tags (guest frame).

    Values are the cached leaf ``EptEntry`` so a write hit can set the
    dirty bit on the leaf it was translated through.
    """

    def __init__(self, base_entries=DEFAULT_BASE_ENTRIES, huge_entries=DEFAULT_HUGE_ENTRIES):
        if base_entries < 1 or huge_entries < 1:
            raise ValueError("TLB capacities must be positive")
        self.base_capacity = base_entries
        self.huge_capacity = huge_entries
        self.huge: OrderedDict[int, object] = OrderedDict()
        self.base: OrderedDict[int, object] = OrderedDict()
        self.flushes = 0

    def __len__(self):
        return len(self.huge) + len(self.base)

    def insert_huge(self, region, entry):
        self.huge[region] = entry
        self.huge.move_to_end(region)
        if len(self.huge) > self.huge_capacity:
            self.huge.popitem(last=False)

    def insert_base(self, gfn, entry):
        self.base[gfn] = entry
        self.base.move_to_end(gfn)
        if len(self.base) > self.base_capacity:
            self.base.popitem(last=False)


def tlb_flush(tlb: Tlb, region: int | None = None) -> None:
    """Flush everything (``region=None``) or the tags of one 2 MiB region."""
    tlb.flushes += 1
    if region is None:
        tlb.huge.clear()
        tlb.base.clear()
        return
    tlb.huge.pop(region, None)
    if not tlb.base:
        return
    lo = region * FRAMES_PER_HUGE
    hi = lo + FRAMES_PER_HUGE
    if len(tlb.base) < FRAMES_PER_HUGE:
        for gfn in [g for g in tlb.base if lo <= g < hi]:
            del tlb.base[gfn]
    else:
        for gfn in range(lo, hi):
            tlb.base.pop(gfn, None)
