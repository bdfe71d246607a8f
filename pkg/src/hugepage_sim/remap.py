"""Huge-page split and collapse against the EPT, Linux-lazy or VM-friendly.

Linux-lazy remapping leaves the EPT leaves invalid; every first touch then
costs one EPT-violation exit to refill. VM-friendly remapping refills the
EPT eagerly, so no refill exits follow.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from . import FRAMES_PER_HUGE, HUGE_PAGE
from .ept import BaseTable, EptEntry, EptError, NO_FRAME
from .tlb import tlb_flush


class SplitMode(enum.Enum):
    LINUX_LAZY = "linux_lazy"
    VM_FRIENDLY = "vm_friendly"


class CollapseVeto(EptError):
    """Collapse refused: the region holds a shared frame."""


@dataclass
class RemapStats:
    splits: int = 0
    collapses: int = 0
    ept_entries_written: int = 0
    vm_exits_from_lazy_refill: int = 0
    tlb_flushes: int = 0
    copies_bytes: int = 0
    # guest-side split/collapse bookkeeping, counted not simulated
    guest_work_units: int = 0

    def as_row(self):
        return asdict(self)


def _huge_pde(space, region):
    d = space.directory[region]
    if isinstance(d, EptEntry):
        if d.redirected:
            raise EptError(f"region {region} is redirected; restore it before splitting")
        return d
    if d is None and region in space.pending_huge:
        return space.pending_huge.pop(region)
    raise EptError(f"region {region} is not a huge leaf")


def split_huge_page(machine, region: int, mode: SplitMode, stats: RemapStats | None = None):
    """Replace a huge leaf by a page table over the same 512 host frames.

    The old PDE's A/D bits are dropped, not copied to the PTEs.
    """
    stats = stats if stats is not None else machine.remap
    mode = SplitMode(mode)
    space = machine.space
    pde = _huge_pde(space, region)
    eager = mode is SplitMode.VM_FRIENDLY
    space.directory[region] = BaseTable([
        EptEntry(present=eager, frame=pde.frame + i, perm_r=pde.perm_r,
                 perm_w=pde.perm_w, perm_x=pde.perm_x)
        for i in range(FRAMES_PER_HUGE)
    ])
    stats.splits += 1
    stats.guest_work_units += FRAMES_PER_HUGE
    if eager:
        stats.ept_entries_written += FRAMES_PER_HUGE
    tlb_flush(machine.tlb, region)
    stats.tlb_flushes += 1


def collapse_huge_region(machine, region: int, mode: SplitMode,
                         stats: RemapStats | None = None) -> tuple[list[int], int]:
    """Copy a base-mapped region into a fresh 2 MiB run and map it huge.

    Returns ``(old_frames, new_base)`` so callers tracking per-frame state
    (tier placement) can follow the move.
    """
    stats = stats if stats is not None else machine.remap
    mode = SplitMode(mode)
    space = machine.space
    d = space.directory[region]
    if not isinstance(d, BaseTable):
        raise EptError(f"region {region} is not a base table")
    old = [e.frame for e in d.entries]
    if any(f == NO_FRAME for f in old):
        raise EptError(f"region {region} has unmapped base entries")
    host = space.host
    if any(host.is_shared(f) for f in old):
        raise CollapseVeto(f"region {region} contains a shared frame")
    new_base = host.alloc_run()
    for i, f in enumerate(old):
        host.contents.copy(f, new_base + i)
        host.put_ref(f)
    pde = EptEntry(frame=new_base, is_huge_leaf=True,
                   perm_r=all(e.perm_r for e in d.entries),
                   perm_w=all(e.perm_w for e in d.entries),
                   perm_x=all(e.perm_x for e in d.entries))
    if mode is SplitMode.VM_FRIENDLY:
        space.directory[region] = pde
        stats.ept_entries_written += 1
    else:
        space.directory[region] = None
        space.pending_huge[region] = pde
    stats.collapses += 1
    stats.copies_bytes += HUGE_PAGE
    stats.guest_work_units += FRAMES_PER_HUGE
    tlb_flush(machine.tlb, region)
    stats.tlb_flushes += 1
    return old, new_base
