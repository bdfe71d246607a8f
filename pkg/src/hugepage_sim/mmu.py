"""Access engine: TLB lookup, EPT walk, A/D setting, lazy refill exits,
host-side page-table mutations, and the per-access cost model."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from . import FRAMES_PER_HUGE
from .ept import (BASE_OFFSET_MASK, BASE_SHIFT, HUGE_OFFSET_MASK, HUGE_SHIFT, NO_FRAME,
                  EptEntry, EptSpace, LeafLevel, TranslationFault, drop_companion,
                  redirect_to_companion, restore_companion)
from .remap import RemapStats
from .tlb import Tlb, tlb_flush

_IDX_MASK = FRAMES_PER_HUGE - 1


class AccessKind(enum.IntEnum):
    READ = 0
    WRITE = 1


class ExitReason(enum.Enum):
    NONE = "none"
    EPT_VIOLATION = "ept_violation"
    CONFLICT = "conflict"


class Tier(enum.IntEnum):
    FAST = 0
    SLOW = 1


@dataclass(slots=True)
class AccessEvent:
    gpa: int
    kind: AccessKind = AccessKind.READ
    tick: int = 0


@dataclass(slots=True)
class AccessOutcome:
    hpa: int
    tlb_hit: bool
    walk_refs: int
    vm_exit: bool
    exit_reason: ExitReason
    write: bool = False
    leaf_level: LeafLevel | None = None


@dataclass(frozen=True)
class CostModel:
    tlb_hit_cost: float = 1.0
    per_walk_ref_cost: float = 10.0
    vm_exit_cost: float = 1000.0
    fast_read_cost: float = 100.0
    fast_write_cost: float = 100.0
    slow_read_cost: float = 300.0
    slow_write_cost: float = 600.0
    migrate_byte_cost: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"cost {name} must be non-negative, got {value}")

    def tier_cost(self, tier, write):
        if tier == Tier.FAST:
            return self.fast_write_cost if write else self.fast_read_cost
        return self.slow_write_cost if write else self.slow_read_cost


@dataclass
class MachineStats:
    accesses: int = 0
    tlb_hits: int = 0
    walk_refs: int = 0
    vm_exits: int = 0
    ept_violations: int = 0
    host_mutations: int = 0
    conflicts: int = 0


@dataclass
class MutationOutcome:
    conflict: bool


class Machine:
    """One simulated VM: its EPT, its TLB and counters."""

    def __init__(self, space: EptSpace, tlb: Tlb | None = None, name=""):
        self.space = space
        self.tlb = tlb if tlb is not None else Tlb()
        self.name = name
        self.stats = MachineStats()
        self.remap = RemapStats()
        # regions whose companion was recycled by a host mutation
        self.conflict_log: list[int] = []

    def _access(self, gpa, write):
        """Core access path. Returns (hpa, tlb_hit, walk_refs, exit, leaf_level)."""
        tlb = self.tlb
        stats = self.stats
        stats.accesses += 1
        region = gpa >> HUGE_SHIFT
        e = tlb.huge.get(region)
        if e is not None:
            tlb.huge.move_to_end(region)
            if write:
                e.accessed = e.dirty = True
            stats.tlb_hits += 1
            return (e.frame << BASE_SHIFT) + (gpa & HUGE_OFFSET_MASK), True, 0, False, LeafLevel.HUGE
        gfn = gpa >> BASE_SHIFT
        e = tlb.base.get(gfn)
        if e is not None:
            tlb.base.move_to_end(gfn)
            if write:
                e.accessed = e.dirty = True
            stats.tlb_hits += 1
            return (e.frame << BASE_SHIFT) | (gpa & BASE_OFFSET_MASK), True, 0, False, LeafLevel.BASE

        space = self.space
        exited = False
        d = space.directory[region]
        if d is None:
            pending = space.pending_huge.pop(region, None)
            if pending is None:
                raise TranslationFault(gpa, region)
            space.directory[region] = d = pending
            exited = True
            self.remap.ept_entries_written += 1
        if isinstance(d, EptEntry):
            if d.redirected:
                leaf = space.companions[region].entries[gfn & _IDX_MASK]
                refs = space.walk_refs_base
                level = LeafLevel.COMPANION_BASE
                tlb.insert_base(gfn, leaf)
                hpa = (leaf.frame << BASE_SHIFT) | (gpa & BASE_OFFSET_MASK)
            else:
                leaf = d
                refs = space.walk_refs_huge
                level = LeafLevel.HUGE
                tlb.insert_huge(region, d)
                hpa = (d.frame << BASE_SHIFT) + (gpa & HUGE_OFFSET_MASK)
        else:
            leaf = d.entries[gfn & _IDX_MASK]
            if not leaf.present:
                if leaf.frame == NO_FRAME:
                    raise TranslationFault(gpa, region)
                leaf.present = True
                exited = True
                self.remap.ept_entries_written += 1
            refs = space.walk_refs_base
            level = LeafLevel.BASE
            tlb.insert_base(gfn, leaf)
            hpa = (leaf.frame << BASE_SHIFT) | (gpa & BASE_OFFSET_MASK)
        leaf.accessed = True
        if write:
            leaf.dirty = True
        stats.walk_refs += refs
        if exited:
            stats.vm_exits += 1
            stats.ept_violations += 1
            self.remap.vm_exits_from_lazy_refill += 1
        return hpa, False, refs, exited, level

    def access(self, gpa, write=False) -> AccessOutcome:
        hpa, hit, refs, exited, level = self._access(gpa, write)
        return AccessOutcome(hpa, hit, refs, exited,
                             ExitReason.EPT_VIOLATION if exited else ExitReason.NONE,
                             write, level)


def access(machine: Machine, event: AccessEvent) -> AccessOutcome:
    return machine.access(event.gpa, event.kind == AccessKind.WRITE)


def redirect_region(machine: Machine, region: int):
    comp = redirect_to_companion(machine.space, region)
    tlb_flush(machine.tlb, region)
    return comp


def restore_region(machine: Machine, region: int):
    bitmap = restore_companion(machine.space, region)
    tlb_flush(machine.tlb, region)
    return bitmap


def host_mutate(machine: Machine, region: int) -> MutationOutcome:
    """A host-OS change to the VM process page table for ``region``.

    A redirected region loses its companion and gets its original PDE back;
    the monitor learns about it through ``machine.conflict_log``.
    """
    space = machine.space
    if not 0 <= region < space.n_regions:
        raise ValueError(f"region {region} does not exist")
    machine.stats.host_mutations += 1
    conflict = space.is_redirected(region)
    if conflict:
        drop_companion(space, region)
        machine.stats.conflicts += 1
        machine.stats.vm_exits += 1
        machine.conflict_log.append(region)
    tlb_flush(machine.tlb, region)
    return MutationOutcome(conflict=conflict)


def access_cost(outcome: AccessOutcome, cost_model: CostModel, tier=Tier.FAST) -> float:
    """Lookup cost is charged on every access, hit or miss."""
    cost = cost_model.tlb_hit_cost + cost_model.per_walk_ref_cost * outcome.walk_refs
    if outcome.vm_exit:
        cost += cost_model.vm_exit_cost
    return cost + cost_model.tier_cost(tier, outcome.write)


def replay(machine: Machine, trace, cost_model: CostModel | None = None, tiers=None,
           touched_frames: set | None = None) -> float:
    """Run every event of ``trace`` through ``machine``.

    With a cost model, returns the summed access cost; ``tiers`` maps host
    frame to ``Tier`` (missing frames count as fast). ``touched_frames``
    collects host frames reached.
    """
    acc = machine._access
    gpas = trace.gpas.tolist()
    kinds = trace.kinds.tolist()
    if cost_model is None and touched_frames is None:
        for gpa, k in zip(gpas, kinds):
            acc(gpa, k)
        return 0.0
    total = 0.0
    if cost_model is not None:
        lookup = cost_model.tlb_hit_cost
        per_ref = cost_model.per_walk_ref_cost
        exit_cost = cost_model.vm_exit_cost
        tier_costs = {(Tier.FAST, 0): cost_model.fast_read_cost,
                      (Tier.FAST, 1): cost_model.fast_write_cost,
                      (Tier.SLOW, 0): cost_model.slow_read_cost,
                      (Tier.SLOW, 1): cost_model.slow_write_cost}
    tiers = tiers if tiers is not None else {}
    for gpa, k in zip(gpas, kinds):
        hpa, _, refs, exited, _ = acc(gpa, k)
        hfn = hpa >> BASE_SHIFT
        if touched_frames is not None:
            touched_frames.add(hfn)
        if cost_model is not None:
            total += lookup + per_ref * refs + tier_costs[(tiers.get(hfn, Tier.FAST), k)]
            if exited:
                total += exit_cost
    return total


def touched_leaves(space: EptSpace, trace):
    """Brute-force set of effective leaves a trace touches, as
    ('region', r) for huge leaves and ('frame', gfn) for base/companion."""
    out = set()
    for gpa in trace.gpas.tolist():
        region = gpa >> HUGE_SHIFT
        d = space.directory[region]
        if isinstance(d, EptEntry) and not d.redirected:
            out.add(("region", region))
        else:
            out.add(("frame", gpa >> BASE_SHIFT))
    return out


__all__ = [
    "AccessEvent", "AccessKind", "AccessOutcome", "CostModel", "ExitReason", "Machine",
    "MachineStats", "MutationOutcome", "Tier", "Tlb", "access", "access_cost", "host_mutate",
    "redirect_region", "replay", "restore_region", "tlb_flush", "touched_leaves",
]
