"""Tiered-memory case study: fast/slow placement driven by monitoring.

Three strategies share one epoch shape (monitor, decide, migrate, then
measure the next window):

- ``fhpm``        two-stage monitoring, HP-driven split/collapse (VM-friendly),
                  hot = balanced huge regions plus hot base frames
- ``hmm_v_huge``  huge-granularity scan, whole 2 MiB regions migrate
- ``hmm_v_base``  all-base machine, base-granularity scan, frames migrate
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import BASE_PAGE, FRAMES_PER_HUGE
from .ept import BaseTable, EptEntry, build_address_space
from .mmu import CostModel, Machine, Tier, replay
from .monitor import (ScanConfig, ScanMode, baseline_monitor, compute_psr, two_stage_monitor)
from .policy import (Plan, PolicyConfig, fixed_threshold_plan, init_hot_page_pressure,
                     plan_demotions, plan_promotions, region_psr)
from .remap import SplitMode, collapse_huge_region, split_huge_page
from .tlb import Tlb, tlb_flush


class Strategy(enum.Enum):
    FHPM = "fhpm"
    HMM_V_HUGE = "hmm_v_huge"
    HMM_V_BASE = "hmm_v_base"


@dataclass(frozen=True)
class TierSpec:
    fast_capacity: int
    slow_capacity: int

    def __post_init__(self):
        if self.fast_capacity < 0 or self.slow_capacity < 0:
            raise ValueError("tier capacities must be non-negative")
        if self.fast_capacity % BASE_PAGE or self.slow_capacity % BASE_PAGE:
            raise ValueError("tier capacities must be whole base pages")

    def check(self, total_bytes):
        if self.fast_capacity + self.slow_capacity < total_bytes:
            raise ValueError("fast + slow capacity must cover the VM memory")


@dataclass
class MigrationStats:
    migrated_bytes: int = 0
    evicted_bytes: int = 0
    migrations: int = 0


class Placement:
    """Tier of every host frame, with fast-tier occupancy tracking."""

    def __init__(self, tier_spec: TierSpec):
        self.spec = tier_spec
        self.tier: dict[int, Tier] = {}
        self.fast_frames = 0

    @property
    def fast_used(self):
        return self.fast_frames * BASE_PAGE

    @property
    def slow_used(self):
        return (len(self.tier) - self.fast_frames) * BASE_PAGE

    @property
    def fast_free_frames(self):
        return self.spec.fast_capacity // BASE_PAGE - self.fast_frames

    def set(self, frame, tier):
        old = self.tier.get(frame)
        if old == Tier.FAST:
            self.fast_frames -= 1
        self.tier[frame] = tier
        if tier == Tier.FAST:
            self.fast_frames += 1

    def remove(self, frame):
        if self.tier.pop(frame, None) == Tier.FAST:
            self.fast_frames -= 1

    def fast_set(self):
        return {f for f, t in self.tier.items() if t == Tier.FAST}


def unit_map(space):
    """Host frame -> migration unit id (huge run base, or the frame)."""
    units = {}
    for d in space.directory:
        if isinstance(d, EptEntry):
            for i in range(FRAMES_PER_HUGE):
                units[d.frame + i] = d.frame
        elif isinstance(d, BaseTable):
            for e in d.entries:
                if e.frame >= 0:
                    units[e.frame] = e.frame
    for pde in space.pending_huge.values():
        for i in range(FRAMES_PER_HUGE):
            units[pde.frame + i] = pde.frame
    return units


def migrate(placement: Placement, frames, target: Tier, stats: MigrationStats,
            freq=None, units=None, protect=()) -> Placement:
    """Move ``frames`` to ``target``.

    Room in the fast tier is made by evicting resident units coldest first
    (frequency ascending, then lowest frame). ``protect`` frames are never
    evicted.
    """
    target = Tier(target)
    move = [f for f in frames if placement.tier.get(f) != target]
    if not move:
        return placement
    if target == Tier.FAST:
        capacity = placement.spec.fast_capacity // BASE_PAGE
        if len(move) > capacity:
            raise ValueError(f"{len(move)} frames exceed the fast tier ({capacity} frames)")
        short = len(move) - placement.fast_free_frames
        if short > 0:
            freq = freq or {}
            units = units or {}
            keep = set(protect) | set(move)
            groups: dict[int, list[int]] = {}
            for f, t in placement.tier.items():
                if t == Tier.FAST and f not in keep:
                    groups.setdefault(units.get(f, f), []).append(f)
            order = sorted(groups.items(),
                           key=lambda kv: (max(freq.get(f, 0) for f in kv[1]), min(kv[1])))
            for _, members in order:
                if short <= 0:
                    break
                for f in members:
                    placement.set(f, Tier.SLOW)
                stats.evicted_bytes += len(members) * BASE_PAGE
                short -= len(members)
            if short > 0:
                raise ValueError("not enough evictable memory in the fast tier")
    for f in move:
        placement.set(f, target)
    stats.migrated_bytes += len(move) * BASE_PAGE
    stats.migrations += 1
    return placement


def estimate_epoch_cost(machine: Machine, window, placement: Placement, cost_model: CostModel,
                        touched=None) -> float:
    return replay(machine, window, cost_model, placement.tier, touched)


@dataclass
class EpochReport:
    strategy: str
    fast_bytes: int
    fast_ratio: float
    cost: float
    eval_cost: float
    migration_cost: float
    monitor_cost: float
    fast_accessed_bytes: int
    accessed_bytes: int
    huge_ratio_in_fast: float
    hp_before: int = 0
    hp_after: int = 0
    demoted: int = 0
    promoted: int = 0
    splits: int = 0
    collapses: int = 0
    vm_exits: int = 0
    plan: Plan | None = field(default=None, repr=False)

    CSV_FIELDS = ("strategy", "fast_bytes", "fast_ratio", "cost", "eval_cost", "migration_cost",
                  "monitor_cost", "fast_accessed_bytes", "accessed_bytes", "huge_ratio_in_fast",
                  "hp_before", "hp_after", "demoted", "promoted", "splits", "collapses",
                  "vm_exits")

    def row(self):
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def build_tmm_machine(total_bytes: int, strategy, tier_spec: TierSpec, first_touch,
                      tlb_entries=(64, 32), walk_refs=None):
    """VM for one strategy with first-touch placement: units go to the fast
    tier in first-touch order until it is full, untouched units follow in
    address order, the rest is slow."""
    strategy = Strategy(strategy)
    tier_spec.check(total_bytes)
    layout = "base" if strategy is Strategy.HMM_V_BASE else "huge"
    space = build_address_space(total_bytes, layout, **(walk_refs or {}))
    machine = Machine(space, Tlb(*tlb_entries), name=strategy.value)
    placement = Placement(tier_spec)
    units = unit_map(space)
    members: dict[int, list[int]] = {}
    for f, u in units.items():
        members.setdefault(u, []).append(f)
    gfns = (np.asarray(first_touch.gpas) >> np.uint64(12)).astype(np.int64)
    _, first = np.unique(gfns, return_index=True)
    order = gfns[np.sort(first)].tolist()
    room = tier_spec.fast_capacity // BASE_PAGE
    seen = set()
    for gfn in order:
        u = units[space.host_frame(gfn)]
        if u in seen:
            continue
        seen.add(u)
        tier = Tier.FAST if len(members[u]) <= room else Tier.SLOW
        if tier == Tier.FAST:
            room -= len(members[u])
        for f in members[u]:
            placement.set(f, tier)
    # memory never touched is still allocated, after the touched units
    for u in sorted(members):
        if u in seen:
            continue
        tier = Tier.FAST if len(members[u]) <= room else Tier.SLOW
        if tier == Tier.FAST:
            room -= len(members[u])
        for f in members[u]:
            placement.set(f, tier)
    return machine, placement


def _place_hot(machine, placement, unit_freq: dict[int, int], hot_threshold, stats):
    """Fill the fast tier with hot units, hottest first."""
    space = machine.space
    units = unit_map(space)
    members: dict[int, list[int]] = {}
    for f, u in units.items():
        members.setdefault(u, []).append(f)
    hot = sorted((u for u, fr in unit_freq.items() if fr >= hot_threshold),
                 key=lambda u: (-unit_freq[u], u))
    room = placement.spec.fast_capacity // BASE_PAGE
    desired = []
    for u in hot:
        if len(members[u]) <= room:
            desired.append(u)
            room -= len(members[u])
    frame_freq = {f: unit_freq.get(u, 0) for f, u in units.items()}
    protect = {f for u in desired for f in members[u]}
    for u in desired:
        migrate(placement, members[u], Tier.FAST, stats, frame_freq, units, protect)


def _huge_ratio_in_fast(space, placement):
    fast = placement.fast_set()
    if not fast:
        return 0.0
    huge = 0
    for d in space.directory:
        if isinstance(d, EptEntry):
            huge += sum(1 for i in range(FRAMES_PER_HUGE) if d.frame + i in fast)
    return huge / len(fast)


def _monitor_cost(stats, cost_model):
    return stats.walk_refs * cost_model.per_walk_ref_cost + stats.vm_exits * cost_model.vm_exit_cost


def run_tmm_epoch(machine: Machine, placement: Placement, window, eval_window, strategy,
                  scan: ScanConfig, cost_model: CostModel, policy="dynamic",
                  psr_lower_bound=0.5, mutations=()) -> EpochReport:
    """One epoch: monitor ``window``, remap and migrate, then measure the
    cost of ``eval_window`` under the new placement.

    ``policy`` is "dynamic" (hot page pressure) or an int fixed threshold;
    it only matters for the fhpm strategy.
    """
    strategy = Strategy(strategy)
    space = machine.space
    s_tot = space.total_bytes
    fast_cap = placement.spec.fast_capacity
    thr = scan.hot_threshold
    mig = MigrationStats()
    remap0 = (machine.remap.splits, machine.remap.collapses)
    report_extra = {}
    plan = None

    if strategy is Strategy.FHPM:
        res = two_stage_monitor(machine, window, scan, mutations=mutations)
        monitor_cost = _monitor_cost(res.stats, cost_model)
        hist = res.histogram
        valid = {r.region: r for r in res.reports if r.valid}
        psrs = [compute_psr(r) for r in res.reports if r.valid]
        s_hot = len(res.hot_regions) * FRAMES_PER_HUGE * BASE_PAGE + len(res.hot_frames) * BASE_PAGE
        f_use = min(1.0, fast_cap / s_tot) if fast_cap else 1e-9
        pconf = PolicyConfig(f_use=f_use, psr_lower_bound=psr_lower_bound, s_tot=s_tot)
        candidates = []
        for r in space.base_regions():
            entries = space.directory[r].entries
            if any(e.frame < 0 for e in entries):
                continue
            touched = sum(1 for i in range(FRAMES_PER_HUGE)
                          if hist.base.get(r * FRAMES_PER_HUGE + i, 0) > 0)
            if touched:
                candidates.append(region_psr(r, touched))
        hp = init_hot_page_pressure(s_hot, pconf)
        if policy == "dynamic":
            if hp.hp > 0:
                plan = plan_demotions(hp, psrs, pconf)
            else:
                plan = plan_promotions(hp, candidates, pconf)
        else:
            plan = fixed_threshold_plan(res.reports, int(policy), candidates, hp)
        demoted = {r for r, _ in plan.demote}
        promoted = {r for r, _ in plan.promote}
        for r in sorted(demoted):
            split_huge_page(machine, r, SplitMode.VM_FRIENDLY)
        for r in sorted(promoted):
            old, new_base = collapse_huge_region(machine, r, SplitMode.VM_FRIENDLY)
            for f in old:
                placement.remove(f)
            for i in range(FRAMES_PER_HUGE):
                placement.set(new_base + i, Tier.SLOW)
        unit_freq: dict[int, int] = {}
        for r in range(space.n_regions):
            d = space.directory[r]
            base_gfn = r * FRAMES_PER_HUGE
            if isinstance(d, EptEntry):
                if r in promoted:
                    fr = max(hist.base.get(base_gfn + i, 0) for i in range(FRAMES_PER_HUGE))
                else:
                    fr = hist.huge.get(r, 0)
                unit_freq[d.frame] = fr
            elif isinstance(d, BaseTable):
                rep = valid.get(r) if r in demoted else None
                for i, e in enumerate(d.entries):
                    if rep is not None:
                        fr = rep.inherited_frequency if rep.accessed[i] else 0
                    else:
                        fr = hist.base.get(base_gfn + i, 0)
                    unit_freq[e.frame] = fr
        _place_hot(machine, placement, unit_freq, thr, mig)
        report_extra = dict(hp_before=plan.hp_before, hp_after=plan.hp_after,
                            demoted=len(demoted), promoted=len(promoted))
    else:
        mode = ScanMode.HUGE_SCAN if strategy is Strategy.HMM_V_HUGE else ScanMode.BASE_SCAN
        res = baseline_monitor(machine, window, ScanConfig(
            scan.window_ticks, scan.interval_ticks, scan.hot_threshold, scan.sampling_fraction,
            mode, scan.seed))
        monitor_cost = _monitor_cost(res.stats, cost_model)
        unit_freq = {}
        for r, fr in res.histogram.huge.items():
            unit_freq[space.directory[r].frame] = fr
        for g, fr in res.histogram.base.items():
            unit_freq[space.host_frame(g)] = fr
        _place_hot(machine, placement, unit_freq, thr, mig)

    exits0 = machine.stats.vm_exits
    tlb_flush(machine.tlb)
    touched: set[int] = set()
    eval_cost = estimate_epoch_cost(machine, eval_window, placement, cost_model, touched)
    # tier moves, evictions and collapse copies all pay the per-byte rate
    collapse_copy = (machine.remap.collapses - remap0[1]) * FRAMES_PER_HUGE * BASE_PAGE
    migration_cost = (mig.migrated_bytes + mig.evicted_bytes + collapse_copy) \
        * cost_model.migrate_byte_cost
    fast = placement.fast_set()
    return EpochReport(
        strategy=strategy.value,
        fast_bytes=fast_cap,
        fast_ratio=fast_cap / s_tot,
        cost=eval_cost + migration_cost,
        eval_cost=eval_cost,
        migration_cost=migration_cost,
        monitor_cost=monitor_cost,
        fast_accessed_bytes=len(touched & fast) * BASE_PAGE,
        accessed_bytes=len(touched) * BASE_PAGE,
        huge_ratio_in_fast=_huge_ratio_in_fast(space, placement),
        splits=machine.remap.splits - remap0[0],
        collapses=machine.remap.collapses - remap0[1],
        vm_exits=machine.stats.vm_exits - exits0,
        plan=plan,
        **report_extra,
    )


def run_tmm(trace, total_bytes, strategy, tier_spec: TierSpec, scan: ScanConfig,
            cost_model: CostModel, epochs=1, policy="dynamic", psr_lower_bound=0.5,
            tlb_entries=(64, 32)) -> list[EpochReport]:
    """Epoch k monitors window k of ``trace`` and is measured on window k+1.

    ``trace`` must cover ``epochs + 1`` scan windows.
    """
    W = scan.window_ticks
    t0 = int(trace.ticks[0])
    windows = [trace.window(t0 + k * W, t0 + (k + 1) * W) for k in range(epochs + 1)]
    machine, placement = build_tmm_machine(total_bytes, strategy, tier_spec, windows[0],
                                           tlb_entries)
    reports = []
    for k in range(epochs):
        reports.append(run_tmm_epoch(machine, placement, windows[k], windows[k + 1], strategy,
                                     scan, cost_model, policy, psr_lower_bound))
        assert placement.fast_used <= tier_spec.fast_capacity
    return reports
