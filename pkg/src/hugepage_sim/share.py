"""Content-based page sharing across VMs that sit on one host.

Merging follows the KSM scheme: a stable tree of write-protected shared
frames and an unstable tree of candidates, both keyed by a 64-bit digest and
confirmed by full comparison. Only base-mapped frames merge, except under
``huge_page_share``, which merges whole identical 2 MiB regions.

Strategies:

- ``fhpm_share``       split cold, then unbalanced hot regions (PSR descending)
                       that hold a share candidate, until resident memory
                       drops to ``f_use * s_tot``; collapse back split regions
                       that ended up sharing nothing
- ``linux_ksm``        split every region holding a share candidate, merge all
- ``huge_page_share``  merge identical huge regions, never split
- ``ingens``           split huge regions that the huge-granularity scan finds
                       cold, merge among base memory
- ``zero_scan``        split regions holding zero frames, merge only those
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field

from . import BASE_PAGE, FRAMES_PER_HUGE
from .content import ContentStore
from .ept import BaseTable, EptEntry, HostMemory, build_address_space
from .mmu import CostModel, Machine, replay
from .monitor import ScanConfig, ScanMode, baseline_monitor, compute_psr, two_stage_monitor
from .remap import SplitMode, collapse_huge_region, split_huge_page
from .tlb import Tlb, tlb_flush


class ShareStrategy(enum.Enum):
    FHPM_SHARE = "fhpm_share"
    HUGE_PAGE_SHARE = "huge_page_share"
    LINUX_KSM = "linux_ksm"
    INGENS = "ingens"
    ZERO_SCAN = "zero_scan"


class ShareError(ValueError):
    pass


@dataclass(frozen=True)
class ShareConfig:
    f_use: float = 0.5
    scan: ScanConfig = field(default_factory=ScanConfig)
    psr_lower_bound: float = 0.5
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if not 0.0 < self.f_use <= 1.0:
            raise ValueError(f"f_use must lie in (0, 1], got {self.f_use}")


@dataclass
class ShareStats:
    strategy: str = ""
    bytes_saved: int = 0
    shared_frames: int = 0
    cow_breaks: int = 0
    oracle_bytes: int = 0
    total_bytes: int = 0
    splits: int = 0
    collapses: int = 0
    huge_ratio: list[float] = field(default_factory=list)
    est_cost: list[float] = field(default_factory=list)

    @property
    def saved_pct(self):
        return 100.0 * self.bytes_saved / self.total_bytes if self.total_bytes else 0.0

    @property
    def oracle_ratio(self):
        return self.bytes_saved / self.oracle_bytes if self.oracle_bytes else 0.0

    def row(self):
        out = {"strategy": self.strategy, "bytes_saved": self.bytes_saved,
               "saved_pct": round(self.saved_pct, 6), "oracle_bytes": self.oracle_bytes,
               "oracle_ratio": round(self.oracle_ratio, 6), "shared_frames": self.shared_frames,
               "cow_breaks": self.cow_breaks, "splits": self.splits,
               "collapses": self.collapses}
        for i, (h, c) in enumerate(zip(self.huge_ratio, self.est_cost)):
            out[f"vm{i}_huge_ratio"] = round(h, 6)
            out[f"vm{i}_est_cost"] = c
        return out


class ShareRun:
    """VMs on one host plus the merge trees and reverse map."""

    def __init__(self, machines: list[Machine], host: HostMemory):
        if len(machines) < 2:
            raise ShareError("page sharing needs at least two VMs")
        self.machines = machines
        self.host = host
        self.stable: dict[int, list[int]] = defaultdict(list)
        self.unstable: dict[int, list[tuple[int, int]]] = defaultdict(list)
        # host frame -> guest owners (vm, gfn) for base-mapped frames
        self.rmap: dict[int, set[tuple[int, int]]] = defaultdict(set)
        self.cow_breaks = 0
        self.collapsed: list[tuple[int, int]] = []

    @property
    def contents(self) -> ContentStore:
        return self.host.contents

    def pte(self, vm, gfn) -> EptEntry:
        region, idx = divmod(gfn, FRAMES_PER_HUGE)
        d = self.machines[vm].space.directory[region]
        if not isinstance(d, BaseTable):
            raise ShareError(f"vm {vm} gfn {gfn} is not base-mapped")
        return d.entries[idx]

    def bytes_saved(self) -> int:
        return sum(n - 1 for n in self.host.refs.values()) * BASE_PAGE

    def shared_frames(self) -> int:
        return sum(1 for n in self.host.refs.values() if n > 1)

    def total_bytes(self) -> int:
        return sum(m.space.total_bytes for m in self.machines)

    def resident_bytes(self) -> int:
        return self.total_bytes() - self.bytes_saved()

    def read(self, vm, gfn) -> bytes:
        return self.machines[vm].space.read_frame(gfn)

    # merging -------------------------------------------------------------

    def _map_to(self, vm, gfn, target):
        e = self.pte(vm, gfn)
        old = e.frame
        if old == target:
            return
        self.host.get_ref(target)
        e.frame = target
        e.perm_w = False
        self.rmap[old].discard((vm, gfn))
        if not self.rmap[old]:
            del self.rmap[old]
        self.rmap[target].add((vm, gfn))
        self.host.put_ref(old)
        self.machines[vm].tlb.base.pop(gfn, None)

    def merge_frame(self, vm, gfn) -> bool:
        """Run one base frame through the stable, then the unstable tree."""
        e = self.pte(vm, gfn)
        f = e.frame
        if self.host.is_shared(f):
            return False
        c = self.contents
        key = c.digest(f)
        for s in self.stable.get(key, ()):
            if s != f and c.same_content(s, f):
                self._map_to(vm, gfn, s)
                return True
        bucket = self.unstable[key]
        for i, (ovm, ogfn) in enumerate(bucket):
            other = self.pte(ovm, ogfn)
            u = other.frame
            if u != f and c.same_content(u, f):
                del bucket[i]
                other.perm_w = False
                self.machines[ovm].tlb.base.pop(ogfn, None)
                self.stable[key].append(u)
                self._map_to(vm, gfn, u)
                return True
        bucket.append((vm, gfn))
        return False

    def merge_region(self, vm, region, only_zero=False) -> int:
        merged = 0
        base = region * FRAMES_PER_HUGE
        for i in range(FRAMES_PER_HUGE):
            gfn = base + i
            if only_zero and not self.contents.is_zero(self.pte(vm, gfn).frame):
                continue
            merged += self.merge_frame(vm, gfn)
        return merged

    def region_shared_count(self, vm, region) -> int:
        space = self.machines[vm].space
        return sum(1 for i in range(FRAMES_PER_HUGE)
                   if self.host.is_shared(space.host_frame(region * FRAMES_PER_HUGE + i)))

    def _forget_unstable(self, vm, region):
        lo, hi = region * FRAMES_PER_HUGE, (region + 1) * FRAMES_PER_HUGE
        for key in list(self.unstable):
            bucket = [x for x in self.unstable[key] if not (x[0] == vm and lo <= x[1] < hi)]
            if bucket:
                self.unstable[key] = bucket
            else:
                del self.unstable[key]

    def split(self, vm, region):
        m = self.machines[vm]
        split_huge_page(m, region, SplitMode.VM_FRIENDLY, m.remap)
        for i, e in enumerate(m.space.directory[region].entries):
            self.rmap[e.frame].add((vm, region * FRAMES_PER_HUGE + i))

    def collapse(self, vm, region):
        m = self.machines[vm]
        for e in m.space.directory[region].entries:
            self.rmap.pop(e.frame, None)
        self._forget_unstable(vm, region)
        collapse_huge_region(m, region, SplitMode.VM_FRIENDLY, m.remap)
        self.collapsed.append((vm, region))

    # writes --------------------------------------------------------------

    def write(self, vm, gfn, content_id=None):
        """Guest write: breaks sharing first when the frame is shared."""
        space = self.machines[vm].space
        region = gfn // FRAMES_PER_HUGE
        d = space.directory[region]
        if isinstance(d, BaseTable):
            if self.host.is_shared(d.entries[gfn % FRAMES_PER_HUGE].frame):
                cow_write_break(self, vm, gfn)
            e = d.entries[gfn % FRAMES_PER_HUGE]
            e.perm_w = True
            frame = e.frame
        else:
            if self.host.is_shared(space.host_frame(gfn)):
                cow_write_break(self, vm, gfn)
            frame = space.host_frame(gfn)
        if content_id is not None:
            self.contents.set(frame, content_id)


def cow_write_break(run: ShareRun, vm: int, gfn: int):
    """Give the writer a private copy of a shared frame (one VM-exit)."""
    m = run.machines[vm]
    space = m.space
    host = run.host
    region, idx = divmod(gfn, FRAMES_PER_HUGE)
    d = space.directory[region]
    if isinstance(d, BaseTable):
        e = d.entries[idx]
        old = e.frame
        if not host.is_shared(old):
            raise ShareError(f"vm {vm} gfn {gfn} is not shared")
        new = host.alloc_frame()
        host.contents.copy(old, new)
        e.frame = new
        e.perm_w = True
        run.rmap[old].discard((vm, gfn))
        run.rmap[new].add((vm, gfn))
        host.put_ref(old)
        if not host.is_shared(old):
            # last owner regains write access; the frame leaves the stable tree
            key = host.contents.digest(old)
            if old in run.stable.get(key, ()):
                run.stable[key].remove(old)
            for ovm, ogfn in run.rmap.get(old, ()):
                run.pte(ovm, ogfn).perm_w = True
        m.tlb.base.pop(gfn, None)
    elif isinstance(d, EptEntry):
        old_base = d.frame
        if not host.is_shared(old_base):
            raise ShareError(f"vm {vm} gfn {gfn} is not shared")
        new_base = host.alloc_run()
        for i in range(FRAMES_PER_HUGE):
            host.contents.copy(old_base + i, new_base + i)
            host.put_ref(old_base + i)
        d.frame = new_base
        d.perm_w = True
        tlb_flush(m.tlb, region)
    else:
        raise ShareError(f"vm {vm} gfn {gfn} is not mapped")
    run.cow_breaks += 1
    m.stats.vm_exits += 1


def dedup_oracle(machines) -> int:
    """Maximum saving: group every guest frame of every VM by its bytes."""
    groups: dict[bytes, int] = defaultdict(int)
    for m in machines:
        space = m.space
        for gfn in range(space.total_guest_frames):
            groups[space.read_frame(gfn)] += 1
    return sum(n - 1 for n in groups.values()) * BASE_PAGE


def build_share_run(images: list[ContentStore], total_bytes: int, layout="huge",
                    tlb_entries=(64, 32)) -> ShareRun:
    """VMs on one host, each loaded with its guest content image."""
    host = HostMemory()
    machines = []
    for vm, image in enumerate(images):
        space = build_address_space(total_bytes, layout, host)
        for gfn in range(space.total_guest_frames):
            host.contents.set(space.host_frame(gfn), image.get(gfn))
        machines.append(Machine(space, Tlb(*tlb_entries), name=f"vm{vm}"))
    run = ShareRun(machines, host)
    for vm, m in enumerate(machines):
        for r in m.space.base_regions():
            for i, e in enumerate(m.space.directory[r].entries):
                run.rmap[e.frame].add((vm, r * FRAMES_PER_HUGE + i))
    return run


def _candidate_regions(run: ShareRun):
    """(vm, region) pairs of huge regions holding a frame whose content
    appears somewhere else in any VM."""
    c = run.contents
    seen: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for vm, m in enumerate(run.machines):
        for gfn in range(m.space.total_guest_frames):
            f = m.space.host_frame(gfn)
            seen[c.digest(f)].append((vm, gfn, f))
    out = set()
    for members in seen.values():
        if len(members) < 2:
            continue
        for i, (vm, gfn, f) in enumerate(members):
            if any(c.same_content(f, g) for j, (_, _, g) in enumerate(members) if j != i):
                out.add((vm, gfn // FRAMES_PER_HUGE))
    return out


def _zero_regions(run: ShareRun):
    out = set()
    for vm, m in enumerate(run.machines):
        for gfn in range(m.space.total_guest_frames):
            if run.contents.is_zero(m.space.host_frame(gfn)):
                out.add((vm, gfn // FRAMES_PER_HUGE))
    return out


def _merge_all_base(run: ShareRun, only_zero=False):
    for vm, m in enumerate(run.machines):
        for r in m.space.base_regions():
            run.merge_region(vm, r, only_zero)


def _huge_page_share(run: ShareRun):
    c = run.contents
    groups: dict[tuple, list[tuple[int, int]]] = defaultdict(list)
    for vm, m in enumerate(run.machines):
        for r in m.space.huge_regions():
            d = m.space.directory[r]
            if d.redirected:
                continue
            key = tuple(c.digest(d.frame + i) for i in range(FRAMES_PER_HUGE))
            groups[key].append((vm, r))
    for members in groups.values():
        if len(members) < 2:
            continue
        vm0, r0 = members[0]
        d0 = run.machines[vm0].space.directory[r0]
        for vm, r in members[1:]:
            m = run.machines[vm]
            d = m.space.directory[r]
            if d.frame == d0.frame:
                continue
            if not all(c.same_content(d0.frame + i, d.frame + i) for i in range(FRAMES_PER_HUGE)):
                continue
            for i in range(FRAMES_PER_HUGE):
                run.host.get_ref(d0.frame + i)
                run.host.put_ref(d.frame + i)
            d.frame = d0.frame
            d.perm_w = d0.perm_w = False
            tlb_flush(m.tlb, r)


def _fhpm_share(run: ShareRun, traces, config: ShareConfig):
    candidates = _candidate_regions(run)
    target = int(config.f_use * run.total_bytes())
    cold, unbalanced = [], []
    for vm, m in enumerate(run.machines):
        res = two_stage_monitor(m, traces[vm], config.scan)
        hot = set(res.hot_regions)
        for r in m.space.huge_regions():
            if r not in hot and (vm, r) in candidates:
                cold.append((vm, r))
        for rep in res.reports:
            if not rep.valid or (vm, rep.region) not in candidates:
                continue
            rec = compute_psr(rep)
            if rec.psr >= config.psr_lower_bound:
                unbalanced.append((rec.untouched, vm, rep.region))
    # alternate VMs within a class so duplicates find their partner early
    cold.sort(key=lambda x: (x[1], x[0]))
    unbalanced.sort(key=lambda x: (-x[0], x[2], x[1]))
    order = cold + [(vm, r) for _, vm, r in unbalanced]
    split = []
    for vm, r in order:
        if run.resident_bytes() <= target:
            break
        run.split(vm, r)
        run.merge_region(vm, r)
        split.append((vm, r))
    for vm, r in split:
        if run.region_shared_count(vm, r) == 0:
            run.collapse(vm, r)


def run_share_epoch(run: ShareRun, strategy, config: ShareConfig = ShareConfig(),
                    traces=None, eval_traces=None) -> ShareStats:
    """One sharing epoch over every VM of ``run``.

    ``traces`` (one per VM) feed the monitors of fhpm_share and ingens;
    ``eval_traces`` give the per-VM cost estimate.
    """
    strategy = ShareStrategy(strategy)
    machines = run.machines
    if len(machines) < 2:
        raise ShareError("page sharing needs at least two VMs")
    oracle = dedup_oracle(machines)
    before = [(m.remap.splits, m.remap.collapses) for m in machines]
    needs_trace = strategy in (ShareStrategy.FHPM_SHARE, ShareStrategy.INGENS)
    if needs_trace and (traces is None or len(traces) != len(machines)):
        raise ShareError(f"{strategy.value} needs one monitoring trace per VM")

    if strategy is ShareStrategy.LINUX_KSM:
        for vm, r in sorted(_candidate_regions(run)):
            if run.machines[vm].space.is_huge(r):
                run.split(vm, r)
        _merge_all_base(run)
    elif strategy is ShareStrategy.HUGE_PAGE_SHARE:
        _huge_page_share(run)
    elif strategy is ShareStrategy.ZERO_SCAN:
        for vm, r in sorted(_zero_regions(run)):
            if run.machines[vm].space.is_huge(r):
                run.split(vm, r)
        _merge_all_base(run, only_zero=True)
    elif strategy is ShareStrategy.INGENS:
        scan = config.scan
        for vm, m in enumerate(machines):
            res = baseline_monitor(m, traces[vm], ScanConfig(
                scan.window_ticks, scan.interval_ticks, scan.hot_threshold,
                scan.sampling_fraction, ScanMode.HUGE_SCAN, scan.seed))
            for r in m.space.huge_regions():
                if res.histogram.huge.get(r, 0) < scan.hot_threshold:
                    run.split(vm, r)
        _merge_all_base(run)
    else:
        _fhpm_share(run, traces, config)

    check_collapse_veto(run)
    stats = ShareStats(strategy=strategy.value, bytes_saved=run.bytes_saved(),
                       shared_frames=run.shared_frames(), cow_breaks=run.cow_breaks,
                       oracle_bytes=oracle, total_bytes=run.total_bytes())
    for vm, m in enumerate(machines):
        stats.splits += m.remap.splits - before[vm][0]
        stats.collapses += m.remap.collapses - before[vm][1]
        stats.huge_ratio.append(len(m.space.huge_regions()) / m.space.n_regions)
        if eval_traces is not None:
            stats.est_cost.append(share_replay(run, vm, eval_traces[vm], config.cost_model))
        else:
            stats.est_cost.append(0.0)
    stats.cow_breaks = run.cow_breaks
    stats.bytes_saved = run.bytes_saved()
    stats.shared_frames = run.shared_frames()
    return stats


def share_replay(run: ShareRun, vm: int, trace, cost_model: CostModel) -> float:
    """Replay with write faults on shared frames broken before the access."""
    m = run.machines[vm]
    if not trace.kinds.any():
        tlb_flush(m.tlb)
        return replay(m, trace, cost_model)
    tlb_flush(m.tlb)
    total = 0.0
    for gpa, k in zip(trace.gpas.tolist(), trace.kinds.tolist()):
        gfn = gpa >> 12
        exit_cost = 0.0
        if k and run.host.is_shared(m.space.host_frame(gfn)):
            run.write(vm, gfn)
            exit_cost = cost_model.vm_exit_cost
        out = m.access(gpa, bool(k))
        total += exit_cost + cost_model.tlb_hit_cost + cost_model.per_walk_ref_cost * out.walk_refs
        total += cost_model.tier_cost(0, bool(k))
        if out.vm_exit:
            total += cost_model.vm_exit_cost
    return total


def check_collapse_veto(run: ShareRun):
    """No region collapsed by a sharing run may hold a shared frame."""
    for vm, r in run.collapsed:
        space = run.machines[vm].space
        if space.is_huge(r) and run.region_shared_count(vm, r):
            raise AssertionError(f"vm {vm} region {r} collapsed with shared frames")
