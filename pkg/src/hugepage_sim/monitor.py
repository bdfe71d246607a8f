"""Access monitoring: A/D-bit scanning, two-stage fine-grained monitoring
through companion pages, and the scan baselines it is compared with."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import BASE_PAGE, FRAMES_PER_HUGE, HUGE_PAGE
from .ept import EptError, clear_and_collect_ad
from .mmu import Machine, host_mutate, redirect_region, replay, restore_region
from .remap import SplitMode, collapse_huge_region, split_huge_page
from .tlb import tlb_flush
from .workload import round_half_up, stream_rng

N_H = FRAMES_PER_HUGE


class ScanMode(enum.Enum):
    TWO_STAGE = "two_stage"
    SPLIT_SCAN = "split_scan"
    SAMPLING_SCAN = "sampling_scan"
    ZERO_SCAN = "zero_scan"
    HUGE_SCAN = "huge_scan"
    BASE_SCAN = "base_scan"


@dataclass(frozen=True)
class ScanConfig:
    window_ticks: int = 10_000
    interval_ticks: int = 1_000
    hot_threshold: int = 1
    sampling_fraction: float = 0.05
    mode: ScanMode = ScanMode.TWO_STAGE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", ScanMode(self.mode))
        if self.interval_ticks <= 0 or self.window_ticks <= 0:
            raise ValueError("window and interval must be positive")
        if self.window_ticks % self.interval_ticks:
            raise ValueError("interval_ticks must divide window_ticks")
        if self.hot_threshold < 1:
            raise ValueError("hot_threshold must be at least 1")
        if not 0.0 <= self.sampling_fraction <= 1.0:
            raise ValueError("sampling_fraction must lie in [0, 1]")

    @property
    def intervals(self):
        return self.window_ticks // self.interval_ticks


@dataclass
class AccessHistogram:
    """Number of scan intervals in which each unit was seen accessed.

    ``huge`` is keyed by huge-region index, ``base`` by guest frame.
    """

    intervals: int
    huge: dict[int, int] = field(default_factory=dict)
    base: dict[int, int] = field(default_factory=dict)

    def hot_bytes(self, threshold=1):
        n_regions = sum(1 for f in self.huge.values() if f >= threshold)
        n_frames = sum(1 for f in self.base.values() if f >= threshold)
        return n_regions * HUGE_PAGE + n_frames * BASE_PAGE

    def per_frame(self, n_frames):
        out = np.zeros(n_frames, dtype=np.int64)
        for r, f in self.huge.items():
            out[r * N_H:(r + 1) * N_H] = f
        for g, f in self.base.items():
            out[g] = f
        return out

    def frequency_weights(self):
        freqs = list(self.huge.values()) + list(self.base.values())
        weights = [HUGE_PAGE] * len(self.huge) + [BASE_PAGE] * len(self.base)
        return np.array(freqs, np.int64), np.array(weights, float), self.intervals


@dataclass
class FineGrainReport:
    region: int
    accessed: np.ndarray
    dirty: np.ndarray
    inherited_frequency: int
    valid: bool = True
    n_h: int = N_H

    @property
    def n_s(self):
        return int(np.count_nonzero(self.accessed))

    def accessed_frames(self):
        return (self.region * N_H + np.flatnonzero(self.accessed)).tolist()


@dataclass(frozen=True)
class PsrRecord:
    """PSR kept as the count of untouched base regions; ``psr`` is
    ``untouched / 512``, which is exact in binary floating point."""

    region: int
    untouched: int

    @property
    def psr(self) -> float:
        return self.untouched / N_H

    @property
    def psr_exact(self) -> Fraction:
        return Fraction(self.untouched, N_H)


@dataclass
class MonitorStats:
    entries_scanned: int = 0
    tlb_flushes: int = 0
    redirections: int = 0
    conflicts: int = 0
    splits: int = 0
    collapses: int = 0
    vm_exits: int = 0
    walk_refs: int = 0
    accesses: int = 0


@dataclass
class TwoStageResult:
    histogram: AccessHistogram
    hot_regions: list[int]
    hot_frames: list[int]
    reports: list[FineGrainReport]
    stats: MonitorStats


@dataclass
class BaselineResult:
    histogram: AccessHistogram
    stats: MonitorStats
    zero_frames: list[int] = field(default_factory=list)
    sampled_regions: list[int] = field(default_factory=list)


class _Counters:
    """Snapshot of machine counters to attribute deltas to a monitor run."""

    def __init__(self, machine):
        self.m = machine
        self.stats0 = (machine.stats.vm_exits, machine.stats.walk_refs, machine.stats.accesses,
                       machine.tlb.flushes, machine.remap.splits, machine.remap.collapses)

    def fill(self, stats: MonitorStats):
        m = self.m
        now = (m.stats.vm_exits, m.stats.walk_refs, m.stats.accesses, m.tlb.flushes,
               m.remap.splits, m.remap.collapses)
        d = [a - b for a, b in zip(now, self.stats0)]
        stats.vm_exits += d[0]
        stats.walk_refs += d[1]
        stats.accesses += d[2]
        stats.tlb_flushes += d[3]
        stats.splits += d[4]
        stats.collapses += d[5]
        return stats


def _check_window(window):
    if len(window) == 0:
        raise ValueError("empty monitoring window")


def _scan(machine: Machine, window, config: ScanConfig, granularity, start=None):
    _check_window(window)
    space = machine.space
    t0 = int(window.ticks[0]) if start is None else start
    hist = AccessHistogram(config.intervals)
    for r in range(space.n_regions):
        d = space.kind(r)
        if d is not None and d.value == "huge" and not space.is_redirected(r):
            hist.huge[r] = 0
        elif d is not None and d.value == "base" and granularity == "all":
            for i, e in enumerate(space.directory[r].entries):
                if e.frame >= 0:
                    hist.base[r * N_H + i] = 0
    scanned = 0
    clear_and_collect_ad(space, granularity)
    tlb_flush(machine.tlb)
    for k in range(config.intervals):
        lo = t0 + k * config.interval_ticks
        replay(machine, window.window(lo, lo + config.interval_ticks))
        snap = clear_and_collect_ad(space, granularity)
        tlb_flush(machine.tlb)
        scanned += len(snap.regions) + len(snap.frames)
        for r, (a, _) in snap.regions.items():
            if a:
                hist.huge[r] = hist.huge.get(r, 0) + 1
        for g, (a, _) in snap.frames.items():
            if a:
                hist.base[g] = hist.base.get(g, 0) + 1
    return hist, scanned


def stage1_scan(machine: Machine, window, config: ScanConfig, granularity="all",
                start=None) -> AccessHistogram:
    """Coarse scan: per interval clear A/D, replay, collect."""
    hist, _ = _scan(machine, window, config, granularity, start)
    return hist


def classify_hot_cold(frequencies: dict, hot_threshold: int):
    hot = {k for k, f in frequencies.items() if f >= hot_threshold}
    return hot, set(frequencies) - hot


def _replay_with_mutations(machine, window, mutations):
    """Replay, calling ``host_mutate`` before the first event at or after
    each scheduled tick."""
    pending = sorted(mutations)
    if not pending:
        replay(machine, window)
        return
    start = int(window.ticks[0]) if len(window) else 0
    for tick, region in pending:
        replay(machine, window.window(start, tick))
        host_mutate(machine, region)
        start = max(start, tick)
    replay(machine, window.window(start, window.end_tick))


def stage2_fine_monitor(machine: Machine, regions, window, histogram: AccessHistogram | None = None,
                        mutations=()) -> list[FineGrainReport]:
    """Redirect each hot huge region to a companion page for one window.

    ``mutations`` is a list of ``(tick, region)`` host-side page-table
    changes injected during the window; a region hit while redirected comes
    back with ``valid=False``.
    """
    space = machine.space
    regions = list(regions)
    for r in regions:
        if not space.is_huge(r) or space.is_redirected(r):
            raise EptError(f"region {r} is not a plain huge leaf")
    log_start = len(machine.conflict_log)
    for r in regions:
        redirect_region(machine, r)
    _replay_with_mutations(machine, window, mutations)
    conflicted = set(machine.conflict_log[log_start:])
    reports = []
    inherited = histogram.huge if histogram is not None else {}
    for r in regions:
        if space.is_redirected(r):
            bm = restore_region(machine, r)
            reports.append(FineGrainReport(r, bm.accessed, bm.dirty, inherited.get(r, 0), True))
        else:
            assert r in conflicted
            reports.append(FineGrainReport(r, np.zeros(N_H, bool), np.zeros(N_H, bool),
                                           inherited.get(r, 0), False))
    return reports


def compute_psr(report: FineGrainReport) -> PsrRecord:
    if not report.valid:
        raise ValueError(f"report for region {report.region} was invalidated by a conflict")
    return PsrRecord(report.region, N_H - report.n_s)


def two_stage_monitor(machine: Machine, window, config: ScanConfig, stage2_window=None,
                      mutations=()) -> TwoStageResult:
    """Stage 1 over every EPT leaf, then companion monitoring of the hot
    huge regions over ``stage2_window`` (the same window by default)."""
    counters = _Counters(machine)
    hist, scanned = _scan(machine, window, config, "all")
    hot_regions, _ = classify_hot_cold(hist.huge, config.hot_threshold)
    hot_frames, _ = classify_hot_cold(hist.base, config.hot_threshold)
    hot_regions = sorted(hot_regions)
    conflicts0 = machine.stats.conflicts
    reports = stage2_fine_monitor(machine, hot_regions,
                                  window if stage2_window is None else stage2_window,
                                  hist, mutations)
    stats = MonitorStats(entries_scanned=scanned + N_H * len(hot_regions),
                         redirections=len(hot_regions),
                         conflicts=machine.stats.conflicts - conflicts0)
    counters.fill(stats)
    return TwoStageResult(hist, hot_regions, sorted(hot_frames), reports, stats)


def fine_frequencies(result: TwoStageResult, n_frames: int) -> np.ndarray:
    """Per-frame frequency after two-stage monitoring.

    Accessed base regions of a monitored huge page inherit its stage-1
    frequency; unaccessed ones get 0. Invalid reports keep the coarse value.
    """
    out = result.histogram.per_frame(n_frames)
    for rep in result.reports:
        if rep.valid:
            sl = slice(rep.region * N_H, (rep.region + 1) * N_H)
            out[sl] = np.where(rep.accessed, rep.inherited_frequency, 0)
    return out


def baseline_monitor(machine: Machine, window, config: ScanConfig) -> BaselineResult:
    mode = config.mode
    space = machine.space
    counters = _Counters(machine)
    stats = MonitorStats()
    if mode is ScanMode.HUGE_SCAN:
        hist, stats.entries_scanned = _scan(machine, window, config, "huge")
        return BaselineResult(hist, counters.fill(stats))
    if mode is ScanMode.BASE_SCAN:
        hist, stats.entries_scanned = _scan(machine, window, config, "all")
        return BaselineResult(hist, counters.fill(stats))
    if mode in (ScanMode.SPLIT_SCAN, ScanMode.SAMPLING_SCAN):
        huge = [r for r in range(space.n_regions)
                if (space.is_huge(r) and not space.is_redirected(r)) or r in space.pending_huge]
        if mode is ScanMode.SAMPLING_SCAN:
            k = round_half_up(config.sampling_fraction * len(huge))
            rng = stream_rng(config.seed, "sampling")
            chosen = sorted(rng.choice(huge, k, replace=False).tolist()) if k else []
        else:
            chosen = huge
        for r in chosen:
            split_huge_page(machine, r, SplitMode.LINUX_LAZY)
        hist, stats.entries_scanned = _scan(machine, window, config, "all")
        for r in chosen:
            collapse_huge_region(machine, r, SplitMode.LINUX_LAZY)
        return BaselineResult(hist, counters.fill(stats), sampled_regions=chosen)
    if mode is ScanMode.ZERO_SCAN:
        _check_window(window)
        contents = space.host.contents
        zero = []
        for gfn in range(space.total_guest_frames):
            f = space.host_frame(gfn)
            if f is not None and contents.is_zero(f):
                zero.append(gfn)
        stats.entries_scanned = space.total_guest_frames
        return BaselineResult(AccessHistogram(config.intervals), counters.fill(stats),
                              zero_frames=zero)
    raise ValueError(f"baseline_monitor does not handle mode {mode.value}")


FREQUENCY_BUCKETS = ((0, 20), (20, 40), (40, 60), (60, 80), (80, 100))


def bucket_bytes(per_frame_freq: np.ndarray, intervals: int):
    """Memory in each normalized-frequency bucket, last bucket closed."""
    norm = per_frame_freq.astype(float) / intervals * 100.0
    out = []
    for lo, hi in FREQUENCY_BUCKETS:
        if hi == 100:
            mask = norm >= lo
        else:
            mask = (norm >= lo) & (norm < hi)
        out.append(int(np.count_nonzero(mask)) * BASE_PAGE)
    return out


def report_rows(result: TwoStageResult):
    """Per-region summary rows: region_id, frequency, n_s, psr, valid."""
    for rep in result.reports:
        yield {"region_id": rep.region, "frequency": rep.inherited_frequency,
               "n_s": rep.n_s if rep.valid else "",
               "psr": compute_psr(rep).psr if rep.valid else "", "valid": rep.valid}
