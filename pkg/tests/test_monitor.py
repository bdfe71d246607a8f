from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hugepage_sim import BASE_PAGE, FRAMES_PER_HUGE, HUGE_PAGE, MiB
from hugepage_sim.ept import EptError, build_address_space
from hugepage_sim.mmu import Machine
from hugepage_sim.monitor import (FineGrainReport, ScanConfig, ScanMode, baseline_monitor,
                                  bucket_bytes, classify_hot_cold, compute_psr,
                                  fine_frequencies, report_rows, stage1_scan,
                                  stage2_fine_monitor, two_stage_monitor)
from hugepage_sim.workload import Trace, TraceSpec, generate_trace


def _m(total=4 * MiB, layout="huge"):
    return Machine(build_address_space(total, layout))


def _trace(pairs):
    """(tick, gpa) pairs."""
    ticks = [t for t, _ in pairs]
    return Trace.from_events([g for _, g in pairs], ticks=ticks)


def test_stage1_examples():
    cfg = ScanConfig(window_ticks=30, interval_ticks=10)
    tr = _trace([(1, 0), (25, 4096), (29, 8192)])
    h = stage1_scan(_m(), tr, cfg, start=0)
    assert h.huge[0] == 2 and h.huge[1] == 0
    cfg = ScanConfig(window_ticks=100, interval_ticks=10)
    tr = _trace([(t, 64) for t in range(0, 100, 10)])
    assert stage1_scan(_m(), tr, cfg).huge[0] == 10


def test_stage1_empty_window():
    with pytest.raises(ValueError):
        stage1_scan(_m(), Trace.from_events([]), ScanConfig())


def test_scan_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(window_ticks=10, interval_ticks=3)
    with pytest.raises(ValueError):
        ScanConfig(hot_threshold=0)


def test_classify_examples():
    assert classify_hot_cold({"a": 5, "b": 0}, 1) == ({"a"}, {"b"})
    assert classify_hot_cold({"a": 5, "b": 3}, 11) == (set(), {"a", "b"})
    assert classify_hot_cold({"a": 1, "b": 2}, 1) == ({"a", "b"}, set())


def test_stage2_example_bits():
    m = _m()
    tr = Trace.from_events([o * BASE_PAGE for o in (0, 5, 511, 5)])
    rep, = stage2_fine_monitor(m, [0], tr)
    assert np.flatnonzero(rep.accessed).tolist() == [0, 5, 511] and rep.n_s == 3


def test_stage2_untouched_region():
    rep, = stage2_fine_monitor(_m(), [1], Trace.from_events([0]))
    assert rep.n_s == 0 and compute_psr(rep).psr == 1.0


def test_stage2_conflict_invalidates():
    m = _m()
    tr = Trace.from_events([0, HUGE_PAGE, 4096, HUGE_PAGE + 4096])
    reps = stage2_fine_monitor(m, [0, 1], tr, mutations=[(2, 1)])
    assert reps[0].valid and not reps[1].valid
    with pytest.raises(ValueError):
        compute_psr(reps[1])


def test_stage2_requires_huge():
    with pytest.raises(EptError):
        stage2_fine_monitor(_m(4 * MiB, ["huge", "base"]), [1], Trace.from_events([0]))


def test_compute_psr_examples():
    def rep(n):
        a = np.zeros(512, bool)
        a[:n] = True
        return FineGrainReport(0, a, np.zeros(512, bool), 1)
    assert compute_psr(rep(512)).psr == 0.0
    assert compute_psr(rep(0)).psr == 1.0
    assert compute_psr(rep(52)).psr == 0.8984375
    assert compute_psr(rep(52)).psr_exact == Fraction(460, 512)


def test_huge_scan_bloat_example():
    cfg = ScanConfig(window_ticks=50, interval_ticks=10)
    tr = _trace([(t, 7 * BASE_PAGE) for t in range(0, 50, 5)])
    h = baseline_monitor(_m(), tr, ScanConfig(50, 10, mode=ScanMode.HUGE_SCAN)).histogram
    assert h.huge[0] == cfg.intervals
    assert h.hot_bytes() == 2 * MiB


def test_sampling_scan_count():
    m = _m(200 * MiB)
    tr = Trace.from_events([0])
    cfg = ScanConfig(window_ticks=1, interval_ticks=1, sampling_fraction=0.05,
                     mode=ScanMode.SAMPLING_SCAN, seed=4)
    res = baseline_monitor(m, tr, cfg)
    assert len(res.sampled_regions) == 5
    assert m.remap.splits == 5 and m.remap.collapses == 5


def test_split_scan_exits_and_restores_huge():
    m = _m(4 * MiB)
    tr = Trace.from_events([0, 4096, HUGE_PAGE])
    cfg = ScanConfig(window_ticks=3, interval_ticks=3, mode=ScanMode.SPLIT_SCAN)
    res = baseline_monitor(m, tr, cfg)
    assert res.histogram.hot_bytes() == 3 * BASE_PAGE
    assert m.remap.vm_exits_from_lazy_refill == 3
    # lazy collapse: both regions wait for their refill exit
    assert sorted(m.space.pending_huge) == [0, 1]


def test_zero_scan_empty():
    m = _m()
    res = baseline_monitor(m, Trace.from_events([0]), ScanConfig(1, 1, mode=ScanMode.ZERO_SCAN))
    assert res.zero_frames == [] and not res.histogram.huge


def test_zero_scan_finds_zero_frames():
    m = _m()
    m.space.host.contents.set(m.space.host_frame(3), 0)
    res = baseline_monitor(m, Trace.from_events([0]), ScanConfig(1, 1, mode=ScanMode.ZERO_SCAN))
    assert res.zero_frames == [3]


def test_baseline_mode_mismatch():
    with pytest.raises(ValueError):
        baseline_monitor(_m(), Trace.from_events([0]), ScanConfig(1, 1))


def _oracle_touched(window):
    out = {}
    for g in window.gpas.tolist():
        out.setdefault(g >> 21, set()).add((g >> 12) % FRAMES_PER_HUGE)
    return out


@given(st.integers(0, 2**24), st.floats(0.0, 1.0), st.sampled_from([0.0, 0.5, 0.9, 0.99]))
def test_accuracy_oracle_and_inheritance(seed, u, psr):
    tr = generate_trace(TraceSpec(wss=8 * MiB, unbalanced_fraction=u, target_psr=psr,
                                  events=3000, seed=seed))
    m = _m(8 * MiB)
    cfg = ScanConfig(window_ticks=3000, interval_ticks=300)
    res = two_stage_monitor(m, tr, cfg)
    oracle = _oracle_touched(tr)
    assert res.hot_regions == sorted(oracle)
    for rep in res.reports:
        assert set(np.flatnonzero(rep.accessed).tolist()) == oracle[rep.region]
        assert rep.inherited_frequency == res.histogram.huge[rep.region]
    assert not m.space.companions


@given(st.integers(0, 2**24), st.integers(1, 52))
def test_hot_bloat_witness(seed, n_s):
    psr = 1 - n_s / 512
    tr = generate_trace(TraceSpec(wss=8 * MiB, unbalanced_fraction=1.0, target_psr=psr,
                                  events=2000, seed=seed))
    cfg = ScanConfig(window_ticks=2000, interval_ticks=200)
    huge = baseline_monitor(_m(8 * MiB), tr, ScanConfig(2000, 200, mode=ScanMode.HUGE_SCAN))
    base = baseline_monitor(_m(8 * MiB, "base"), tr, ScanConfig(2000, 200, mode=ScanMode.BASE_SCAN))
    two = two_stage_monitor(_m(8 * MiB), tr, cfg)
    hb, bb = huge.histogram.hot_bytes(), base.histogram.hot_bytes()
    assert hb * 52 >= 512 * bb
    assert sum(r.n_s for r in two.reports) * BASE_PAGE == bb


@given(st.integers(0, 2**24))
def test_monitoring_preserves_translations(seed):
    tr = generate_trace(TraceSpec(wss=4 * MiB, unbalanced_fraction=0.5, events=400, seed=seed))
    plain = _m()
    ref = [plain.access(g).hpa for g in tr.gpas.tolist()]
    m = _m()
    two_stage_monitor(m, tr, ScanConfig(400, 40))
    assert [m.access(g).hpa for g in tr.gpas.tolist()] == ref


def test_fine_frequencies_and_rows():
    tr = Trace.from_events([0, 4096 * 3, HUGE_PAGE])
    m = _m()
    res = two_stage_monitor(m, tr, ScanConfig(3, 1))
    ff = fine_frequencies(res, 1024)
    assert ff[0] == ff[3] == res.histogram.huge[0] and ff[1] == 0
    rows = list(report_rows(res))
    assert rows[0]["region_id"] == 0 and rows[0]["n_s"] == 2 and rows[0]["valid"]


def test_bucket_bytes():
    assert bucket_bytes(np.array([0, 2, 5, 10]), 10) == [4096, 4096, 4096, 0, 4096]
