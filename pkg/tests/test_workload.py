import numpy as np
import pytest
from hypothesis import given, strategies as st

from hugepage_sim import BASE_PAGE, FRAMES_PER_HUGE, MiB
from hugepage_sim.content import ZERO_CONTENT, content_bytes
from hugepage_sim.ept import build_address_space
from hugepage_sim.mmu import Machine
from hugepage_sim.monitor import ScanConfig, two_stage_monitor
from hugepage_sim.share import build_share_run, dedup_oracle
from hugepage_sim.workload import (ContentSpec, TraceSpec, ccdf, concat_traces,
                                   eligible_count, generate_contents, generate_role_trace,
                                   generate_trace, read_trace, round_half_up, sequential_sweep,
                                   stream_rng, write_trace)


def test_eligible_count_examples():
    assert eligible_count(0.9) == 51
    assert 1 - 51 / 512 == pytest.approx(0.9004, abs=1e-4)
    assert eligible_count(0.0) == 512
    assert eligible_count(1.0) == 1
    assert round_half_up(2.5) == 3


def test_unbalanced_regions_have_exact_eligible_offsets():
    tr = generate_trace(TraceSpec(wss=16 * MiB, unbalanced_fraction=0.5, target_psr=0.9,
                                  events=20_000, seed=3))
    assert len(tr.unbalanced_regions) == 4
    gfns = (tr.gpas >> np.uint64(12)).astype(np.int64)
    for r in tr.unbalanced_regions:
        offs = np.unique(gfns[gfns // 512 == r] % 512)
        assert set(offs.tolist()) <= set(tr.eligible[r].tolist())
        assert len(tr.eligible[r]) == 51


def test_target_psr_zero_uses_all_offsets():
    tr = generate_trace(TraceSpec(wss=2 * MiB, unbalanced_fraction=1.0, target_psr=0.0,
                                  events=10, seed=0))
    assert len(tr.eligible[0]) == 512


def test_hotspot_share():
    spec = TraceSpec(wss=64 * MiB, pattern="hotspot", hot_fraction=0.2, hot_op_fraction=0.8,
                     events=1_000_000, seed=11)
    tr = generate_trace(spec)
    regions = (tr.gpas >> np.uint64(21)).astype(np.int64)
    share = np.isin(regions, tr.hot_regions).mean()
    # the oracle: cold events never land on hot regions
    assert abs(share - 0.8) <= 0.01


def test_hot_bytes_mode_sizes():
    spec = TraceSpec(wss=40 * MiB, pattern="hotspot", hot_bytes=4 * MiB, hot_op_fraction=1.0,
                     unbalanced_fraction=0.5, events=50_000, seed=2)
    tr = generate_trace(spec)
    hot_frames = sum(len(tr.eligible.get(r, range(512))) for r in tr.hot_regions)
    # k_u = round(0.5 * 1024 / 51) = 10 unbalanced regions, the rest balanced
    assert len(tr.unbalanced_regions) == 10
    assert hot_frames == 1024
    assert len(tr.touched_frames()) <= hot_frames


def test_trace_validation():
    with pytest.raises(ValueError):
        TraceSpec(wss=0)
    with pytest.raises(ValueError):
        TraceSpec(wss=2 * MiB, events=0)
    with pytest.raises(ValueError):
        TraceSpec(wss=3 * MiB)
    with pytest.raises(ValueError):
        TraceSpec(wss=2 * MiB, read_fraction=1.5)


@given(st.integers(0, 2**32), st.sampled_from(["sequential", "uniform", "hotspot"]))
def test_determinism(seed, pattern):
    spec = TraceSpec(wss=8 * MiB, pattern=pattern, unbalanced_fraction=0.5, events=500,
                     seed=seed, read_fraction=0.7)
    a, b = generate_trace(spec), generate_trace(spec)
    assert a.gpas.tobytes() == b.gpas.tobytes() and a.kinds.tobytes() == b.kinds.tobytes()


def test_trace_file_roundtrip(tmp_path):
    tr = generate_trace(TraceSpec(wss=4 * MiB, events=300, seed=5, read_fraction=0.5))
    p = tmp_path / "t.bin"
    write_trace(tr, p)
    data = p.read_bytes()
    assert data[:8] == b"HPSTRACE" and len(data) == 16 + 17 * 300
    back = read_trace(p)
    assert (back.gpas == tr.gpas).all() and (back.kinds == tr.kinds).all()
    assert (back.ticks == tr.ticks).all()


def test_trace_file_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTATRACE_______")
    with pytest.raises(ValueError, match="magic"):
        read_trace(p)
    tr = sequential_sweep(2 * MiB)
    write_trace(tr, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_trace(p)


def test_window_and_concat():
    a = sequential_sweep(2 * MiB)
    b = sequential_sweep(2 * MiB, write=True)
    c = concat_traces(a, b)
    assert len(c) == 1024 and c.end_tick == 1024
    w = c.window(500, 600)
    assert len(w) == 100 and int(w.ticks[0]) == 500


def _images_oracle(images):
    run = build_share_run(images, len(images[0]) * BASE_PAGE) if len(images) > 1 else None
    return dedup_oracle(run.machines) if run else None


def test_contents_full_duplicates():
    imgs = generate_contents(ContentSpec(vm_count=2, frames_per_vm=1024, duplicate_fraction=1.0))
    assert _images_oracle(imgs) == 1024 * BASE_PAGE
    assert [imgs[0].get(f) for f in range(5)] != [imgs[1].get(f) for f in range(5)]


def test_contents_no_duplicates():
    imgs = generate_contents(ContentSpec(vm_count=2, frames_per_vm=512, duplicate_fraction=0.0))
    assert _images_oracle(imgs) == 0


def test_contents_zero_fraction_oracle():
    spec = ContentSpec(vm_count=1, frames_per_vm=1000, duplicate_fraction=0.0,
                       zero_fraction=0.1)
    img = generate_contents(spec)[0]
    groups = {}
    for f in range(1000):
        b = content_bytes(img.get(f))
        groups[b] = groups.get(b, 0) + 1
    saved = sum(n - 1 for n in groups.values()) * BASE_PAGE
    assert saved == (100 - 1) * BASE_PAGE
    assert sum(1 for f in range(1000) if img.get(f) == ZERO_CONTENT) == 100


def test_contents_classes_keep_items_in_class():
    n = 1024
    cls = [np.r_[np.ones(300, int), np.zeros(724, int)],
           np.r_[np.zeros(724, int), np.ones(300, int)]]
    imgs = generate_contents(ContentSpec(2, n, 1.0), cls)
    hot0 = {imgs[0].get(f) for f in np.flatnonzero(cls[0] == 1)}
    hot1 = {imgs[1].get(f) for f in np.flatnonzero(cls[1] == 1)}
    assert hot0 == hot1
    with pytest.raises(ValueError):
        generate_contents(ContentSpec(2, n, 1.0), [cls[0], np.zeros(n, int)])


def test_contents_determinism():
    spec = ContentSpec(vm_count=3, frames_per_vm=256, duplicate_fraction=0.5,
                       zero_fraction=0.1, seed=9)
    assert [c.ids for c in generate_contents(spec)] == [c.ids for c in generate_contents(spec)]


def test_ccdf_examples():
    pts = ccdf([3, 3, 3], max_frequency=6)
    assert [y for _, y in pts] == [1, 1, 1, 0, 0, 0, 0]
    pts = ccdf([0, 0, 10, 10], max_frequency=10)
    assert all(y == 0.5 for _, y in pts[:10]) and pts[10][1] == 0
    pts = ccdf([4], max_frequency=8)
    assert [y for _, y in pts] == [1, 1, 1, 1, 0, 0, 0, 0, 0]
    assert pts[-1][0] == 100
    with pytest.raises(ValueError):
        ccdf([])


@given(st.lists(st.integers(0, 20), min_size=1, max_size=50))
def test_ccdf_monotone(freqs):
    ys = [y for _, y in ccdf(freqs)]
    assert all(a >= b for a, b in zip(ys, ys[1:]))


@given(st.integers(0, 2**20), st.sampled_from([0.5, 0.8, 0.9, 0.95]))
def test_psr_fidelity(seed, psr):
    spec = TraceSpec(wss=8 * MiB, unbalanced_fraction=1.0, target_psr=psr, events=20_000,
                     seed=seed)
    tr = generate_trace(spec)
    m = Machine(build_address_space(8 * MiB, "huge"))
    res = two_stage_monitor(m, tr, ScanConfig(window_ticks=20_000, interval_ticks=2_000))
    expected = 1 - eligible_count(psr) / FRAMES_PER_HUGE
    for rep in res.reports:
        assert abs((1 - rep.n_s / 512) - expected) <= 1 / 512


def test_role_trace():
    tr = generate_role_trace(["balanced", "unbalanced", "cold"], 0.9, 5000, seed=1)
    regions = set((tr.gpas >> np.uint64(21)).tolist())
    assert regions <= {0, 1} and len(tr.eligible[1]) == 51
    with pytest.raises(ValueError):
        generate_role_trace(["cold"], 0.9, 10)
    with pytest.raises(ValueError):
        generate_role_trace(["warm"], 0.9, 10)


def test_stream_rng_independent():
    a = stream_rng(1, "events").integers(0, 1 << 30, 4)
    b = stream_rng(1, "kinds").integers(0, 1 << 30, 4)
    assert (a != b).any()
    assert (stream_rng(1, "events").integers(0, 1 << 30, 4) == a).all()
