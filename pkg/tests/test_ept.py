import numpy as np
import pytest
from hypothesis import given, strategies as st

from hugepage_sim import FRAMES_PER_HUGE, HUGE_PAGE, MiB
from hugepage_sim.ept import (BaseTable, EptEntry, EptError, LeafLevel, TranslationFault,
                              build_address_space, clear_and_collect_ad, redirect_to_companion,
                              restore_companion, translate)
from hugepage_sim.mmu import Machine, replay
from hugepage_sim.workload import Trace


def test_build_two_huge():
    s = build_address_space(4 * MiB, ["huge", "huge"])
    assert all(isinstance(d, EptEntry) and d.is_huge_leaf for d in s.directory)
    assert s.total_guest_frames == 1024


def test_build_mixed():
    s = build_address_space(4 * MiB, ["huge", "base"])
    assert isinstance(s.directory[0], EptEntry)
    assert isinstance(s.directory[1], BaseTable)
    assert s.directory[1].present_count() == 512


def test_build_errors():
    with pytest.raises(EptError, match="layout length"):
        build_address_space(2 * MiB, [])
    with pytest.raises(EptError):
        build_address_space(0, "huge")
    with pytest.raises(EptError):
        build_address_space(3 * MiB, "huge")


def test_huge_frames_aligned_contiguous():
    s = build_address_space(8 * MiB, ["base", "huge", "base", "huge"])
    for r in (1, 3):
        assert s.directory[r].frame % FRAMES_PER_HUGE == 0


def _space_with_base_frame(frame_base):
    s = build_address_space(2 * MiB, "huge")
    s.directory[0].frame = frame_base
    return s


def test_translate_huge_example():
    s = _space_with_base_frame(4096)
    t = translate(s, 8192)
    assert t.hpa == 4096 * 4096 + 8192
    assert t.leaf_level is LeafLevel.HUGE
    assert t.walk_refs == 15


def test_translate_redirected_example():
    s = _space_with_base_frame(4096)
    redirect_to_companion(s, 0)
    t = translate(s, 8192)
    assert t.hpa == 4096 * 4096 + 8192
    assert t.leaf_level is LeafLevel.COMPANION_BASE
    assert t.walk_refs == 24


def test_translate_unmapped_faults():
    s = build_address_space(4 * MiB, "huge")
    s.directory[1] = None
    with pytest.raises(TranslationFault):
        translate(s, HUGE_PAGE + 5)


def test_translate_does_not_touch_ad():
    s = build_address_space(2 * MiB, "huge")
    translate(s, 123)
    assert not s.directory[0].accessed


def test_clear_collect_examples():
    s = build_address_space(4 * MiB, "huge")
    assert all(v == (False, False) for v in clear_and_collect_ad(s).regions.values())
    s.directory[0].accessed = True
    snap = clear_and_collect_ad(s, "huge")
    assert snap.regions[0] == (True, False)
    assert (s.directory[0].accessed, s.directory[0].dirty) == (False, False)


def test_clear_collect_redirected_lists_companion_frames():
    s = build_address_space(4 * MiB, "huge")
    comp = redirect_to_companion(s, 1)
    comp.entries[3].accessed = True
    comp.entries[7].accessed = True
    snap = clear_and_collect_ad(s)
    assert 1 not in snap.regions
    assert snap.accessed_frames() == [512 + 3, 512 + 7]
    assert not any(e.accessed for e in comp.entries)


def test_redirect_example():
    s = build_address_space(2 * MiB, "huge")
    s.directory[0].frame = 1024
    comp = redirect_to_companion(s, 0)
    assert comp.entries[0].frame == 1024
    assert comp.entries[511].frame == 1535
    assert all(e.perm_r and e.perm_w and e.perm_x and not e.is_huge_leaf for e in comp.entries)
    pde = s.directory[0]
    assert pde.redirected and not pde.is_huge_leaf and pde.frame == comp.frame


def test_redirect_errors():
    s = build_address_space(4 * MiB, ["huge", "base"])
    redirect_to_companion(s, 0)
    with pytest.raises(EptError, match="already"):
        redirect_to_companion(s, 0)
    with pytest.raises(EptError):
        redirect_to_companion(s, 1)


def test_restore_or_merge():
    s = build_address_space(2 * MiB, "huge")
    comp = redirect_to_companion(s, 0)
    comp.entries[0].accessed = True
    comp.entries[200].accessed = True
    bm = restore_companion(s, 0)
    assert np.flatnonzero(bm.accessed).tolist() == [0, 200]
    assert s.directory[0].accessed and not s.directory[0].dirty
    assert not s.companions


def test_restore_empty_and_error():
    s = build_address_space(2 * MiB, "huge")
    redirect_to_companion(s, 0)
    bm = restore_companion(s, 0)
    assert not bm.accessed.any() and not s.directory[0].accessed
    with pytest.raises(EptError):
        restore_companion(s, 0)


@given(st.lists(st.tuples(st.integers(0, 4 * MiB - 1), st.booleans()), min_size=1, max_size=40))
def test_mapping_preserved_and_roundtrip(events):
    gpas = [g for g, _ in events]
    writes = [w for _, w in events]
    s = build_address_space(4 * MiB, "huge")
    before = [translate(s, g).hpa for g in gpas]
    origin = [EptEntry(**{k: getattr(d, k) for k in d.__dataclass_fields__})
              for d in s.directory]
    m = Machine(s)
    for r in range(2):
        redirect_to_companion(s, r)
    assert [translate(s, g).hpa for g in gpas] == before
    for g, w in zip(gpas, writes):
        m.access(g, w)
    exp_a = {g >> 21 for g in gpas}
    exp_d = {g >> 21 for g, w in zip(gpas, writes) if w}
    for r in range(2):
        restore_companion(s, r)
        d = s.directory[r]
        assert d.accessed == (r in exp_a)
        assert d.dirty == (r in exp_d)
        for k in ("present", "frame", "is_huge_leaf", "perm_r", "perm_w", "perm_x", "redirected"):
            assert getattr(d, k) == getattr(origin[r], k)
    assert [translate(s, g).hpa for g in gpas] == before


@given(st.lists(st.sampled_from(["huge", "base"]), min_size=1, max_size=4), st.data())
def test_coverage_partition_and_idempotent_clear(layout, data):
    s = build_address_space(len(layout) * HUGE_PAGE, layout)
    region = data.draw(st.integers(0, len(layout) - 1))
    if layout[region] == "huge":
        redirect_to_companion(s, region)
    covered = 0
    for d in s.directory:
        if isinstance(d, EptEntry) or isinstance(d, BaseTable):
            covered += FRAMES_PER_HUGE
    assert covered == s.total_guest_frames
    gpas = data.draw(st.lists(st.integers(0, s.total_bytes - 1), max_size=30))
    replay(Machine(s), Trace.from_events(gpas))
    clear_and_collect_ad(s)
    snap = clear_and_collect_ad(s)
    assert not snap.accessed_regions() and not snap.accessed_frames()
