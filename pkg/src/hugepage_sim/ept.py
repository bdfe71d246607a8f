"""Second-level (EPT) address space model.

The directory holds one slot per 2 MiB guest region. A slot is either a huge
leaf (an ``EptEntry`` with the page-size bit set), a ``BaseTable`` of 512
PTEs, or ``None`` (unmapped). While a huge leaf is redirected to a companion
page, its slot keeps the PDE object with ``is_huge_leaf`` cleared and
``redirected`` set, and the 512 shadow PTEs live in ``space.companions``.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import BASE_PAGE, FRAMES_PER_HUGE, HUGE_PAGE
from .content import ContentStore

HUGE_SHIFT = 21
BASE_SHIFT = 12
HUGE_OFFSET_MASK = HUGE_PAGE - 1
BASE_OFFSET_MASK = BASE_PAGE - 1

WALK_REFS_HUGE = 15
WALK_REFS_BASE = 24

NO_FRAME = -1
_COMPANION_POOL_BASE = 1 << 40


class EptError(ValueError):
    """Invalid operation on the address space."""


class TranslationFault(LookupError):
    """The guest address has no present leaf mapping."""

    def __init__(self, gpa, region):
        super().__init__(f"no EPT mapping for gpa {gpa:#x} (region {region})")
        self.gpa = gpa
        self.region = region


class LeafLevel(enum.Enum):
    HUGE = "huge"
    BASE = "base"
    COMPANION_BASE = "companion_base"


class RegionKind(enum.Enum):
    HUGE = "huge"
    BASE = "base"


@dataclass(slots=True)
class EptEntry:
    present: bool = True
    frame: int = NO_FRAME
    is_huge_leaf: bool = False
    perm_r: bool = True
    perm_w: bool = True
    perm_x: bool = True
    accessed: bool = False
    dirty: bool = False
    redirected: bool = False


class BaseTable:
    """A 4 KiB page-table page: 512 PTEs.

    A PTE with ``present=False`` but a frame number is a recorded mapping
    that the next EPT violation will install (Linux-lazy refill).
    """

    __slots__ = ("entries",)

    def __init__(self, entries):
        self.entries: list[EptEntry] = entries

    def present_count(self):
        return sum(1 for e in self.entries if e.present)


@dataclass
class CompanionPage:
    entries: list[EptEntry]
    origin_pde: EptEntry
    frame: int


@dataclass
class FineBitmap:
    accessed: np.ndarray
    dirty: np.ndarray

    def accessed_offsets(self):
        return np.flatnonzero(self.accessed).tolist()


@dataclass
class Translation:
    hpa: int
    leaf_level: LeafLevel
    walk_refs: int


@dataclass
class AdSnapshot:
    """A/D values read before clearing.

    ``regions`` is keyed by huge-region index (huge leaves), ``frames`` by
    guest frame number (base PTEs and companion PTEs).
    """

    regions: dict[int, tuple[bool, bool]] = field(default_factory=dict)
    frames: dict[int, tuple[bool, bool]] = field(default_factory=dict)

    def accessed_regions(self):
        return sorted(r for r, (a, _) in self.regions.items() if a)

    def accessed_frames(self):
        return sorted(f for f, (a, _) in self.frames.items() if a)


class HostMemory:
    """Monotone host frame allocator plus contents and share counts.

    Several address spaces may hold the same ``HostMemory`` (page sharing).
    """

    def __init__(self):
        self.next_frame = 0
        self.contents = ContentStore()
        self.refs: dict[int, int] = {}
        self._next_companion = _COMPANION_POOL_BASE

    def alloc_run(self, n=FRAMES_PER_HUGE):
        base = -(-self.next_frame // n) * n
        self.next_frame = base + n
        return base

    def alloc_frame(self):
        f = self.next_frame
        self.next_frame += 1
        return f

    def alloc_companion(self):
        f = self._next_companion
        self._next_companion += 1
        return f

    def refcount(self, frame):
        return self.refs.get(frame, 1)

    def is_shared(self, frame):
        return self.refs.get(frame, 1) > 1

    def get_ref(self, frame):
        self.refs[frame] = self.refs.get(frame, 1) + 1

    def put_ref(self, frame):
        """Drop one mapping of ``frame``; frees the content at zero."""
        n = self.refs.get(frame, 1) - 1
        if n <= 0:
            self.refs.pop(frame, None)
            self.contents.drop(frame)
        elif n == 1:
            self.refs.pop(frame, None)
        else:
            self.refs[frame] = n


class EptSpace:
    def __init__(self, total_guest_frames, host=None, *, walk_refs_huge=WALK_REFS_HUGE,
                 walk_refs_base=WALK_REFS_BASE):
        self.total_guest_frames = total_guest_frames
        self.n_regions = total_guest_frames // FRAMES_PER_HUGE
        self.directory: list = [None] * self.n_regions
        self.companions: dict[int, CompanionPage] = {}
        self.pending_huge: dict[int, EptEntry] = {}
        self.host = host if host is not None else HostMemory()
        self.walk_refs_huge = walk_refs_huge
        self.walk_refs_base = walk_refs_base
        self.peak_companions = 0

    @property
    def total_bytes(self):
        return self.total_guest_frames * BASE_PAGE

    def kind(self, region):
        d = self.directory[region]
        if isinstance(d, EptEntry):
            return RegionKind.HUGE
        if isinstance(d, BaseTable):
            return RegionKind.BASE
        return None

    def is_huge(self, region):
        return isinstance(self.directory[region], EptEntry)

    def is_redirected(self, region):
        d = self.directory[region]
        return isinstance(d, EptEntry) and d.redirected

    def huge_regions(self):
        return [r for r, d in enumerate(self.directory) if isinstance(d, EptEntry)]

    def base_regions(self):
        return [r for r, d in enumerate(self.directory) if isinstance(d, BaseTable)]

    def leaf_entry(self, gfn):
        """The entry the MMU would treat as the effective leaf for ``gfn``."""
        region, idx = divmod(gfn, FRAMES_PER_HUGE)
        d = self.directory[region]
        if isinstance(d, EptEntry):
            if d.redirected:
                return self.companions[region].entries[idx]
            return d
        if isinstance(d, BaseTable):
            return d.entries[idx]
        return None

    def host_frame(self, gfn):
        """Host frame backing ``gfn`` (recorded mappings included), or None."""
        region, idx = divmod(gfn, FRAMES_PER_HUGE)
        d = self.directory[region]
        if isinstance(d, EptEntry):
            if d.redirected:
                return self.companions[region].entries[idx].frame
            return d.frame + idx
        if isinstance(d, BaseTable):
            f = d.entries[idx].frame
            return None if f == NO_FRAME else f
        pending = self.pending_huge.get(region)
        if pending is not None:
            return pending.frame + idx
        return None

    def read_frame(self, gfn):
        return self.host.contents.read(self.host_frame(gfn))

    def mapped_host_frames(self):
        """Host frames referenced by this space, one per guest frame."""
        out = []
        for gfn in range(self.total_guest_frames):
            f = self.host_frame(gfn)
            if f is not None:
                out.append(f)
        return out


def build_address_space(total_bytes: int, layout, host: HostMemory | None = None,
                        **walk_refs) -> EptSpace:
    """Fully mapped space; ``layout`` gives "huge" or "base" per 2 MiB region.

    A single string applies to every region.
    """
    if total_bytes <= 0:
        raise EptError("address space size must be positive")
    if total_bytes % HUGE_PAGE:
        raise EptError(f"size {total_bytes} is not a multiple of 2 MiB")
    n_regions = total_bytes // HUGE_PAGE
    if isinstance(layout, (str, RegionKind)):
        layout = [layout] * n_regions
    if len(layout) != n_regions:
        raise EptError(f"layout length mismatch: {len(layout)} entries for {n_regions} regions")
    space = EptSpace(n_regions * FRAMES_PER_HUGE, host, **walk_refs)
    for r, choice in enumerate(layout):
        kind = RegionKind(choice.value if isinstance(choice, RegionKind) else choice)
        if kind is RegionKind.HUGE:
            space.directory[r] = EptEntry(frame=space.host.alloc_run(), is_huge_leaf=True)
        else:
            space.directory[r] = BaseTable(
                [EptEntry(frame=space.host.alloc_frame()) for _ in range(FRAMES_PER_HUGE)])
    return space


def translate(space: EptSpace, gpa: int) -> Translation:
    if not 0 <= gpa < space.total_bytes:
        raise EptError(f"gpa {gpa:#x} outside the address space")
    region = gpa >> HUGE_SHIFT
    d = space.directory[region]
    if isinstance(d, EptEntry):
        if d.redirected:
            e = space.companions[region].entries[(gpa >> BASE_SHIFT) & (FRAMES_PER_HUGE - 1)]
            return Translation((e.frame << BASE_SHIFT) | (gpa & BASE_OFFSET_MASK),
                               LeafLevel.COMPANION_BASE, space.walk_refs_base)
        return Translation((d.frame << BASE_SHIFT) + (gpa & HUGE_OFFSET_MASK),
                           LeafLevel.HUGE, space.walk_refs_huge)
    if isinstance(d, BaseTable):
        e = d.entries[(gpa >> BASE_SHIFT) & (FRAMES_PER_HUGE - 1)]
        if e.present:
            return Translation((e.frame << BASE_SHIFT) | (gpa & BASE_OFFSET_MASK),
                               LeafLevel.BASE, space.walk_refs_base)
    raise TranslationFault(gpa, region)


def clear_and_collect_ad(space: EptSpace, granularity="all") -> AdSnapshot:
    """Read then clear A/D bits.

    ``granularity`` is "huge" (huge leaves only) or "all" (huge leaves and
    base PTEs). Redirected regions always report their 512 companion PTEs
    in place of the PDE.
    """
    if granularity not in ("huge", "all"):
        raise EptError(f"unknown granularity {granularity!r}")
    snap = AdSnapshot()
    for region, d in enumerate(space.directory):
        if isinstance(d, EptEntry):
            if d.redirected:
                base_gfn = region * FRAMES_PER_HUGE
                for i, e in enumerate(space.companions[region].entries):
                    snap.frames[base_gfn + i] = (e.accessed, e.dirty)
                    e.accessed = e.dirty = False
            else:
                snap.regions[region] = (d.accessed, d.dirty)
                d.accessed = d.dirty = False
        elif isinstance(d, BaseTable) and granularity == "all":
            base_gfn = region * FRAMES_PER_HUGE
            for i, e in enumerate(d.entries):
                if e.present:
                    snap.frames[base_gfn + i] = (e.accessed, e.dirty)
                    e.accessed = e.dirty = False
    return snap


def redirect_to_companion(space: EptSpace, region: int) -> CompanionPage:
    """Point a huge PDE at a fresh companion page of 512 base PTEs.

    The caller flushes the region's TLB tags.
    """
    d = space.directory[region]
    if isinstance(d, BaseTable):
        raise EptError(f"region {region} is a base table, not a huge leaf")
    if not isinstance(d, EptEntry):
        raise EptError(f"region {region} is not mapped")
    if d.redirected:
        raise EptError(f"region {region} is already redirected")
    origin = dataclasses.replace(d)
    entries = [
        EptEntry(frame=d.frame + i, perm_r=d.perm_r, perm_w=d.perm_w, perm_x=d.perm_x)
        for i in range(FRAMES_PER_HUGE)
    ]
    comp = CompanionPage(entries=entries, origin_pde=origin, frame=space.host.alloc_companion())
    d.frame = comp.frame
    d.is_huge_leaf = False
    d.redirected = True
    space.companions[region] = comp
    space.peak_companions = max(space.peak_companions, len(space.companions))
    return comp


def _reinstate_origin(pde: EptEntry, origin: EptEntry):
    for f in dataclasses.fields(EptEntry):
        setattr(pde, f.name, getattr(origin, f.name))


def restore_companion(space: EptSpace, region: int) -> FineBitmap:
    """Put the original PDE back; A/D become the OR of the companion bits."""
    d = space.directory[region]
    if not (isinstance(d, EptEntry) and d.redirected):
        raise EptError(f"region {region} is not redirected")
    comp = space.companions.pop(region)
    accessed = np.fromiter((e.accessed for e in comp.entries), bool, FRAMES_PER_HUGE)
    dirty = np.fromiter((e.dirty for e in comp.entries), bool, FRAMES_PER_HUGE)
    _reinstate_origin(d, comp.origin_pde)
    d.accessed = bool(accessed.any())
    d.dirty = bool(dirty.any())
    return FineBitmap(accessed=accessed, dirty=dirty)


def drop_companion(space: EptSpace, region: int) -> None:
    """Revert a redirected PDE to its saved state, discarding collected bits."""
    d = space.directory[region]
    if not (isinstance(d, EptEntry) and d.redirected):
        raise EptError(f"region {region} is not redirected")
    comp = space.companions.pop(region)
    _reinstate_origin(d, comp.origin_pde)


def uniform_layout(n_regions: int, kind="huge") -> Sequence[str]:
    return [kind] * n_regions
