"""Seeded access traces, VM content images, and access-frequency CCDFs.

All randomness comes from numpy's PCG64 seeded through ``SeedSequence``.
Each draw purpose has its own stream id so adding a draw in one place never
shifts another::

    rng = Generator(PCG64(SeedSequence([seed, stream])))

with the stream ids in ``STREAMS``. Given the same seed, traces and content
images are byte-identical across runs and platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import BASE_PAGE, FRAMES_PER_HUGE, HUGE_PAGE
from .content import ContentStore, ZERO_CONTENT

STREAMS = {
    "unbalanced": 1,
    "offsets": 2,
    "events": 3,
    "kinds": 4,
    "hot_regions": 5,
    "line": 6,
    "permutation": 7,
    "sampling": 8,
    "mutations": 9,
}

TRACE_MAGIC = b"HPSTRACE"
TRACE_VERSION = 1
_HEADER = struct.Struct("<8sII")
_RECORD = np.dtype([("tick", "<u8"), ("gpa", "<u8"), ("kind", "u1")])

PATTERNS = ("sequential", "uniform", "hotspot")


def stream_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, STREAMS[stream], *extra])))


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def eligible_count(target_psr: float) -> int:
    """Touched base regions per unbalanced huge region for a target PSR."""
    return max(1, round_half_up((1.0 - target_psr) * FRAMES_PER_HUGE))


@dataclass(frozen=True)
class TraceSpec:
    """Synthetic trace parameters.

    ``hot_bytes`` switches the hotspot pattern to a fixed amount of hot data:
    ``unbalanced_fraction`` is then the share of that hot data living in
    unbalanced huge regions, and cold events land anywhere in the working set.
    """

    wss: int
    pattern: str = "uniform"
    read_fraction: float = 1.0
    unbalanced_fraction: float = 0.0
    target_psr: float = 0.9
    events: int = 10_000
    seed: int = 0
    hot_fraction: float = 0.2
    hot_op_fraction: float = 0.8
    hot_bytes: int | None = None

    def __post_init__(self):
        if self.wss <= 0:
            raise ValueError("wss must be positive")
        if self.wss % HUGE_PAGE:
            raise ValueError(f"wss {self.wss} is not a multiple of 2 MiB")
        if self.events <= 0:
            raise ValueError("events must be positive")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        for name in ("read_fraction", "unbalanced_fraction", "target_psr", "hot_fraction",
                     "hot_op_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.hot_bytes is not None and not 0 < self.hot_bytes <= self.wss:
            raise ValueError("hot_bytes must lie in (0, wss]")

    @property
    def n_regions(self):
        return self.wss // HUGE_PAGE


@dataclass
class Trace:
    ticks: np.ndarray
    gpas: np.ndarray
    kinds: np.ndarray
    # region -> sorted eligible base offsets; regions absent use all 512
    eligible: dict[int, np.ndarray] = field(default_factory=dict)
    unbalanced_regions: list[int] = field(default_factory=list)
    hot_regions: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.gpas)

    def __iter__(self):
        from .mmu import AccessEvent, AccessKind
        for t, g, k in zip(self.ticks.tolist(), self.gpas.tolist(), self.kinds.tolist()):
            yield AccessEvent(gpa=g, kind=AccessKind(k), tick=t)

    @classmethod
    def from_events(cls, gpas, kinds=None, ticks=None):
        gpas = np.asarray(gpas, dtype=np.uint64)
        kinds = np.zeros(len(gpas), np.uint8) if kinds is None else np.asarray(kinds, np.uint8)
        ticks = np.arange(len(gpas), dtype=np.uint64) if ticks is None else np.asarray(ticks, np.uint64)
        return cls(ticks, gpas, kinds)

    def window(self, start: int, stop: int) -> "Trace":
        """Events with ``start <= tick < stop``."""
        lo, hi = np.searchsorted(self.ticks, [start, stop])
        return Trace(self.ticks[lo:hi], self.gpas[lo:hi], self.kinds[lo:hi], self.eligible,
                     self.unbalanced_regions, self.hot_regions)

    def shifted(self, dticks: int) -> "Trace":
        return Trace(self.ticks + np.uint64(dticks), self.gpas, self.kinds, self.eligible,
                     self.unbalanced_regions, self.hot_regions)

    @property
    def end_tick(self):
        return int(self.ticks[-1]) + 1 if len(self.ticks) else 0

    def touched_frames(self):
        return set((self.gpas >> np.uint64(12)).tolist())

    def save(self, path):
        write_trace(self, path)


def _region_offsets(spec: TraceSpec):
    n = spec.n_regions
    eligible: dict[int, np.ndarray] = {}
    order = stream_rng(spec.seed, "unbalanced").permutation(n)
    off_rng = stream_rng(spec.seed, "offsets")
    n_s = eligible_count(spec.target_psr)
    hot_regions: list[int] = []
    if spec.pattern == "hotspot" and spec.hot_bytes is not None:
        hot_frames = spec.hot_bytes // BASE_PAGE
        k_u = min(n, round_half_up(spec.unbalanced_fraction * hot_frames / n_s))
        unbalanced = sorted(order[:k_u].tolist())
        rest = order[k_u:].tolist()
        balanced_frames = max(0, hot_frames - k_u * n_s)
        full, partial = divmod(balanced_frames, FRAMES_PER_HUGE)
        full = min(full, len(rest))
        hot_regions = unbalanced + rest[:full]
        if partial and len(rest) > full:
            r = rest[full]
            eligible[r] = np.sort(off_rng.choice(FRAMES_PER_HUGE, partial, replace=False))
            hot_regions.append(r)
        hot_regions.sort()
    else:
        k_u = round_half_up(spec.unbalanced_fraction * n)
        unbalanced = sorted(order[:k_u].tolist())
    for r in unbalanced:
        eligible[r] = np.sort(off_rng.choice(FRAMES_PER_HUGE, n_s, replace=False))
    return eligible, unbalanced, hot_regions


def _frames_of(regions, eligible):
    parts = []
    for r in regions:
        offs = eligible.get(r)
        if offs is None:
            offs = np.arange(FRAMES_PER_HUGE)
        parts.append(r * FRAMES_PER_HUGE + offs)
    if not parts:
        return np.zeros(0, np.int64)
    return np.concatenate(parts).astype(np.int64)


def generate_trace(spec: TraceSpec) -> Trace:
    n = spec.n_regions
    eligible, unbalanced, hot_regions = _region_offsets(spec)
    ev = stream_rng(spec.seed, "events")
    all_regions = list(range(n))

    if spec.pattern == "sequential":
        frames = _frames_of(all_regions, eligible)
        idx = np.arange(spec.events) % len(frames)
        gfns = frames[idx]
        lines = np.zeros(spec.events, np.int64)
    else:
        lines = stream_rng(spec.seed, "line").integers(0, BASE_PAGE // 64, spec.events) * 64
        if spec.pattern == "uniform":
            frames = _frames_of(all_regions, eligible)
            gfns = frames[ev.integers(0, len(frames), spec.events)]
        elif spec.hot_bytes is not None:
            hot = _frames_of(hot_regions, eligible)
            cold = np.arange(n * FRAMES_PER_HUGE, dtype=np.int64)
            is_hot = ev.random(spec.events) < spec.hot_op_fraction
            gfns = np.where(is_hot, hot[ev.integers(0, len(hot), spec.events)],
                            cold[ev.integers(0, len(cold), spec.events)])
        else:
            k_hot = max(1, round_half_up(spec.hot_fraction * n))
            hot_regions = sorted(stream_rng(spec.seed, "hot_regions").permutation(n)[:k_hot].tolist())
            cold_regions = [r for r in all_regions if r not in set(hot_regions)] or hot_regions
            hot = _frames_of(hot_regions, eligible)
            cold = _frames_of(cold_regions, eligible)
            is_hot = ev.random(spec.events) < spec.hot_op_fraction
            gfns = np.where(is_hot, hot[ev.integers(0, len(hot), spec.events)],
                            cold[ev.integers(0, len(cold), spec.events)])
    kinds = (stream_rng(spec.seed, "kinds").random(spec.events) >= spec.read_fraction).astype(np.uint8)
    gpas = (gfns.astype(np.uint64) << np.uint64(12)) + lines.astype(np.uint64)
    return Trace(np.arange(spec.events, dtype=np.uint64), gpas, kinds, eligible, unbalanced,
                 hot_regions)


ROLES = ("balanced", "unbalanced", "cold")


def generate_role_trace(roles, target_psr=0.9, events=10_000, seed=0, read_fraction=1.0) -> Trace:
    """Uniform accesses over the hot frames of a per-region role layout.

    A "balanced" region is hot on all 512 frames, an "unbalanced" one on
    ``eligible_count(target_psr)`` seeded offsets, a "cold" one never.
    """
    roles = list(roles)
    for r in roles:
        if r not in ROLES:
            raise ValueError(f"unknown region role {r!r}")
    if events <= 0:
        raise ValueError("events must be positive")
    off_rng = stream_rng(seed, "offsets")
    n_s = eligible_count(target_psr)
    eligible = {}
    unbalanced = [i for i, r in enumerate(roles) if r == "unbalanced"]
    for i in unbalanced:
        eligible[i] = np.sort(off_rng.choice(FRAMES_PER_HUGE, n_s, replace=False))
    hot_regions = [i for i, r in enumerate(roles) if r != "cold"]
    hot = _frames_of(hot_regions, eligible)
    if len(hot) == 0:
        raise ValueError("role layout has no hot region")
    gfns = hot[stream_rng(seed, "events").integers(0, len(hot), events)]
    lines = stream_rng(seed, "line").integers(0, BASE_PAGE // 64, events) * 64
    kinds = (stream_rng(seed, "kinds").random(events) >= read_fraction).astype(np.uint8)
    gpas = (gfns.astype(np.uint64) << np.uint64(12)) + lines.astype(np.uint64)
    return Trace(np.arange(events, dtype=np.uint64), gpas, kinds, eligible, unbalanced,
                 hot_regions)


def sequential_sweep(wss: int, write=False, start_tick=0) -> Trace:
    """One access per 4 KiB frame, in address order."""
    n = wss // BASE_PAGE
    gpas = np.arange(n, dtype=np.uint64) << np.uint64(12)
    kinds = np.full(n, 1 if write else 0, np.uint8)
    ticks = np.arange(start_tick, start_tick + n, dtype=np.uint64)
    return Trace(ticks, gpas, kinds)


def concat_traces(*traces: Trace) -> Trace:
    """Concatenate, re-ticking each part to follow the previous one."""
    out_t, out_g, out_k = [], [], []
    offset = 0
    for t in traces:
        out_t.append(t.ticks - (t.ticks[0] if len(t) else 0) + np.uint64(offset))
        out_g.append(t.gpas)
        out_k.append(t.kinds)
        offset += int(t.ticks[-1] - t.ticks[0]) + 1 if len(t) else 0
    first = traces[0]
    return Trace(np.concatenate(out_t), np.concatenate(out_g), np.concatenate(out_k),
                 first.eligible, first.unbalanced_regions, first.hot_regions)


def write_trace(trace: Trace, path) -> None:
    rec = np.empty(len(trace), dtype=_RECORD)
    rec["tick"] = trace.ticks
    rec["gpa"] = trace.gpas
    rec["kind"] = trace.kinds
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, 0))
        fh.write(rec.tobytes())


def read_trace(path) -> Trace:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated trace header")
    magic, version, _ = _HEADER.unpack_from(data)
    if magic != TRACE_MAGIC:
        raise ValueError(f"{path}: not a trace file (bad magic)")
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {version}")
    body = data[_HEADER.size:]
    if len(body) % _RECORD.itemsize:
        raise ValueError(f"{path}: truncated trace record")
    rec = np.frombuffer(body, dtype=_RECORD)
    return Trace(rec["tick"].astype(np.uint64), rec["gpa"].astype(np.uint64),
                 rec["kind"].astype(np.uint8))


@dataclass(frozen=True)
class ContentSpec:
    vm_count: int = 2
    frames_per_vm: int = 4096
    duplicate_fraction: float = 1.0
    zero_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.vm_count < 1 or self.frames_per_vm < 1:
            raise ValueError("vm_count and frames_per_vm must be positive")
        if not 0 <= self.duplicate_fraction <= 1 or not 0 <= self.zero_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.vm_count >= 1024 or self.frames_per_vm >= 1 << 24:
            raise ValueError("content spec too large for the id layout")


def _content_id(seed, tag, vm, idx):
    return ((seed & 0xFFFFFF) << 36) | (tag << 34) | (vm << 24) | idx


def generate_contents(spec: ContentSpec, classes=None) -> list[ContentStore]:
    """Per-VM content images keyed by guest frame number.

    Duplicate contents are the same set in every VM, placed at a per-VM
    random permutation of frame positions; zero frames are all-zero; the
    rest are unique per (vm, frame).

    ``classes`` optionally gives one label per frame for each VM (for
    example hot=1 / cold=0 from the workload). Items are then dealt to
    classes identically in every VM and permuted only within a class, so a
    duplicate sits in frames of the same label in every VM. Class sizes
    must match across VMs.
    """
    n = spec.frames_per_vm
    n_zero = min(n, round_half_up(spec.zero_fraction * n))
    n_dup = min(n - n_zero, round_half_up(spec.duplicate_fraction * n))
    dup = [_content_id(spec.seed, 1, 0, i) for i in range(n_dup)]
    if classes is not None:
        classes = [np.asarray(c, dtype=np.int64) for c in classes]
        if len(classes) != spec.vm_count or any(len(c) != n for c in classes):
            raise ValueError("classes need one label per frame for every VM")
        labels = sorted(set(classes[0].tolist()))
        sizes = [int((classes[0] == lab).sum()) for lab in labels]
        for c in classes[1:]:
            if [int((c == lab).sum()) for lab in labels] != sizes:
                raise ValueError("class sizes differ between VMs")
        # VM-independent dealing of item slots to classes
        slots = stream_rng(spec.seed, "permutation", 1 << 20).permutation(n)
    images = []
    for vm in range(spec.vm_count):
        items = dup + [ZERO_CONTENT] * n_zero + [
            _content_id(spec.seed, 2, vm, j) for j in range(n - n_dup - n_zero)]
        rng = stream_rng(spec.seed, "permutation", vm)
        if classes is None:
            perm = rng.permutation(n)
            images.append(ContentStore({f: items[p] for f, p in enumerate(perm.tolist())}))
            continue
        ids = {}
        start = 0
        for lab, size in zip(labels, sizes):
            chunk = slots[start:start + size]
            start += size
            frames = np.flatnonzero(classes[vm] == lab)
            for f, p in zip(frames.tolist(), rng.permutation(chunk).tolist()):
                ids[f] = items[p]
        images.append(ContentStore(ids))
    return images


def ccdf(histogram, normalize_to: float = 100.0, max_frequency: int | None = None):
    """Memory-weighted complementary CDF of access frequency.

    ``histogram`` is an object with ``frequency_weights()`` returning
    ``(freqs, weights, max_frequency)``, or a plain sequence of frequencies
    (unit weights). Returns ``[(x, y)]`` for every integer frequency
    ``0..F``, with ``x = f / F * normalize_to`` and ``y`` the fraction of
    memory whose frequency exceeds ``f``.
    """
    if hasattr(histogram, "frequency_weights"):
        freqs, weights, fmax = histogram.frequency_weights()
    else:
        freqs = np.asarray(list(histogram), dtype=np.int64)
        weights = np.ones(len(freqs))
        fmax = None
    freqs = np.asarray(freqs, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    if freqs.size == 0:
        raise ValueError("empty histogram")
    top = max_frequency or fmax or int(freqs.max()) or 1
    total = weights.sum()
    order = np.argsort(freqs, kind="stable")
    f_sorted = freqs[order]
    w_cum = np.concatenate([[0.0], np.cumsum(weights[order])])
    out = []
    for f in range(top + 1):
        below = w_cum[np.searchsorted(f_sorted, f, side="right")]
        out.append((f / top * normalize_to, float((total - below) / total)))
    return out
