"""Registered experiments. Each writes its CSV reports plus run_manifest.json
into the output directory; every byte depends only on (config, seed)."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from .. import BASE_PAGE, FRAMES_PER_HUGE, HUGE_PAGE, __version__
from ..ept import build_address_space
from ..mmu import Machine, replay
from ..monitor import ScanMode, baseline_monitor, bucket_bytes, two_stage_monitor
from ..remap import SplitMode, collapse_huge_region, split_huge_page
from ..share import ShareConfig, build_share_run, run_share_epoch
from ..tlb import Tlb
from ..tmm import EpochReport, TierSpec, run_tmm
from ..workload import (ccdf, generate_contents, generate_role_trace, generate_trace,
                        sequential_sweep, stream_rng)
from .config import ExperimentConfig

MANIFEST_SCHEMA = 1


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 9))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


def write_csv(path: Path, rows, fields=None):
    rows = list(rows)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(k, "")) for k in fields])
    return path.name


def hot_frame_labels(trace, n_frames):
    """1 for frames the trace can touch, 0 otherwise."""
    lab = np.zeros(n_frames, np.int64)
    for r in trace.hot_regions:
        offs = trace.eligible.get(r)
        offs = np.arange(FRAMES_PER_HUGE) if offs is None else offs
        lab[r * FRAMES_PER_HUGE + offs] = 1
    return lab


def share_roles(n_regions):
    """A quarter balanced hot, a quarter cold, the rest unbalanced hot."""
    q = max(1, n_regions // 4)
    return ["balanced"] * q + ["unbalanced"] * (n_regions - 2 * q) + ["cold"] * q


def _window_trace(cfg: ExperimentConfig, windows, **over):
    W = cfg.scan["window_ticks"]
    events = max(cfg.trace["events"], windows * W)
    return generate_trace(cfg.trace_spec(events=events, **over))


# experiments ---------------------------------------------------------------

def exp_fig2_ccdf(cfg: ExperimentConfig, out: Path):
    total = cfg.machine["total_bytes"]
    n = total // BASE_PAGE
    scan = cfg.scan_config()
    trace = _window_trace(cfg, 1)
    window = trace.window(0, scan.window_ticks)
    rows = []
    for s in cfg.strategies:
        mode = ScanMode(s)
        layout = "huge" if mode is ScanMode.HUGE_SCAN else "base"
        m = Machine(build_address_space(total, layout))
        res = baseline_monitor(m, window, cfg.scan_config(mode.value))
        per_frame = res.histogram.per_frame(n)
        for x, y in ccdf(per_frame, max_frequency=scan.intervals):
            rows.append({"scan": s, "x": x, "y": y})
    return [write_csv(out / "ccdf.csv", rows, ["scan", "x", "y"])]


def _tier(cfg, fast=None):
    total = cfg.machine["total_bytes"]
    slow = cfg.tier["slow_capacity"]
    return TierSpec(cfg.tier["fast_capacity"] if fast is None else fast,
                    total if slow is None else slow)


def _plan_rows(reports, **keys):
    for k, rep in enumerate(reports):
        if rep.plan is None:
            continue
        for row in rep.plan.rows():
            yield {**keys, "epoch": k, **row}


PLAN_FIELDS = ["strategy", "unbalanced_fraction", "fast_bytes", "policy", "epoch", "region",
               "action", "psr", "hp_before", "hp_after"]


def exp_micro_tmm(cfg: ExperimentConfig, out: Path):
    total = cfg.machine["total_bytes"]
    scan = cfg.scan_config()
    epochs = cfg.sweep["epochs"]
    cost = cfg.cost_model()
    rows, plans = [], []
    for u in cfg.sweep["unbalanced_fractions"]:
        trace = _window_trace(cfg, epochs + 1, unbalanced_fraction=u)
        for s in cfg.strategies:
            reports = run_tmm(trace, total, s, _tier(cfg), scan, cost, epochs,
                              psr_lower_bound=cfg.policy["psr_lower_bound"])
            for k, rep in enumerate(reports):
                rows.append({"unbalanced_fraction": u, "epoch": k, **rep.row()})
            plans.extend(_plan_rows(reports, strategy=s, unbalanced_fraction=u,
                                    fast_bytes=_tier(cfg).fast_capacity, policy="dynamic"))
    fields = ["unbalanced_fraction", "epoch", *EpochReport.CSV_FIELDS]
    return [write_csv(out / "tmm_epochs.csv", rows, fields),
            write_csv(out / "plan_log.csv", plans, PLAN_FIELDS)]


def exp_dynamic_vs_fixed(cfg: ExperimentConfig, out: Path):
    total = cfg.machine["total_bytes"]
    scan = cfg.scan_config()
    epochs = cfg.sweep["epochs"]
    cost = cfg.cost_model()
    trace = _window_trace(cfg, epochs + 1)
    rows, plans = [], []
    for fast in cfg.sweep["fast_capacities"]:
        policies = []
        for s in cfg.strategies:
            if s == "dynamic":
                policies.append(("dynamic", "dynamic"))
            else:
                policies.extend((f"fixed-{t}", t) for t in cfg.sweep["fixed_thresholds"])
        for label, pol in policies:
            reports = run_tmm(trace, total, "fhpm", _tier(cfg, fast), scan, cost, epochs,
                              policy=pol, psr_lower_bound=cfg.policy["psr_lower_bound"])
            for k, rep in enumerate(reports):
                rows.append({"policy": label, "epoch": k, **rep.row()})
            plans.extend(_plan_rows(reports, strategy="fhpm", fast_bytes=fast, policy=label))
    fields = ["policy", "epoch", *EpochReport.CSV_FIELDS]
    return [write_csv(out / "tmm_epochs.csv", rows, fields),
            write_csv(out / "plan_log.csv", plans, PLAN_FIELDS)]


def micro_share_inputs(cfg: ExperimentConfig):
    """Per-VM traces and content images for the sharing scenario."""
    total = cfg.machine["total_bytes"]
    n_regions = total // HUGE_PAGE
    n_frames = total // BASE_PAGE
    vm_count = cfg.content["vm_count"]
    W = cfg.scan["window_ticks"]
    events = max(cfg.trace["events"], 2 * W)
    roles = share_roles(n_regions)
    traces = []
    for vm in range(vm_count):
        order = stream_rng(cfg.seed, "hot_regions", vm).permutation(n_regions).tolist()
        traces.append(generate_role_trace([roles[i] for i in order], cfg.trace["target_psr"],
                                          events, seed=(cfg.seed << 10) | vm,
                                          read_fraction=cfg.trace["read_fraction"]))
    classes = None
    if cfg.content["align_roles"]:
        classes = [hot_frame_labels(t, n_frames) for t in traces]
    images = generate_contents(cfg.content_spec(n_frames), classes)
    return traces, images


def exp_micro_share(cfg: ExperimentConfig, out: Path):
    total = cfg.machine["total_bytes"]
    W = cfg.scan["window_ticks"]
    traces, images = micro_share_inputs(cfg)
    config = ShareConfig(f_use=cfg.policy["f_use"], scan=cfg.scan_config(),
                         psr_lower_bound=cfg.policy["psr_lower_bound"],
                         cost_model=cfg.cost_model())
    rows = []
    for s in cfg.strategies:
        run = build_share_run(images, total)
        stats = run_share_epoch(run, s, config, [t.window(0, W) for t in traces],
                                [t.window(W, 2 * W) for t in traces])
        rows.append(stats.row())
    fields = list(rows[0]) if rows else []
    return [write_csv(out / "share_stats.csv", rows, fields)]


def monitor_trial(cfg: ExperimentConfig, trial: int, mutations: int = 0):
    """One seeded random trace checked against brute force."""
    total = cfg.machine["total_bytes"]
    rng = stream_rng(cfg.seed, "sampling", trial)
    psr = float(rng.choice([0.0, 0.5, 0.8, 0.9, 0.95]))
    u = float(rng.choice([0.25, 0.5, 0.75, 1.0]))
    trace_seed = (cfg.seed << 16) | trial
    trace = generate_trace(cfg.trace_spec(seed=trace_seed, target_psr=psr, unbalanced_fraction=u))
    scan = cfg.scan_config()
    window = trace.window(0, scan.window_ticks)
    m = Machine(build_address_space(total, "huge"))
    muts = []
    if mutations:
        hot = sorted({int(g) >> 21 for g in window.gpas.tolist()})
        mrng = stream_rng(trace_seed, "mutations", mutations)
        regions = mrng.choice(hot, min(mutations, len(hot)), replace=False).tolist()
        lo, hi = int(window.ticks[0]), window.end_tick
        ticks = np.sort(mrng.integers(lo, hi, len(regions))).tolist()
        muts = list(zip(ticks, sorted(regions)))
    res = two_stage_monitor(m, window, scan, mutations=muts)
    touched = {}
    for g in window.gpas.tolist():
        touched.setdefault(g >> 21, set()).add((g >> 12) & (FRAMES_PER_HUGE - 1))
    exact = True
    for rep in res.reports:
        if not rep.valid:
            continue
        oracle = np.zeros(FRAMES_PER_HUGE, bool)
        oracle[list(touched.get(rep.region, ()))] = True
        exact &= bool(np.array_equal(rep.accessed, oracle))
    n = total // BASE_PAGE
    mh = Machine(build_address_space(total, "huge"))
    huge = baseline_monitor(mh, window, cfg.scan_config("huge_scan"))
    mb = Machine(build_address_space(total, "base"))
    base = baseline_monitor(mb, window, cfg.scan_config("base_scan"))
    thr = scan.hot_threshold
    hb = bucket_bytes(huge.histogram.per_frame(n), scan.intervals)
    bb = bucket_bytes(base.histogram.per_frame(n), scan.intervals)
    return {
        "trial": trial, "seed": trace_seed, "target_psr": psr, "unbalanced_fraction": u,
        "measured_psr": 1 - sum(map(len, touched.values())) / (FRAMES_PER_HUGE * len(touched)),
        "monitored_regions": len(res.reports), "mutations": len(muts),
        "conflicts": res.stats.conflicts,
        "invalid_reports": sum(1 for r in res.reports if not r.valid),
        "stage2_exact": exact,
        "huge_hot_bytes": huge.histogram.hot_bytes(thr),
        "base_hot_bytes": base.histogram.hot_bytes(thr),
        "huge_top_bucket_bytes": hb[-1], "base_top_bucket_bytes": bb[-1],
        "peak_companions": m.space.peak_companions,
    }


def exp_monitor_accuracy(cfg: ExperimentConfig, out: Path):
    rows = []
    for t in range(cfg.sweep["trials"]):
        for k in cfg.sweep["mutation_counts"]:
            rows.append(monitor_trial(cfg, t, k))
    return [write_csv(out / "monitor_accuracy.csv", rows, list(rows[0]))]


def vmexit_row(wss, mode):
    mode = SplitMode(mode)
    m = Machine(build_address_space(wss, "huge"), Tlb())
    regions = list(range(wss // HUGE_PAGE))
    for r in regions:
        split_huge_page(m, r, mode)
    e0 = m.stats.vm_exits
    replay(m, sequential_sweep(wss))
    split_exits = m.stats.vm_exits - e0
    written_split = m.remap.ept_entries_written
    for r in regions:
        collapse_huge_region(m, r, mode)
    e1 = m.stats.vm_exits
    replay(m, sequential_sweep(wss))
    collapse_exits = m.stats.vm_exits - e1
    return {"wss": wss, "mode": mode.value, "exits": split_exits,
            "collapse_exits": collapse_exits, "total_exits": split_exits + collapse_exits,
            "split_entries_written": written_split,
            "entries_written": m.remap.ept_entries_written,
            "splits": m.remap.splits, "collapses": m.remap.collapses,
            "copies_bytes": m.remap.copies_bytes}


def exp_vmexit_table(cfg: ExperimentConfig, out: Path):
    rows = [vmexit_row(w, mode) for w in cfg.sweep["wss_list"] for mode in cfg.strategies]
    return [write_csv(out / "vmexits.csv", rows, list(rows[0]))]


EXPERIMENTS = {
    "fig2-ccdf": exp_fig2_ccdf,
    "micro-tmm": exp_micro_tmm,
    "micro-share": exp_micro_share,
    "monitor-accuracy": exp_monitor_accuracy,
    "vmexit-table": exp_vmexit_table,
    "dynamic-vs-fixed": exp_dynamic_vs_fixed,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[Path]:
    out = Path(out_dir or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create output directory ({exc.strerror})") from None
    names = EXPERIMENTS[cfg.name](cfg, out)
    digests = {n: hashlib.sha256((out / n).read_bytes()).hexdigest() for n in names}
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "experiment": cfg.name,
        "seed": cfg.seed,
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"},
        "versions": {"hugepage_sim": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "reports": digests,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return [out / n for n in names] + [out / "run_manifest.json"]


__all__ = ["EXPERIMENTS", "run_experiment", "write_csv", "monitor_trial", "vmexit_row",
           "micro_share_inputs", "hot_frame_labels", "share_roles"]
