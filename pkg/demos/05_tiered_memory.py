"""
Tiered memory placement
=======================

A 40 MiB guest with an 8 MiB fast tier and 4 MiB of hot data. As the share
of unbalanced hot huge pages grows, huge-granularity migration wastes fast
memory on cold slices, and base-granularity migration pays for walks on
every access. The fine-grained strategy splits only the skewed regions.
"""

from hugepage_sim.harness.config import default_config
from hugepage_sim.harness.experiments import _tier, _window_trace
from hugepage_sim.tmm import run_tmm

cfg = default_config("micro-tmm")
total = cfg.machine["total_bytes"]
print(f"{'u':>5s} {'fhpm':>12s} {'hmm_v_huge':>12s} {'hmm_v_base':>12s}")
for u in cfg.sweep["unbalanced_fractions"]:
    trace = _window_trace(cfg, 2, unbalanced_fraction=u)
    costs = [run_tmm(trace, total, s, _tier(cfg), cfg.scan_config(), cfg.cost_model())[0].cost
             for s in cfg.strategies]
    print(f"{u:5.2f} " + " ".join(f"{c:12.0f}" for c in costs))
