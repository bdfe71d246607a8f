"""
Content-based page sharing
==========================

Two 8 MiB guests hold the same data in different frame order. Whole-region
sharing finds nothing; base-page merging finds everything but must split
every huge page. The fine-grained strategy splits cold and skewed regions
first and stops at the memory waterline, keeping hot balanced regions huge.
"""

from hugepage_sim.harness.config import default_config
from hugepage_sim.harness.experiments import micro_share_inputs
from hugepage_sim.share import ShareConfig, build_share_run, cow_write_break, run_share_epoch

cfg = default_config("micro-share")
traces, images = micro_share_inputs(cfg)
W = cfg.scan["window_ticks"]
config = ShareConfig(f_use=0.5, scan=cfg.scan_config())

for s in cfg.strategies:
    run = build_share_run(images, cfg.machine["total_bytes"])
    st = run_share_epoch(run, s, config, [t.window(0, W) for t in traces])
    print(f"{s:16s} saved {st.bytes_saved / 2**20:5.2f} MiB ({st.oracle_ratio:5.1%} of max)  "
          f"huge ratio {st.huge_ratio}")

# %%
# A write to a merged frame gets a private copy; the other sharer keeps
# reading the original bytes.
run = build_share_run(images, cfg.machine["total_bytes"], layout="base")
run_share_epoch(run, "linux_ksm")
gfn = next(g for g in range(4096) if run.host.is_shared(run.pte(0, g).frame))
before = run.bytes_saved()
cow_write_break(run, 0, gfn)
print("saving drops by", before - run.bytes_saved(), "bytes; breaks:", run.cow_breaks)
