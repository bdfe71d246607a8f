"""Deterministic simulator for fine-grained huge-page management under
two-dimensional (EPT) address translation.

Modules map onto the simulated subsystems:

- ``ept``      second-level page table, companion-page redirection
- ``tlb``      split 4 KiB / 2 MiB LRU TLB
- ``mmu``      access engine, A/D setting, host-side mutations, cost model
- ``remap``    split/collapse in Linux-lazy and VM-friendly modes
- ``monitor``  two-stage monitoring and the scan baselines
- ``policy``   hot page pressure and demotion/promotion planning
- ``workload`` seeded traces, VM contents, CCDF
- ``tmm``      tiered-memory case study
- ``share``    page-sharing case study
- ``harness``  experiment configs, registry, CLI
"""

__version__ = "0.1.0"

BASE_PAGE = 4096
HUGE_PAGE = 2 * 1024 * 1024
FRAMES_PER_HUGE = HUGE_PAGE // BASE_PAGE  # 512
MiB = 1024 * 1024
