"""Strict JSON experiment configs.

A config is a JSON object with ``name`` and optional ``seed``, ``out_dir``
and sections. Every key has a default (``DEFAULTS``), and each experiment may
override defaults (``EXPERIMENT_DEFAULTS``). Unknown keys, wrong types and
out-of-range values are rejected with the dotted key path in the message.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .. import MiB
from ..mmu import CostModel
from ..monitor import ScanConfig, ScanMode
from ..workload import PATTERNS, ContentSpec, TraceSpec

EXPERIMENT_NAMES = ("fig2-ccdf", "micro-tmm", "micro-share", "monitor-accuracy", "vmexit-table",
                    "dynamic-vs-fixed")


class ConfigError(ValueError):
    pass


def _num(lo=None, hi=None, lo_open=False):
    def check(v):
        if lo is not None and (v <= lo if lo_open else v < lo):
            return f"must be {'>' if lo_open else '>='} {lo}"
        if hi is not None and v > hi:
            return f"must be <= {hi}"
        return None
    return check


def _choice(*options):
    def check(v):
        return None if v in options else f"must be one of {', '.join(map(str, options))}"
    return check


_FRACTION = _num(0.0, 1.0)

# key -> (type, default, check). Types: int, float, str, bool, "int?", "list:int", ...
SCHEMA = {
    "machine": {
        "total_bytes": ("int", 32 * MiB, _num(0, lo_open=True)),
        "layout": ("str", "huge", _choice("huge", "base")),
    },
    "trace": {
        "pattern": ("str", "hotspot", _choice(*PATTERNS)),
        "read_fraction": ("float", 1.0, _FRACTION),
        "unbalanced_fraction": ("float", 0.5, _FRACTION),
        "target_psr": ("float", 0.9, _FRACTION),
        "events": ("int", 20_000, _num(0, lo_open=True)),
        "hot_fraction": ("float", 0.2, _FRACTION),
        "hot_op_fraction": ("float", 0.8, _FRACTION),
        "hot_bytes": ("int?", None, _num(0, lo_open=True)),
    },
    "content": {
        "vm_count": ("int", 2, _num(2)),
        "duplicate_fraction": ("float", 1.0, _FRACTION),
        "zero_fraction": ("float", 0.0, _FRACTION),
        "align_roles": ("bool", True, None),
    },
    "scan": {
        "window_ticks": ("int", 10_000, _num(0, lo_open=True)),
        "interval_ticks": ("int", 1_000, _num(0, lo_open=True)),
        "hot_threshold": ("int", 1, _num(1)),
        "sampling_fraction": ("float", 0.05, _FRACTION),
        "mode": ("str", "two_stage", _choice(*(m.value for m in ScanMode))),
    },
    "policy": {
        "f_use": ("float", 0.85, _num(0.0, 1.0, lo_open=True)),
        "psr_lower_bound": ("float", 0.5, _FRACTION),
    },
    "tier": {
        "fast_capacity": ("int", 8 * MiB, _num(0)),
        "slow_capacity": ("int?", None, _num(0)),
    },
    "cost": {
        "tlb_hit_cost": ("float", 1.0, _num(0)),
        "per_walk_ref_cost": ("float", 10.0, _num(0)),
        "vm_exit_cost": ("float", 1000.0, _num(0)),
        "fast_read_cost": ("float", 100.0, _num(0)),
        "fast_write_cost": ("float", 100.0, _num(0)),
        "slow_read_cost": ("float", 300.0, _num(0)),
        "slow_write_cost": ("float", 600.0, _num(0)),
        "migrate_byte_cost": ("float", 0.01, _num(0)),
    },
    "sweep": {
        "unbalanced_fractions": ("list:float", [0.0, 0.25, 0.5, 0.75, 1.0], _FRACTION),
        "wss_list": ("list:int", [2 * MiB, 4 * MiB, 8 * MiB, 16 * MiB], _num(0, lo_open=True)),
        "fast_capacities": ("list:int", [2 * MiB, 4 * MiB, 8 * MiB, 12 * MiB], _num(0)),
        "fixed_thresholds": ("list:int", [4, 16, 256], _num(0, 512)),
        "mutation_counts": ("list:int", [0, 4, 12], _num(0)),
        "trials": ("int", 20, _num(1)),
        "epochs": ("int", 1, _num(1)),
    },
    "strategies": ("list:str", [], None),
}

TOP_LEVEL = {"name", "seed", "out_dir", *SCHEMA}

STRATEGIES = {
    "micro-tmm": ("fhpm", "hmm_v_huge", "hmm_v_base"),
    "dynamic-vs-fixed": ("dynamic", "fixed"),
    "micro-share": ("linux_ksm", "huge_page_share", "ingens", "fhpm_share", "zero_scan"),
    "fig2-ccdf": ("huge_scan", "base_scan"),
    "monitor-accuracy": ("two_stage", "huge_scan", "base_scan"),
    "vmexit-table": ("linux_lazy", "vm_friendly"),
}

EXPERIMENT_DEFAULTS = {
    "fig2-ccdf": {
        "machine": {"total_bytes": 32 * MiB},
        "trace": {"pattern": "uniform", "unbalanced_fraction": 1.0, "events": 20_000},
        "strategies": ["huge_scan", "base_scan"],
    },
    "micro-tmm": {
        "machine": {"total_bytes": 40 * MiB},
        "trace": {"pattern": "hotspot", "read_fraction": 0.5, "hot_op_fraction": 1.0,
                  "hot_bytes": 4 * MiB, "events": 40_000},
        "scan": {"window_ticks": 20_000, "interval_ticks": 2_000},
        "tier": {"fast_capacity": 8 * MiB},
        "strategies": ["fhpm", "hmm_v_huge", "hmm_v_base"],
    },
    "dynamic-vs-fixed": {
        "machine": {"total_bytes": 16 * MiB},
        "trace": {"pattern": "uniform", "read_fraction": 0.5, "unbalanced_fraction": 1.0,
                  "target_psr": 1.0 - 10 / 512, "events": 40_000},
        "scan": {"window_ticks": 20_000, "interval_ticks": 2_000},
        "strategies": ["dynamic", "fixed"],
    },
    "micro-share": {
        "machine": {"total_bytes": 8 * MiB},
        "trace": {"events": 20_000},
        "policy": {"f_use": 0.5},
        "strategies": ["linux_ksm", "huge_page_share", "ingens", "fhpm_share", "zero_scan"],
    },
    "monitor-accuracy": {
        "machine": {"total_bytes": 32 * MiB},
        "trace": {"pattern": "uniform", "unbalanced_fraction": 1.0, "events": 10_000},
        "strategies": ["two_stage", "huge_scan", "base_scan"],
    },
    "vmexit-table": {
        "strategies": ["linux_lazy", "vm_friendly"],
    },
}


def _type_ok(kind, v):
    if kind == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == "int?":
        return v is None or _type_ok("int", v)
    if kind == "float":
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind == "str":
        return isinstance(v, str)
    if kind == "bool":
        return isinstance(v, bool)
    if kind.startswith("list:"):
        return isinstance(v, list) and all(_type_ok(kind[5:], x) for x in v)
    raise AssertionError(kind)


def _check_value(path, spec, v):
    kind, _, check = spec
    if not _type_ok(kind, v):
        raise ConfigError(f"{path}: expected {kind}, got {json.dumps(v)}")
    if check is None or v is None:
        return
    for item in (v if kind.startswith("list:") else [v]):
        msg = check(item)
        if msg:
            raise ConfigError(f"{path}: {json.dumps(item)} out of range ({msg})")


def _defaults(name):
    out = {sec: ({k: copy.deepcopy(s[1]) for k, s in spec.items()} if isinstance(spec, dict)
                 else copy.deepcopy(spec[1]))
           for sec, spec in SCHEMA.items()}
    for sec, over in EXPERIMENT_DEFAULTS.get(name, {}).items():
        if isinstance(over, dict):
            out[sec].update(copy.deepcopy(over))
        else:
            out[sec] = copy.deepcopy(over)
    return out


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: str
    sections: dict

    def __getattr__(self, item):
        sections = self.__dict__.get("sections", {})
        if item in sections:
            return sections[item]
        raise AttributeError(item)

    def to_dict(self):
        return {"name": self.name, "seed": self.seed, "out_dir": self.out_dir,
                **copy.deepcopy(self.sections)}

    def with_overrides(self, seed=None, out_dir=None):
        return ExperimentConfig(self.name, self.seed if seed is None else seed,
                                self.out_dir if out_dir is None else out_dir,
                                copy.deepcopy(self.sections))

    # builders
    def trace_spec(self, seed=None, **over) -> TraceSpec:
        t = dict(self.sections["trace"])
        t.update(over)
        wss = t.pop("wss", self.sections["machine"]["total_bytes"])
        return TraceSpec(wss=wss, seed=self.seed if seed is None else seed, **t)

    def content_spec(self, frames_per_vm, seed=None) -> ContentSpec:
        c = self.sections["content"]
        return ContentSpec(vm_count=c["vm_count"], frames_per_vm=frames_per_vm,
                           duplicate_fraction=c["duplicate_fraction"],
                           zero_fraction=c["zero_fraction"],
                           seed=self.seed if seed is None else seed)

    def scan_config(self, mode=None) -> ScanConfig:
        s = dict(self.sections["scan"])
        s["mode"] = ScanMode(mode or s["mode"])
        return ScanConfig(seed=self.seed, **s)

    def cost_model(self) -> CostModel:
        return CostModel(**self.sections["cost"])


def parse_config(data, source="<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    for key in data:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{key}: unknown key")
    name = data.get("name")
    if name is None:
        raise ConfigError("name: required")
    if name not in EXPERIMENT_NAMES:
        raise ConfigError(f"name: unknown experiment {name!r} "
                          f"(known: {', '.join(EXPERIMENT_NAMES)})")
    seed = data.get("seed", 0)
    if not _type_ok("int", seed) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative int, got {json.dumps(seed)}")
    out_dir = data.get("out_dir", f"out/{name}")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected str")
    sections = _defaults(name)
    for sec, spec in SCHEMA.items():
        if sec not in data:
            continue
        given = data[sec]
        if not isinstance(spec, dict):
            _check_value(sec, spec, given)
            sections[sec] = given
            continue
        if not isinstance(given, dict):
            raise ConfigError(f"{sec}: expected an object")
        for key, v in given.items():
            if key not in spec:
                raise ConfigError(f"{sec}.{key}: unknown key")
            _check_value(f"{sec}.{key}", spec[key], v)
            sections[sec][key] = v
    allowed = STRATEGIES[name]
    for s in sections["strategies"]:
        if s not in allowed:
            raise ConfigError(f"strategies: {s!r} not valid for {name} "
                              f"(choose from {', '.join(allowed)})")
    _check_cross(sections)
    return ExperimentConfig(name, seed, out_dir, sections)


def _check_cross(sections):
    m, s, t = sections["machine"], sections["scan"], sections["tier"]
    if m["total_bytes"] % (2 * MiB):
        raise ConfigError("machine.total_bytes: must be a multiple of 2 MiB")
    if s["window_ticks"] % s["interval_ticks"]:
        raise ConfigError("scan.interval_ticks: must divide scan.window_ticks")
    hb = sections["trace"]["hot_bytes"]
    if hb is not None and hb > m["total_bytes"]:
        raise ConfigError("trace.hot_bytes: exceeds machine.total_bytes")
    if t["fast_capacity"] % 4096:
        raise ConfigError("tier.fast_capacity: must be whole 4 KiB pages")
    for w in sections["sweep"]["wss_list"]:
        if w % (2 * MiB):
            raise ConfigError("sweep.wss_list: every entry must be a multiple of 2 MiB")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{p}: no such file") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: cannot read ({exc})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    return parse_config(data, str(p))


def default_config(name, seed=0) -> ExperimentConfig:
    return parse_config({"name": name, "seed": seed})
