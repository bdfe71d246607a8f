"""hugepage-sim command line.

    hugepage-sim run CONFIG [--seed N] [--out DIR]
    hugepage-sim list-experiments
    hugepage-sim gen-trace SPEC OUT
    hugepage-sim validate CONFIG
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..workload import TraceSpec, generate_trace, write_trace
from .config import EXPERIMENT_NAMES, ConfigError, load_config
from .experiments import run_experiment

_TRACE_KEYS = set(TraceSpec.__dataclass_fields__)


def _parser():
    p = argparse.ArgumentParser(prog="hugepage-sim",
                                description="Fine-grained huge-page management simulator")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    run = sub.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help="override the output directory")
    sub.add_parser("list-experiments", help="print the registered experiment names")
    gen = sub.add_parser("gen-trace", help="write a binary trace from a JSON trace spec")
    gen.add_argument("spec")
    gen.add_argument("out")
    gen.add_argument("--seed", type=int, help="override the spec seed")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    return p


def _load_trace_spec(path, seed):
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{p}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    for k in data:
        if k not in _TRACE_KEYS:
            raise ConfigError(f"{k}: unknown key")
    if seed is not None:
        data["seed"] = seed
    try:
        return TraceSpec(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{p}: {exc}") from None


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "list-experiments":
            for name in EXPERIMENT_NAMES:
                print(name)
        elif args.command == "validate":
            load_config(args.config)
            print("ok")
        elif args.command == "run":
            cfg = load_config(args.config).with_overrides(args.seed, args.out)
            for path in run_experiment(cfg):
                print(path)
        elif args.command == "gen-trace":
            spec = _load_trace_spec(args.spec, args.seed)
            write_trace(generate_trace(spec), args.out)
            print(args.out)
    except (ConfigError, OSError) as exc:
        print(f"hugepage-sim: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
