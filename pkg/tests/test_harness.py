import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hugepage_sim import MiB
from hugepage_sim.harness.cli import main
from hugepage_sim.harness.config import (EXPERIMENT_NAMES, ConfigError, default_config,
                                         load_config, parse_config)
from hugepage_sim.harness.experiments import EXPERIMENTS, run_experiment, vmexit_row
from hugepage_sim.workload import TraceSpec, generate_trace, read_trace


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data), encoding="utf-8")
    return p


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ----------------------------------------------------------------- config

def test_minimal_config_gets_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, {"name": "micro-tmm", "seed": 3}))
    assert cfg.seed == 3 and cfg.machine["total_bytes"] == 40 * MiB
    assert cfg.policy["f_use"] == 0.85 and cfg.tier["fast_capacity"] == 8 * MiB
    assert cfg.strategies == ["fhpm", "hmm_v_huge", "hmm_v_base"]


def test_f_use_out_of_range_names_path(tmp_path):
    with pytest.raises(ConfigError, match=r"policy\.f_use"):
        load_config(_write(tmp_path, {"name": "micro-tmm", "policy": {"f_use": 1.5}}))


def test_unknown_top_level_key(tmp_path):
    with pytest.raises(ConfigError, match="pollicy"):
        load_config(_write(tmp_path, {"name": "micro-tmm", "pollicy": {}}))


@pytest.mark.parametrize("data, path", [
    ({"name": "micro-tmm", "scan": {"window_tick": 5}}, "scan.window_tick"),
    ({"name": "micro-tmm", "trace": {"events": "many"}}, "trace.events"),
    ({"name": "nope"}, "name"),
    ({"seed": 1}, "name"),
    ({"name": "micro-tmm", "machine": {"total_bytes": 3 * MiB}}, "machine.total_bytes"),
    ({"name": "micro-tmm", "scan": {"window_ticks": 100, "interval_ticks": 30}},
     "scan.interval_ticks"),
    ({"name": "micro-tmm", "strategies": ["linux_ksm"]}, "strategies"),
    ({"name": "micro-tmm", "seed": -1}, "seed"),
])
def test_schema_errors_carry_key_path(data, path):
    with pytest.raises(ConfigError) as exc:
        parse_config(data)
    assert str(exc.value).startswith(path)


def test_bad_json_and_missing_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    with pytest.raises(ConfigError, match="nothere.json"):
        load_config(tmp_path / "nothere.json")


def test_registry_matches_names():
    assert set(EXPERIMENTS) == set(EXPERIMENT_NAMES) and len(EXPERIMENT_NAMES) == 6


# -------------------------------------------------------------------- CLI

def test_cli_list_experiments(capsys):
    assert main(["list-experiments"]) == 0
    assert capsys.readouterr().out.split() == list(EXPERIMENT_NAMES)


def test_cli_run_missing_file(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    assert main(["run", str(missing)]) != 0
    err = capsys.readouterr().err
    assert str(missing) in err and len(err.strip().splitlines()) == 1


def test_cli_validate_ok(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, {"name": "fig2-ccdf"}))]) == 0
    assert capsys.readouterr().out.strip() == "ok"


def test_cli_validate_bad(tmp_path, capsys):
    p = _write(tmp_path, {"name": "fig2-ccdf", "policy": {"f_use": 0}})
    assert main(["validate", str(p)]) == 1
    assert "policy.f_use" in capsys.readouterr().err


def test_cli_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["list-experiments", "--bogus"])
    assert exc.value.code == 2


def test_cli_run_overrides(tmp_path, capsys):
    p = _write(tmp_path, {"name": "vmexit-table", "seed": 1,
                          "sweep": {"wss_list": [2 * MiB]}})
    out = tmp_path / "o"
    assert main(["run", str(p), "--seed", "9", "--out", str(out)]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["schema_version"] == 1
    assert set(manifest["reports"]) == {"vmexits.csv"}


def test_cli_gen_trace(tmp_path):
    spec = _write(tmp_path, {"wss": 4 * MiB, "pattern": "uniform", "events": 500}, "t.json")
    out = tmp_path / "t.bin"
    assert main(["gen-trace", str(spec), str(out), "--seed", "4"]) == 0
    got = read_trace(out)
    want = generate_trace(TraceSpec(wss=4 * MiB, pattern="uniform", events=500, seed=4))
    assert np.array_equal(got.gpas, want.gpas) and np.array_equal(got.kinds, want.kinds)


def test_cli_gen_trace_unknown_key(tmp_path, capsys):
    spec = _write(tmp_path, {"wss": 4 * MiB, "patern": "uniform"}, "t.json")
    assert main(["gen-trace", str(spec), str(tmp_path / "x.bin")]) == 1
    assert "patern" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hugepage_sim.harness", "list-experiments"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.split() == list(EXPERIMENT_NAMES)


# ------------------------------------------------------------- experiments

def test_vmexit_lazy_8mib():
    row = vmexit_row(8 * MiB, "linux_lazy")
    assert row["exits"] == 2048
    assert row["collapse_exits"] == 4
    friendly = vmexit_row(8 * MiB, "vm_friendly")
    assert friendly["exits"] == 0 and friendly["collapse_exits"] == 0


def test_fig2_huge_dominates_base(tmp_path):
    cfg = default_config("fig2-ccdf", seed=5)
    run_experiment(cfg, tmp_path)
    rows = _rows(tmp_path / "ccdf.csv")
    curve = {}
    for r in rows:
        curve.setdefault(r["scan"], {})[float(r["x"])] = float(r["y"])
    huge, base = curve["huge_scan"], curve["base_scan"]
    assert set(huge) == set(base)
    assert all(huge[x] >= base[x] for x in huge)
    assert any(huge[x] > base[x] for x in huge)


@pytest.mark.parametrize("name", ["fig2-ccdf", "vmexit-table", "micro-share"])
def test_same_seed_same_bytes(tmp_path, name):
    cfg = default_config(name, seed=2)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.name == pb.name and pa.read_bytes() == pb.read_bytes()


def test_run_reports_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        run_experiment(default_config("vmexit-table"), blocker / "sub")
