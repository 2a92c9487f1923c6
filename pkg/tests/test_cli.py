import csv
import json
import subprocess
import sys

import pytest

from eqselect import cli, hjb
from eqselect.errors import NumericFailure


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, mode, cfg, *extra):
    out = tmp_path / f"out_{mode}"
    code = cli.main([mode, "--config", write(tmp_path, cfg), "--out", str(out), *extra])
    return code, out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_analyze(tmp_path):
    code, out = run(tmp_path, "analyze", {"system": {"builtin": "double_well_1", "params": {"c": 5}},
                                          "nus": [0.5, 1, 2]})
    assert code == 0
    rows = list(csv.DictReader(open(out / "equilibria.csv")))
    assert [r["classification"] for r in rows] == ["stable", "unstable", "stable"]
    regimes = json.loads((out / "regimes.json").read_text())["rows"]
    assert [r["predicted_S"] for r in regimes] == [[pytest.approx(-1.0)], [pytest.approx(0.0)],
                                                   [pytest.approx(0.0)]]
    m = manifest(out)
    assert m["mode"] == "analyze" and "timestamp" not in json.dumps(m)
    assert sorted(m["files"]) == ["energy_forms.json", "equilibria.csv", "regimes.csv", "regimes.json"]


def test_solve_polynomial_system(tmp_path):
    cfg = {"system": {"polynomial": {"drift": [0, -1], "penalty": [1, 2, 1], "box": [-6, 6]}},
           "epsilons": [0.1], "nus": [1]}
    code, out = run(tmp_path, "solve", cfg)
    assert code == 0
    head = json.loads((out / "solution_eps0.1_nu1.json").read_text())
    assert head["beta"] == pytest.approx(1 / 1.02 + (1.02 ** 0.5 - 1) / 2, rel=1e-4)


def test_simulate_with_trace(tmp_path):
    cfg = {"system": {"builtin": "linear_unstable"}, "epsilons": [0.2], "nus": [1],
           "sim": {"T": 5, "replicas": 2, "trace": True, "control": "hjb_feedback", "x0": 0}}
    code, out = run(tmp_path, "simulate", cfg, "--seed", "9")
    assert code == 0
    est = json.loads((out / "estimate_eps0.2_nu1.json").read_text())
    assert est["config"]["seed"] == 9 and est["control"] == "hjb_feedback"
    assert (out / "trace_eps0.2_nu1.bin").exists()
    assert manifest(out)["seed"] == 9


def test_riccati(tmp_path):
    code, out = run(tmp_path, "riccati", {"matrix": [[1, 2], [0, -3]], "kappa": 1e-3})
    assert code == 0
    r = json.loads((out / "riccati.json").read_text())
    assert r["unstable_trace"] == pytest.approx(1.0) and r["gain_effort"] == pytest.approx(1.0)


def test_sweep_outputs_and_determinism(tmp_path):
    cfg = {"system": {"builtin": "double_well_1"}, "epsilons": [0.4, 0.2, 0.1, 0.05], "nus": [1, 2]}
    c1, o1 = run(tmp_path, "sweep", cfg, "--deterministic")
    c2 = cli.main(["sweep", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o2"), "--deterministic",
                   "--jobs", "4"])
    assert c1 == 0 and c2 == 0
    files = manifest(o1)["files"]
    assert "slopes.csv" in files and "beta_vs_eps.svg" in files and "density_nu2.svg" in files
    for f in files + ["manifest.json"]:
        assert (o1 / f).read_bytes() == (tmp_path / "o2" / f).read_bytes(), f
    slopes = {(float(r["nu"]), r["quantity"]): float(r["slope"]) for r in csv.DictReader(open(o1 / "slopes.csv"))}
    assert slopes[(2.0, "dist2")] == pytest.approx(4.0, abs=0.3)
    assert slopes[(1.0, "dist2")] == pytest.approx(2.0, abs=0.3)


def test_svg_timestamp_only_when_not_deterministic(tmp_path):
    cfg = {"system": {"builtin": "linear_unstable"}, "epsilons": [0.2, 0.1], "nus": [1]}
    _, out = run(tmp_path, "sweep", cfg)
    assert "<metadata>" in (out / "beta_vs_eps.svg").read_text()


def test_sweep_records_row_failures(tmp_path):
    cfg = {"system": {"builtin": "double_well_1"}, "epsilons": [0.2, 0.1], "nus": [1],
           "grid": {"box": [-0.5, 0.5]}}
    code, out = run(tmp_path, "sweep", cfg)
    assert code == 0
    assert len(manifest(out)["warnings"]) == 2
    rows = list(csv.DictReader(open(out / "beta_curve_nu1.csv")))
    assert all("BoxTooSmall" in r["error"] for r in rows)


@pytest.mark.parametrize("cfg", [
    {"system": {"builtin": "double_well_1"}, "nus": [1], "bogus": 1},
    {"system": {"builtin": "nope"}},
    {"system": {"builtin": "double_well_1"}, "epsilons": [1.5], "nus": [1]},
    {"system": {"builtin": "double_well_1", "polynomial": {"drift": [1], "penalty": [1], "box": [0, 1]}}},
    {"mode": "solve", "system": {"builtin": "double_well_1"}},
])
def test_config_errors_exit_1(tmp_path, cfg):
    code, _ = run(tmp_path, "analyze", cfg)
    assert code == 1


def test_missing_fields_and_bad_json(tmp_path):
    assert run(tmp_path, "solve", {"system": {"builtin": "double_well_1"}})[0] == 1
    assert run(tmp_path, "riccati", {})[0] == 1
    assert run(tmp_path, "riccati", {"matrix": [[0.0]]})[0] == 1
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.main(["analyze", "--config", str(p)]) == 1
    assert cli.main(["analyze", "--config", str(tmp_path / "missing.json")]) == 1


def test_numeric_failure_exit_2(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericFailure("forced")

    monkeypatch.setattr(hjb, "solve_ergodic_hjb", boom)
    code, out = run(tmp_path, "solve", {"system": {"builtin": "linear_unstable"}, "epsilons": [0.1], "nus": [1]})
    assert code == 2
    assert manifest(out)["status"] == "numerical failure"


def test_schema_and_module_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "eqselect", "schema"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["additionalProperties"] is False
    r = subprocess.run([sys.executable, "-m", "eqselect", "riccati", "--config",
                        write(tmp_path, {"matrix": [[2.0]]}), "--out", str(tmp_path / "m")],
                       capture_output=True, text=True)
    assert r.returncode == 0


def test_analyze_dw2_five_rows(tmp_path):
    code, out = run(tmp_path, "analyze", {"system": {"builtin": "double_well_2"}})
    assert code == 0
    assert len(list(csv.DictReader(open(out / "equilibria.csv")))) == 5


def test_sweep_limits_dw1(tmp_path):
    cfg = {"system": {"builtin": "double_well_1", "params": {"c": 5}}, "epsilons": [0.2, 0.1, 0.05],
           "nus": [0.5, 1, 2]}
    code, out = run(tmp_path, "sweep", cfg)
    assert code == 0
    limits = {}
    for r in csv.DictReader(open(out / "slopes.csv")):
        limits[float(r["nu"])] = float(r["beta_limit"])
    assert limits == pytest.approx({0.5: 5.0, 1.0: 2.0, 2.0: 0.0}, abs=1e-9)
    for nu in ("0.5", "1", "2"):
        rows = list(csv.DictReader(open(out / f"beta_curve_nu{nu}.csv")))
        assert len(rows) == 3 and all(r["error"] == "" for r in rows)


def test_riccati_saddle_and_provenance(tmp_path):
    code, out = run(tmp_path, "riccati", {"matrix": [[1, 0], [0, -1]], "seed": 4})
    assert code == 0
    r = json.loads((out / "riccati.json").read_text())
    assert r["Q"] == [[pytest.approx(2.0), pytest.approx(0.0)], [pytest.approx(0.0), pytest.approx(0.0)]]
    assert r["seed"] == 4 and r["config_hash"] == manifest(out)["config_hash"]


def test_published_schema_in_sync():
    import pathlib
    doc = pathlib.Path(__file__).resolve().parents[1] / "docs" / "config_schema.json"
    assert json.loads(doc.read_text()) == cli.CONFIG_SCHEMA
