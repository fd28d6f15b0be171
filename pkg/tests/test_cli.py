import csv
import subprocess
import sys

import numpy as np
import pytest

from qstress.case_io import write_native_case
from qstress.cli import EXIT_CODES, RunConfig, UsageError, exit_code, main, parse_gamma_grid
from qstress.errors import (
    AssumptionViolated, Infeasible, InfeasibleBox, InternalError, MalformedCase, NotConverged,
    PlantDiverged,
)

from .conftest import two_bus

COMP = "3,12,17,28,29,30"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, *args):
    return main(list(args) + ["--out", str(tmp_path)])


def test_analyze_two_bus(tmp_path, capsys):
    assert run(tmp_path, "analyze", "--case", "builtin:case2", "--samples", "5") == 0
    printed = capsys.readouterr().out
    assert "collapse margin 0.5 " in printed
    summary = {r["quantity"]: r["value"] for r in read_rows(tmp_path / "model_summary.csv")}
    assert float(summary["collapse_margin"]) == pytest.approx(0.5, abs=1e-12)
    assert float(summary["nose_tip_scale"]) == pytest.approx(2.0, rel=1e-6)
    for name in ("qcrit.csv", "open_circuit.csv", "nose_curve.csv", "scalings.csv"):
        assert (tmp_path / name).exists()


def test_analyze_case30(tmp_path):
    assert run(tmp_path, "analyze", "--case", "builtin:case30", "--samples", "10") == 0
    summary = {r["quantity"]: r["value"] for r in read_rows(tmp_path / "model_summary.csv")}
    assert float(summary["collapse_margin"]) < 1.0
    assert summary["n_load"] == "24"
    rows = read_rows(tmp_path / "scalings.csv")
    assert len(rows) == 10
    # every certified sample converges
    assert all(r["rpfe_converged"] == "1" for r in rows if float(r["collapse_margin"]) < 1)


def test_optimize_case30(tmp_path):
    assert run(tmp_path, "optimize", "--case", "builtin:case30") == 0
    rows = read_rows(tmp_path / "optimize.csv")
    assert len(rows) == 24
    v_hat = np.array([float(r["v_hat"]) for r in rows])
    assert np.all(v_hat >= 0.95 - 1e-9) and np.all(v_hat <= 1.05 + 1e-9)


def test_place_gamma_zero(tmp_path):
    assert run(tmp_path, "place", "--case", "builtin:case30", "--gamma", "0") == 0
    rows = read_rows(tmp_path / "placement.csv")
    assert sum(int(r["selected"]) for r in rows) == 24
    assert any(r["sign"] == "-1" for r in rows)
    assert (tmp_path / "placement_voltages.csv").exists()


def test_sweep_small_grid(tmp_path):
    assert run(tmp_path, "sweep", "--case", "builtin:case30", "--gamma-grid",
               "0,1e-4,4e-4,1e-2") == 0
    rows = read_rows(tmp_path / "sweep.csv")
    counts = [int(r["n_devices"]) for r in rows]
    assert counts[0] == 24
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    profiles = read_rows(tmp_path / "sweep_profiles.csv")
    assert len(profiles) == 24 * sum(r["feasible"] == "1" for r in rows)


def test_simulate_writes_trace(tmp_path):
    assert run(tmp_path, "simulate", "--case", "builtin:case30", "--comp-buses", COMP,
               "--rounds", "40") == 0
    rows = read_rows(tmp_path / "trace.csv")
    assert len(rows) == 41 * 24
    summary = {r["quantity"]: r["value"] for r in read_rows(tmp_path / "simulate_summary.csv")}
    assert summary["rounds"] == "40" and summary["diverged"] == "0"


def test_simulate_zero_rounds(tmp_path):
    assert run(tmp_path, "simulate", "--case", "builtin:case2", "--rounds", "0") == 0
    rows = read_rows(tmp_path / "trace.csv")
    assert [r["t"] for r in rows] == ["0"]
    # default capacities (0.25) cannot reach the band on case2, so no reference exists
    assert rows[0]["err_norm"] == "nan"


def test_simulate_schedule_and_coupled(tmp_path):
    sched = tmp_path / "sched.csv"
    sched.write_text("t,bus_id,p_demand,q_demand\n5,2,0.0,0.6\n")
    assert run(tmp_path, "simulate", "--case", "builtin:case2", "--rounds", "10",
               "--schedule", str(sched), "--plant", "coupled", "--cap-frac", "1") == 0
    rows = read_rows(tmp_path / "trace.csv")
    assert float(rows[4]["q_load"]) == -0.5 and float(rows[5]["q_load"]) == -0.6
    assert all(r["v_coupled"] != "nan" for r in rows)


def test_cap_file(tmp_path):
    cap = tmp_path / "cap.csv"
    cap.write_text("bus_id,q_min,q_max\n2,0,0.4\n")
    assert run(tmp_path, "optimize", "--case", "builtin:case2", "--cap-file", str(cap)) == 0
    rows = read_rows(tmp_path / "optimize.csv")
    assert float(rows[0]["q_opt"]) == pytest.approx(0.4, abs=1e-8)


@pytest.mark.parametrize("command", [
    ["analyze", "--case", "builtin:case30", "--samples", "3"],
    ["place", "--case", "builtin:case30", "--gamma", "4e-4"],
    ["simulate", "--case", "builtin:case30", "--comp-buses", COMP, "--rounds", "30",
     "--engine", "agents", "--workers", "4"],
])
def test_outputs_deterministic(tmp_path, command):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(command + ["--out", str(a)]) == 0
    assert main(command + ["--out", str(b)]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_exit_missing_file(tmp_path):
    assert run(tmp_path, "analyze", "--case", str(tmp_path / "nope.m")) == 3


def test_exit_malformed_case(tmp_path):
    bad = tmp_path / "bad.m"
    bad.write_text("function mpc = bad\nmpc.baseMVA = 100;\n")
    assert run(tmp_path, "analyze", "--case", str(bad)) == 3


def test_exit_assumption_violated(tmp_path):
    path = tmp_path / "hurwitz.case"
    path.write_text(write_native_case(two_bus(shunt=4.0)))
    assert run(tmp_path, "analyze", "--case", str(path)) == 2


def test_exit_infeasible_prints_report(tmp_path, capsys):
    assert run(tmp_path, "optimize", "--case", "builtin:case30", "--alpha", "0.001") == 4
    assert capsys.readouterr().err.strip()


def test_exit_plant_diverged(tmp_path):
    sched = tmp_path / "sched.csv"
    sched.write_text("t,bus_id,p_demand,q_demand\n2,2,0.0,1.5\n")
    code = run(tmp_path, "simulate", "--case", "builtin:case2", "--rounds", "5", "--schedule",
               str(sched), "--plant", "coupled", "--cap-frac", "0")
    assert code == 5
    # the truncated trace is still written
    assert len(read_rows(tmp_path / "trace.csv")) == 2


@pytest.mark.parametrize("args", [
    ["bogus"],
    ["optimize"],
    ["optimize", "--case", "builtin:case2", "--alpha", "1.5"],
    ["optimize", "--case", "builtin:case2", "--cap-frac", "-1"],
    ["optimize", "--case", "builtin:case30", "--comp-buses", "1,x"],
    ["optimize", "--case", "builtin:case30", "--comp-buses", "1"],
    ["sweep", "--case", "builtin:case2", "--gamma-grid", "a:b"],
])
def test_exit_usage(tmp_path, args):
    assert run(tmp_path, *args) == 1


def test_exit_code_mapping_is_total():
    cases = {
        AssumptionViolated("x"): 2, MalformedCase("x"): 3, FileNotFoundError(): 3,
        Infeasible("x"): 4, InfeasibleBox("x"): 4, PlantDiverged("x"): 5,
        NotConverged("x"): 6, InternalError("x"): 6, OverflowError(): 6, ValueError(): 1,
    }
    for exc, code in cases.items():
        assert exit_code(exc) == code
    assert {c for _, c in EXIT_CODES} == {1, 2, 3, 4, 5, 6}


def test_parse_gamma_grid():
    np.testing.assert_allclose(parse_gamma_grid("1e-4:1e-2:3"), [1e-4, 1e-3, 1e-2])
    np.testing.assert_allclose(parse_gamma_grid("0,0.5"), [0.0, 0.5])
    assert parse_gamma_grid(None).size == 40
    with pytest.raises(UsageError):
        parse_gamma_grid("x")


def test_run_config_validation():
    with pytest.raises(UsageError):
        RunConfig(case="c", rounds=-1)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "qstress.cli", "analyze", "--case",
                          "builtin:case2", "--samples", "1", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "collapse margin" in res.stdout
