import json
import subprocess
import sys

import numpy as np
import pytest

from zoro_mpc.cli import LOG_COLUMNS, fmt, main, read_log_csv, write_log_csv
from zoro_mpc.config import build_scenario, parse_scenario
from zoro_mpc.simulator import run_closed_loop

SMALL = {
    "name": "small",
    "N": 8,
    "reference": {"kind": "line", "params": {"speed": 1.0, "duration": 3.0}},
    "obstacles": [{"cx": 1.0, "cy": 0.95, "radius": 0.4}],
    "steps": 12,
    "seed": 3,
}


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, -2.5e-300, 123456789.123456789):
        assert float(fmt(x)) == x


def test_log_csv_round_trip(tmp_path):
    log = run_closed_loop(build_scenario(parse_scenario(json.dumps(SMALL))), "zoro", rng_seed=0)
    write_log_csv(log, tmp_path / "log.csv")
    cols = read_log_csv(tmp_path / "log.csv")
    assert tuple(cols) == LOG_COLUMNS
    np.testing.assert_array_equal(cols["x"], log.states[:-1, 0])
    np.testing.assert_array_equal(cols["w_v"], log.noise[:, 3])
    np.testing.assert_array_equal(cols["clearance_min"], log.clearance_min)


def test_simulate_writes_outputs(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["simulate", str(scenario_file), "--out", str(out)]) == 0
    assert (out / "log_zoro_3.csv").exists()
    assert (out / "resolved_config.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["controller"] == "zoro" and len(summary["runs"]) == 1
    assert "min clearance" in capsys.readouterr().out


def test_rerun_from_echo_is_identical(scenario_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", str(scenario_file), "--out", str(a)]) == 0
    assert main(["simulate", str(a / "resolved_config.json"), "--out", str(b)]) == 0
    cols = [c for c in LOG_COLUMNS if c != "solve_ms"]
    la, lb = read_log_csv(a / "log_zoro_3.csv"), read_log_csv(b / "log_zoro_3.csv")
    for c in cols:
        np.testing.assert_array_equal(la[c], lb[c])


def test_seed_override_and_monte_carlo(scenario_file, tmp_path):
    out = tmp_path / "mc"
    assert main(["simulate", str(scenario_file), "--out", str(out), "--seed", "9", "--runs", "2",
                 "--workers", "1", "--controller", "nominal"]) == 0
    assert sorted(p.name for p in out.glob("log_*.csv")) == ["log_nominal_9-0.csv",
                                                            "log_nominal_9-1.csv"]
    assert json.loads((out / "resolved_config.json").read_text())["seed"] == 9


def test_compare_one_row_per_controller(scenario_file, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", str(scenario_file), "--out", str(out)]) == 0
    rows = json.loads((out / "summary.json").read_text())["controllers"]
    assert [r["controller"] for r in rows] == ["zoro", "nominal", "exact", "scalar-tube"]


def test_solve_reports_solution(scenario_file, tmp_path, capsys):
    assert main(["solve", str(scenario_file), "--out", str(tmp_path), "--t-index", "2"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["converged"] and len(result["u0"]) == 2


def test_verify_theorem1_bundled(tmp_path, capsys):
    code = main(["verify-theorem1", "theorem1", "--out", str(tmp_path)])
    text = capsys.readouterr().out
    assert "u0 deviation" in text and "disregarded gradient" in text
    assert code == 0
    assert json.loads((tmp_path / "summary.json").read_text())["passed"]


def test_bench_emits_digest(scenario_file, tmp_path, capsys):
    assert main(["bench", str(scenario_file), "--out", str(tmp_path), "--samples", "5"]) == 0
    text = capsys.readouterr().out
    for key in ("min", "q1", "median", "q3", "max", "speedup"):
        assert key in text
    assert set(json.loads((tmp_path / "summary.json").read_text())["solve_ms"]["zoro"]) == {
        "min", "q1", "median", "q3", "max"}


def test_estimate_noise_from_logs(tmp_path, capsys):
    path = tmp_path / "long.json"
    path.write_text(json.dumps(dict(SMALL, steps=40)))
    out = tmp_path / "sim"
    main(["simulate", str(path), "--out", str(out), "--runs", "3", "--workers", "1"])
    capsys.readouterr()
    logs = sorted(str(p) for p in out.glob("log_*.csv"))
    assert main(["estimate-noise", *logs, "--out", str(tmp_path / "est")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["samples"] == 3 * 39
    assert len(result["W_diag"]) == 5
    assert (tmp_path / "est" / "noise_estimate.json").exists()


def test_bad_config_exit_code(tmp_path, capsys):
    bad = dict(SMALL, obstacles=[{"cx": 0, "cy": 0, "radius": -1}])
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["simulate", str(path), "--out", str(tmp_path)]) == 2
    assert "obstacles[0].radius" in capsys.readouterr().err
    path.write_text('{\n"N": 3,\n oops}')
    assert main(["simulate", str(path), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["simulate", "no-such-scenario", "--out", str(tmp_path)]) == 2


def test_no_convergence_exit_code(tmp_path):
    cfg = dict(SMALL, controller={"max_outer_iterations": 1, "max_sqp_iterations": 1},
               initial_offset=[0.0, 0.2, 0.1, 0.0, 0.0])
    path = tmp_path / "hard.json"
    path.write_text(json.dumps(cfg))
    assert main(["solve", str(path), "--out", str(tmp_path)]) == 3


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "zoro_mpc.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
