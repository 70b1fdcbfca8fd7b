import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from csvelab.cli import main, read_paths_bin
from csvelab.scenarios import CONFIG_DIR

LINEAR = str(CONFIG_DIR / "example38_linear.yaml")
NONCONVEX = str(CONFIG_DIR / "nonconvex_demo.yaml")
SMALL = ["--set", "sim.M=200", "--set", "sim.N=16", "--set", "optimizer.eval_M=200"]


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def test_validate_kernel(tmp_path, capsys):
    code, out = run(tmp_path, "vk", "validate-kernel", "--config", LINEAR)
    rep = json.loads((out / "kernel_report.json").read_text())
    assert code == 0 and abs(rep["gamma_est"] - 0.8) < 0.05
    assert {b["p"] for b in rep["feasible_budgets"]} == {4.0, 8.0, 16.0, 32.0}
    assert rep["scenario"]["passed"]
    assert "artifacts" in json.loads((out / "manifest.json").read_text())


def test_simulate_noiseless_gives_x0(tmp_path):
    code, out = run(tmp_path, "sim", "simulate", "--config", LINEAR, *SMALL,
                    "--set", "coefficients.b0=[0.0]", "--set", "coefficients.b1=[0.0]",
                    "--set", "coefficients.sigma0=[0.0]", "--set", "coefficients.sigma1=[0.0]",
                    "--set", "sim.x0=0.7", "--dump", "binary")
    assert code == 0
    X = read_paths_bin(out / "paths.bin")
    assert X.shape == (200, 17, 1) and np.all(X == 0.7)


def test_simulate_csv_dump_matches_binary(tmp_path):
    _, a = run(tmp_path, "a", "simulate", "--config", LINEAR, *SMALL, "--dump", "binary")
    _, b = run(tmp_path, "b", "simulate", "--config", LINEAR, *SMALL, "--dump", "csv")
    Xb = read_paths_bin(a / "paths.bin")
    with open(b / "paths.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) > 1
    assert float(rows[-1][-1]) == Xb[-1, -1, 0]


def test_manifest_reproducible(tmp_path):
    _, a = run(tmp_path, "a", "simulate", "--config", LINEAR, *SMALL, "--control", "atom:1")
    _, b = run(tmp_path, "b", "simulate", "--config", LINEAR, *SMALL, "--control", "atom:1",
               "--threads", "1")
    for name in ("summary.json", "residual_curve.csv", "moments.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["artifacts"] == mb["artifacts"]


def test_estimate_regularity(tmp_path):
    code, out = run(tmp_path, "reg", "estimate-regularity", "--config", LINEAR, *SMALL)
    rep = json.loads((out / "regularity.json").read_text())
    assert code == 0 and rep["gamma_theory"] == pytest.approx(0.8)


def test_optimize_and_control_reuse(tmp_path):
    small = ["--set", "sim.M=100", "--set", "sim.N=2", "--set", "optimizer.eval_M=100",
             "--set", "optimizer.iterations=3"]
    code, out = run(tmp_path, "opt", "optimize", "--config", LINEAR, *small)
    res = json.loads((out / "result.json").read_text())
    assert code == 0 and res["J_strictified"] is not None
    for f in ("relaxed_control.csv", "strict_control.csv", "trace_relaxed.csv", "trace_strict.csv"):
        assert (out / f).exists()
    code, sim = run(tmp_path, "re", "simulate", "--config", LINEAR, *small,
                    "--control", str(out / "relaxed_control.csv"))
    assert code == 0
    code, _ = run(tmp_path, "re2", "simulate", "--config", LINEAR, *small,
                  "--control", str(out / "strict_control.csv"), "--sample-relaxed", "4")
    assert code == 0


def test_optimize_reports_failed_selection(tmp_path):
    code, out = run(tmp_path, "nc", "optimize", "--config", NONCONVEX,
                    "--set", "sim.M=300", "--set", "optimizer.eval_M=300", "--set", "optimizer.iterations=10")
    res = json.loads((out / "result.json").read_text())
    assert code == 0 and res["J_strictified"] is None and "error" in res["strictify"]
    assert res["J_relaxed"] < res["J_strict"]


def test_compare_nonconvex(tmp_path):
    code, out = run(tmp_path, "cmp", "compare", "--config", NONCONVEX,
                    "--set", "sim.M=1000", "--set", "optimizer.eval_M=2000")
    with open(out / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert code == 0 and len(rows) == 1
    r = rows[0]
    assert float(r["relaxed"]) < float(r["strict"]) - float(r["band_3se"])


def test_missing_key_exit_code(tmp_path, capsys):
    code, _ = run(tmp_path, "bad", "simulate", "--config", LINEAR, "--set", "sim=null")
    assert code == 2 and "sim" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    code, _ = run(tmp_path, "nf", "simulate", "--config", str(tmp_path / "nope.yaml"))
    assert code == 2


def test_console_script_selftest_subset(tmp_path):
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "csvelab.cli", "selftest", "--only", "1,11",
                               "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stdout + proc.stderr
        outs.append((out / "selftest.json").read_bytes())
    assert outs[0] == outs[1]
