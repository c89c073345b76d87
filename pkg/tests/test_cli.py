import subprocess
import sys

import pytest

from elpinn import bench, cli


def test_parse_example():
    spec = cli.parse_cli(["run", "--problem", "ex1", "--method", "aw-el-pinn",
                          "--iters", "30000", "--seed", "7"])
    assert (spec.problem, spec.method, spec.iterations, spec.seed) == ("ex1", "aw-el-pinn", 30000, 7)


def test_parse_rejects_ex3_penalty_baseline():
    with pytest.raises(bench.SpecError, match="no stable L_J registered"):
        cli.parse_cli(["run", "--problem", "ex3", "--method", "aw-pinn"])


def test_parse_accepts_ex5_shooting():
    assert cli.parse_cli(["run", "--problem", "ex5", "--method", "shooting"]).method == "shooting"


def test_parse_unknown_flag(capsys):
    with pytest.raises(bench.SpecError):
        cli.parse_cli(["run", "--problem", "ex1", "--method", "el-pinn", "--bogus", "1"])
    assert "usage" in capsys.readouterr().err


def test_parse_weights():
    spec = cli.parse_cli(["run", "--problem", "ex2", "--method", "el-pinn",
                          "--weights", "L_u1:11.1,L_u2:10.1"])
    assert spec.weights == {"L_u1": 11.1, "L_u2": 10.1}
    with pytest.raises(bench.SpecError):
        cli.parse_cli(["run", "--problem", "ex1", "--method", "el-pinn", "--weights", "L_x"])


def test_config_file_preload_and_override(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# ex4 baseline\nproblem = ex4\nmethod = el-pinn\niterations = 500\n"
                   "seed = 2\nweights = L_x:3\nresample = yes\n")
    spec = cli.parse_cli(["run", "--config", str(cfg), "--seed", "5"])
    assert (spec.problem, spec.method, spec.iterations, spec.seed) == ("ex4", "el-pinn", 500, 5)
    assert spec.weights == {"L_x": 3.0} and spec.resample is True
    bad = tmp_path / "bad.cfg"
    bad.write_text("problem = ex1\nmethod = el-pinn\nlearning = 3\n")
    with pytest.raises(bench.SpecError, match="unknown keys"):
        cli.parse_cli(["run", "--config", str(bad)])


def test_missing_problem_or_method():
    with pytest.raises(bench.SpecError):
        cli.parse_cli(["run", "--method", "el-pinn"])


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--problem", "ex3", "--method", "pinn"]) == 1
    assert "no stable L_J" in capsys.readouterr().err
    assert cli.main(["run", "--problem", "ex1", "--frobnicate"]) == 1
    assert cli.main(["reference", "--problem", "ex2"]) == 1
    assert cli.main(["run", "--problem", "ex1", "--method", "gradient",
                     "--out", str(tmp_path)]) == 0
    assert cli.main(["compare", "--problem", "ex1", "--methods", "gradient,shooting",
                     "--out", str(tmp_path)]) == 1
    assert "ex1/shooting/seed0" in capsys.readouterr().err


def test_run_and_compare_commands(tmp_path, capsys):
    out = str(tmp_path)
    assert cli.main(["compare", "--problem", "ex1", "--methods", "gradient,el-pinn",
                     "--seeds", "0", "--out", out, "--run-missing", "--iters", "0"]) == 0
    text = capsys.readouterr().out
    assert "gradient" in text and "el-pinn" in text
    for name in ("results.csv", "results_detail.csv", "results.txt"):
        assert (tmp_path / "ex1" / name).exists()


def test_numerical_failure_exit_code(tmp_path):
    # u = -p1/p2 is singular at the zero initial guess, so shooting diverges
    assert cli.main(["run", "--problem", "ex4", "--method", "shooting", "--out", str(tmp_path)]) == 2


def test_gradient_check_command(capsys):
    assert cli.main(["gradient-check", "--problem", "ex1"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_reference_command(tmp_path, capsys):
    path = tmp_path / "ref.csv"
    assert cli.main(["reference", "--problem", "ex6", "--out", str(path)]) == 0
    assert path.exists() and "converged" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "elpinn", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("run", "compare", "gradient-check", "reference"):
        assert sub in r.stdout
