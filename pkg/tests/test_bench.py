import math

import numpy as np
import pytest

from elpinn import bench, classical, ocp
from elpinn import scalar_algebra as sa


def _spec(tmp_path, **kw):
    kw.setdefault("out", str(tmp_path))
    return bench.RunSpec(**kw)


def test_validate_accepts_and_rejects(tmp_path):
    assert bench.validate(_spec(tmp_path, problem="ex1", method="aw-el-pinn")).name == "ex1"
    with pytest.raises(bench.SpecError, match="no stable L_J registered"):
        bench.validate(_spec(tmp_path, problem="ex3", method="aw-pinn"))
    with pytest.raises(bench.SpecError, match="single-player"):
        bench.validate(_spec(tmp_path, problem="ex2", method="shooting"))
    with pytest.raises(bench.SpecError, match="unknown method"):
        bench.validate(_spec(tmp_path, method="newton"))
    with pytest.raises(bench.SpecError):
        bench.validate(_spec(tmp_path, problem="ex9"))
    with pytest.raises(bench.SpecError, match="fixed-weight"):
        bench.validate(_spec(tmp_path, method="aw-el-pinn", weights={"L_x": 2.0}))
    with pytest.raises(bench.SpecError, match="unknown loss components"):
        bench.validate(_spec(tmp_path, method="el-pinn", weights={"L_q": 2.0}))


def test_ex5_shooting_is_accepted_with_warning(tmp_path, caplog):
    with caplog.at_level("WARNING"):
        bench.validate(_spec(tmp_path, problem="ex5", method="shooting"))
    assert "ex5" in caplog.text


def test_run_dir_layout(tmp_path):
    s = _spec(tmp_path, problem="ex4", method="el-pinn", seed=3)
    assert s.run_dir == tmp_path / "ex4" / "el-pinn" / "seed3"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    spec = bench.RunSpec(problem="ex1", method="aw-el-pinn", iterations=0, out=str(root))
    return spec, bench.run_experiment(spec)


def test_zero_iteration_run_writes_artifacts(smoke_run):
    spec, outcome = smoke_run
    d = spec.run_dir
    for name in ("trajectory.csv", "trace.csv", "weights.csv", "summary.csv", "run.cfg",
                 "nets/x.bin", "nets/u.bin", "nets/p.bin", "nets/s.csv"):
        assert (d / name).exists(), name
    summ = bench.load_summary(d)
    assert summ["status"] == "ok" and set(summ["variables"]) == {"x", "u"}
    assert math.isfinite(summ["average"][1])


def test_summary_matches_trajectory_csv(smoke_run):
    spec, outcome = smoke_run
    header, rows = bench.read_csv(spec.run_dir / "trajectory.csv")
    data = np.array(rows, dtype=float)
    col = {h: data[:, k] for k, h in enumerate(header)}
    assert len(col["t"]) == 1000 and col["t"][0] == 0.0 and col["t"][-1] == 1.0
    summ = bench.load_summary(spec.run_dir)
    maes, rles = [], []
    for v in ("x", "u"):
        err = np.abs(col[f"{v}_pred"] - col[f"{v}_ref"])
        assert np.array_equal(err, col[f"{v}_abs_err"])
        rle = np.linalg.norm(col[f"{v}_pred"] - col[f"{v}_ref"]) / np.linalg.norm(col[f"{v}_ref"])
        assert summ["variables"][v][0] == err.max()
        assert summ["variables"][v][1] == pytest.approx(rle, rel=1e-14)
        maes.append(err.max())
        rles.append(rle)
    assert summ["average"][0] == pytest.approx(np.mean(maes), rel=1e-15)
    assert summ["average"][1] == pytest.approx(np.mean(rles), rel=1e-14)


def test_csv_round_trip(smoke_run):
    spec, outcome = smoke_run
    header, rows = bench.read_csv(spec.run_dir / "trace.csv")
    rec = outcome.detail.trace.records[0]
    assert [float(x) for x in rows[0]] == [float(rec[c]) for c in header]
    header, rows = bench.read_csv(spec.run_dir / "trajectory.csv")
    assert np.array_equal(np.array(rows, dtype=float)[:, 1], outcome.evaluation.predicted.x[:, 0])
    weights = bench.read_csv(spec.run_dir / "weights.csv")[0]
    assert weights == ["iteration", "w_x", "w_x0", "w_p", "w_pf", "w_u"]
    cfg = bench.read_config(spec.run_dir / "run.cfg")
    assert cfg["problem"] == "ex1" and cfg["status"] == "ok"


def test_checkpoints_restore_predictions(smoke_run):
    from elpinn import mlp, train
    spec, outcome = smoke_run
    nets = {k: mlp.load_checkpoint(spec.run_dir / "nets" / f"{k}.bin") for k in "xup"}
    ev = train.evaluate(nets, ocp.get_problem("ex1"))
    assert ev.rle == outcome.evaluation.rle


def test_identical_specs_give_identical_summaries(tmp_path):
    a = _spec(tmp_path / "a", problem="ex1", method="el-pinn", iterations=30, trace_interval=10)
    b = _spec(tmp_path / "b", problem="ex1", method="el-pinn", iterations=30, trace_interval=10)
    bench.run_experiment(a)
    bench.run_experiment(b)
    assert (a.run_dir / "summary.csv").read_bytes() == (b.run_dir / "summary.csv").read_bytes()


def test_classical_run_and_compare(tmp_path):
    for m in ("gradient", "conjugate-gradient", "shooting"):
        out = bench.run_experiment(_spec(tmp_path, problem="ex1", method=m))
        assert out.status == "ok"
    for s in (0, 1):
        bench.run_experiment(_spec(tmp_path, problem="ex1", method="el-pinn", iterations=0, seed=s))
    table = bench.compare("ex1", ["gradient", "conjugate-gradient", "shooting", "el-pinn"],
                          [0, 1], tmp_path)
    methods = [r["method"] for r in table.rows]
    assert methods == ["gradient", "conjugate-gradient", "shooting", "el-pinn", "el-pinn",
                       "el-pinn"]
    assert table.rows[-1]["seed"] == "median"
    # averages recomputed from the per-variable detail block
    for r in table.rows:
        if r["seed"] == "median":
            continue
        d = [q for q in table.detail if q["method"] == r["method"] and q["seed"] == r["seed"]]
        assert r["mae"] == pytest.approx(np.mean([q["mae"] for q in d]), rel=1e-15)
        assert r["rle"] == pytest.approx(np.mean([q["rle"] for q in d]), rel=1e-15)
    table.write_csv(tmp_path / "results.csv")
    header, rows = bench.read_csv(tmp_path / "results.csv")
    assert header == ["method", "seed", "status", "mae", "rle"] and len(rows) == 6
    assert "shooting" in table.text()
    # pure function of the artifacts
    again = bench.compare("ex1", ["gradient", "conjugate-gradient", "shooting", "el-pinn"],
                          [0, 1], tmp_path)
    assert again.rows == table.rows


def test_compare_lists_missing_runs(tmp_path):
    with pytest.raises(FileNotFoundError) as info:
        bench.compare("ex4", ["el-pinn", "gradient"], [0, 2], tmp_path)
    msg = str(info.value)
    for name in ("ex4/el-pinn/seed0", "ex4/el-pinn/seed2", "ex4/gradient/seed0"):
        assert name in msg


def test_reference_cached_for_problems_without_closed_form(tmp_path):
    spec = _spec(tmp_path, problem="ex6", method="aw-el-pinn", iterations=0)
    bench.run_experiment(spec)
    cache = tmp_path / "ex6" / "reference.csv"
    assert cache.exists()
    ref = classical.load_reference(cache, ocp.get_problem("ex6"))
    assert ref.x.shape[1] == 2


def test_shooting_failure_status_is_reported(tmp_path):
    out = bench.run_experiment(_spec(tmp_path, problem="ex4", method="shooting"))
    summ = bench.load_summary(out.run_dir)
    assert summ["status"] == out.status


def test_gradient_check_ex1():
    import time
    start = time.perf_counter()
    rep = bench.gradient_check("ex1")
    assert time.perf_counter() - start < 10.0
    assert rep.passed and rep.worst_rel_err <= 1e-5, rep.text()
    assert rep.checks >= 30


def test_gradient_check_ex2():
    rep = bench.gradient_check("ex2")
    assert rep.passed, rep.text()


def test_gradient_check_flags_corrupted_tanh(monkeypatch):
    monkeypatch.setattr(sa, "_TANH_PARTIAL_SCALE", 1.01)
    rep = bench.gradient_check("ex1")
    assert not rep.passed
    assert "scalar:tanh" in {name for name, _ in rep.failures}
    assert "scalar:tanh" in rep.text()
