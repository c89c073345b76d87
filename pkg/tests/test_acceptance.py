"""Acceptance criteria 1-13, each at its stated tolerance.

Training criteria use the full iteration counts and network sizes and
take most of the suite's runtime.  Best-of-3 criteria try seeds 0, 1, 2
in order and stop at the first seed that meets the gate.
"""

import math
import time

import numpy as np
import pytest

from elpinn import bench, classical, ocp, train
from elpinn._jax import jax, jnp
from elpinn import losses

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _run(root, **kw):
    spec = bench.RunSpec(out=str(root), **kw)
    out = bench.run_experiment(spec)
    return out


def _best_of(root, gate, **kw):
    """Run seeds until ``gate(outcome)`` holds; returns (passed, outcomes)."""
    outcomes = []
    for s in SEEDS:
        out = _run(root, seed=s, **kw)
        outcomes.append(out)
        if out.ok and gate(out.evaluation):
            return True, outcomes
    return False, outcomes


def _seed_log(outcomes, fmt):
    return "; ".join(f"seed{o.spec.seed} {fmt(o)}" for o in outcomes)


def _avg(o):
    ev = o.evaluation
    return f"RLE={ev.avg_rle:.3e} MAE={ev.avg_mae:.3e} [{o.status}, {o.seconds:.0f}s]"


def test_criterion_01_autodiff(acceptance):
    start = time.perf_counter()
    rep = bench.gradient_check("ex1", tol=1e-5)
    secs = time.perf_counter() - start
    acceptance(1, rep.passed and secs < 10.0,
               f"{rep.checks} FD checks, worst rel err {rep.worst_rel_err:.2e} "
               f"({rep.worst_case}), {secs:.1f}s (gate 1e-5, <10s)")


def test_criterion_02_analytic_residuals(acceptance):
    worst, secs = {}, 0.0
    for name in ("ex1", "ex2", "ex3", "ex4"):
        prob = ocp.get_problem(name)
        start = time.perf_counter()
        res = ocp.analytic_residuals(prob, np.linspace(prob.t0, prob.tf, 1000))
        secs = max(secs, time.perf_counter() - start)
        worst[name] = max(res.values())
    ok = max(worst.values()) <= 1e-9 and secs < 1.0
    acceptance(2, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items())
               + f", slowest {secs:.2f}s (gate 1e-9, <1s)")


def test_criterion_03_rk4_and_reference(acceptance):
    errs = []
    for h in (0.1, 0.05, 0.025):
        y = np.array([1.0])
        for k in range(int(round(1 / h))):
            y = classical.rk4_step(lambda t, y: y, k * h, y, h)
        errs.append(abs(y[0] - math.e))
    order = float(np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(errs), 1)[0])
    ex1 = ocp.get_problem("ex1")
    ref = classical.tpbvp_reference(ex1)
    exact = ocp.analytic_eval(ex1, ref.trajectories.t)
    sup = max(np.max(np.abs(ref.trajectories.x - exact.x)),
              np.max(np.abs(ref.trajectories.u - exact.u)))
    ok = 3.9 <= order <= 4.1 and ref.status == "converged" and sup <= 1e-7
    acceptance(3, ok, f"RK4 order {order:.3f} (gate [3.9, 4.1]); ex1 reference {ref.status}, "
                      f"sup err {sup:.1e} (gate 1e-7)")


def test_criterion_04_ex1_aw_el(root, acceptance):
    gate = lambda ev: ev.avg_rle <= 1e-2 and ev.avg_mae <= 2e-2  # noqa: E731
    ok, outs = _best_of(root, gate, problem="ex1", method="aw-el-pinn", iterations=30000)
    acceptance(4, ok, "ex1 AW-EL 30k: " + _seed_log(outs, _avg) + " (gate RLE 1e-2, MAE 2e-2)")


def test_criterion_05_ex1_classical(root, acceptance):
    sh = _run(root, problem="ex1", method="shooting")
    gr = _run(root, problem="ex1", method="gradient")
    ok = (sh.ok and gr.ok and sh.evaluation.avg_mae <= 5e-2 and gr.evaluation.avg_mae <= 1.2e-1)
    acceptance(5, ok, f"shooting MAE {sh.evaluation.avg_mae:.3e} (gate 5e-2); gradient MAE "
                      f"{gr.evaluation.avg_mae:.3e} (gate 1.2e-1)")


def test_criterion_06_ex2_aw_el(root, acceptance):
    gate = lambda ev: (ev.rle["x"] <= 1e-2 and ev.rle["u1"] <= 5e-2  # noqa: E731
                       and ev.rle["u2"] <= 5e-2)
    ok, outs = _best_of(root, gate, problem="ex2", method="aw-el-pinn", iterations=60000)
    fmt = lambda o: " ".join(f"{v}={o.evaluation.rle[v]:.2e}" for v in ("x", "u1", "u2"))  # noqa
    acceptance(6, ok, "ex2 AW-EL 60k RLE: " + _seed_log(outs, fmt)
               + " (gate x 1e-2, u 5e-2)")


def test_criterion_07_ex3(root, acceptance):
    gate = lambda ev: ev.avg_rle <= 1e-2 and ev.avg_mae <= 1e-2  # noqa: E731
    ok, outs = _best_of(root, gate, problem="ex3", method="aw-el-pinn", iterations=20000)
    aw = min(o.evaluation.avg_rle for o in outs)
    el = _run(root, problem="ex3", method="el-pinn", iterations=20000, weights={"L_pf": 1.0})
    ratio = el.evaluation.avg_rle / aw
    acceptance(7, ok and el.ok and ratio >= 5.0,
               "ex3 AW-EL 20k: " + _seed_log(outs, _avg)
               + f"; unit-weight EL RLE {el.evaluation.avg_rle:.3e}, ratio {ratio:.1f} "
                 "(gates RLE/MAE 1e-2, ratio >= 5)")


def test_criterion_08_ex4(root, acceptance):
    ok_el, el = _best_of(root, lambda ev: ev.avg_rle <= 5e-3,
                         problem="ex4", method="el-pinn", iterations=20000)
    ok_aw, aw = _best_of(root, lambda ev: ev.avg_rle <= 1e-2,
                         problem="ex4", method="aw-el-pinn", iterations=20000)
    acceptance(8, ok_el and ok_aw, "ex4 EL: " + _seed_log(el, _avg) + " (gate 5e-3); AW-EL: "
               + _seed_log(aw, _avg) + " (gate 1e-2)")


def test_criterion_09_ex5(root, acceptance):
    ex5 = ocp.get_problem("ex5")
    ref = classical.tpbvp_reference(ex5)
    cache = root / "ex5" / "reference.csv"
    cache.parent.mkdir(parents=True, exist_ok=True)
    classical.save_reference(cache, ex5, ref.trajectories)
    cg = _run(root, problem="ex5", method="conjugate-gradient")
    ok, outs = _best_of(root, lambda ev: ev.avg_rle <= 1e-2,
                        problem="ex5", method="aw-el-pinn", iterations=100000)
    good = (ref.status == "converged" and ref.terminal_defect <= 1e-8 and ok
            and cg.ok and cg.evaluation.avg_mae <= 5e-3)
    acceptance(9, good, f"reference defect {ref.terminal_defect:.1e} (gate 1e-8); CG MAE "
                        f"{cg.evaluation.avg_mae:.3e} (gate 5e-3); AW-EL 100k: "
               + _seed_log(outs, _avg) + " (gate RLE 1e-2)")


def test_criterion_10_ex6(root, acceptance):
    gate = lambda ev: ev.rle["x"] <= 2e-2 and ev.rle["v"] <= 2e-2  # noqa: E731
    ok, outs = _best_of(root, gate, problem="ex6", method="aw-el-pinn", iterations=30000)
    fmt = lambda o: " ".join(f"{v}={o.evaluation.rle[v]:.2e}" for v in ("x", "v", "u"))  # noqa
    acceptance(10, ok, "ex6 AW-EL 30k RLE: " + _seed_log(outs, fmt)
               + " (gate x, v 2e-2; u recorded only)")


def test_criterion_11_s_stationarity(acceptance):
    Ls = (0.5, 1.0, 2.0)
    names = ("a", "b", "c")
    grad = jax.jit(jax.grad(lambda s: losses.compose_adaptive(
        losses.LossBreakdown(names, tuple(jnp.asarray(Ls))), s)))

    def step(carry, _):
        s, m, v, k = carry
        k = k + 1
        d, m, v = train.adam_update(m, v, k, grad(s), 1e-3)
        return (s + d, m, v, k), None

    s0 = jnp.asarray(losses.AdaptiveState.initial(3, np.random.default_rng(0)).s)
    z = jnp.zeros(3)
    (s, *_), _ = jax.lax.scan(step, (s0, z, z, 0.0), None, length=20000)
    dev = float(np.max(np.abs(np.asarray(s) - np.log(Ls))))
    acceptance(11, dev <= 1e-3, f"max |s_k - ln L_k| after 20000 steps {dev:.2e} (gate 1e-3)")


def test_criterion_12_determinism(tmp_path, acceptance):
    blobs = []
    for k in range(2):
        spec = bench.RunSpec(problem="ex1", method="aw-el-pinn", iterations=500, seed=4,
                             out=str(tmp_path / f"r{k}"))
        bench.run_experiment(spec)
        blobs.append((spec.run_dir / "summary.csv").read_bytes())
    acceptance(12, blobs[0] == blobs[1], f"summary.csv of two identical runs: "
               f"{'bit-identical' if blobs[0] == blobs[1] else 'different'}")


def _instability(trace):
    """(detected, min earlier RLE, its iteration, max later RLE)."""
    rle = np.mean([trace.column("rle_x"), trace.column("rle_u")], axis=0)
    its = trace.column("iteration")
    k = int(np.argmin(rle))
    later = rle[k:].max()
    return later > 2 * rle[k], rle[k], int(its[k]), later


def test_criterion_13_aw_pinn_instability(root, acceptance):
    logs, found = [], False
    for s in SEEDS:
        out = _run(root, problem="ex1", method="aw-pinn", iterations=30000, seed=s)
        hit, lo, at, hi = _instability(out.detail.trace)
        logs.append(f"seed{s} min {lo:.2e}@{at} later max {hi:.2e} [{out.status}]")
        if hit:
            found = True
            break
    acceptance(13, found, "ex1 AW-PINN 30k: " + "; ".join(logs) + " (gate later > 2x min)")
