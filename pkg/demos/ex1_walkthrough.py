"""ex1 end to end, from the optimality residuals to a short AW-EL run.

    python demos/ex1_walkthrough.py [iterations]

The default of 3000 iterations finishes in about a minute on one core;
30000 matches the full experiment.
"""

import sys

import numpy as np

from elpinn import classical, ocp, train

prob = ocp.get_problem("ex1")
print(f"{prob.name}: {prob.description}")

# The closed-form triple satisfies every optimality residual to rounding error.
grid = np.linspace(prob.t0, prob.tf, 1000)
print("analytic residuals:", {k: f"{v:.1e}" for k, v in ocp.analytic_residuals(prob, grid).items()})

# Classical solvers on the h = 1e-3 grid.
exact = ocp.analytic_eval(prob, grid)
for label, traj in [
    ("gradient", classical.gradient_method(prob).trajectories()),
    ("conjugate gradient", classical.conjugate_gradient_method(prob).trajectories()),
    ("shooting", classical.multiple_shooting(prob).trajectories),
]:
    ev = train.compare_trajectories(prob, traj.at(grid), exact)
    print(f"{label:>20}: avg MAE {ev.avg_mae:.3e}  avg RLE {ev.avg_rle:.3e}")

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
cfg = train.TrainConfig.for_problem(prob, "aw-el", iterations=iters, trace_interval=500)
res = train.train(prob, cfg)
print(f"\nAW-EL, {iters} iterations: avg MAE {res.evaluation.avg_mae:.3e}  "
      f"avg RLE {res.evaluation.avg_rle:.3e}")

# The adaptive weights exp(-s_k) settle near 1 / L_k.
print("\niteration  " + "  ".join(f"{train.weight_column(c):>9}" for c in res.trace.component_names))
for rec in res.trace.records[:: max(1, len(res.trace.records) // 6)]:
    w = [rec[train.weight_column(c)] for c in res.trace.component_names]
    print(f"{rec['iteration']:>9}  " + "  ".join(f"{v:9.3e}" for v in w))
