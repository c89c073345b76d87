"""ex5 has no closed form: build the shooting reference, then score methods on it.

    python demos/ex5_reference.py [iterations]
"""

import sys

import numpy as np

from elpinn import classical, ocp, train

prob = ocp.get_problem("ex5")
ref = classical.tpbvp_reference(prob)
print(f"reference: {ref.status}, terminal defect {ref.terminal_defect:.2e}, "
      f"p(t0) = {np.round(ref.p0, 6)}")

grid = np.linspace(prob.t0, prob.tf, 1000)
dense = ref.trajectories.at(grid)

cg = classical.conjugate_gradient_method(prob)
ev = train.compare_trajectories(prob, cg.trajectories().at(grid), dense)
print(f"conjugate gradient: {cg.iterations} iterations, avg MAE {ev.avg_mae:.3e}")

shoot = classical.multiple_shooting(prob)
print(f"multiple shooting: {shoot.status}, residual {shoot.residual_norm:.2e}")

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
res = train.train(prob, train.TrainConfig.for_problem(prob, "aw-el", iterations=iters),
                  reference=dense)
print(f"AW-EL, {iters} iterations: " + ", ".join(
    f"RLE({v}) {res.evaluation.rle[v]:.2e}" for v in res.evaluation.variables))
