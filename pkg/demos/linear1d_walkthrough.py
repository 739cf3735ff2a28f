"""Train the solver on dX = dW, Y_T = X_T, where Y0 = 1 and Z = 1 exactly.

Prints the error certificate pair (h, loss) at each checkpoint next to the
actual squared error, then cross-checks with the regression oracle.
"""
import numpy as np

from deepfbsde import RegressionBasis, TimeGrid, TrainConfig, builtin_problem, lsmc_implicit_solve, oracle_cross_check, train
from deepfbsde.networks import LrSchedule

problem = builtin_problem("linear1d")
grid = TimeGrid(problem.horizon, 10)
cfg = TrainConfig(iterations=500, lr=LrSchedule(2e-2, 2e-3, 100, 500), y0_init=(0.0, 2.0), checkpoint_every=50)

policy, report = train(problem, grid, cfg)
print(f"{'step':>5} {'loss':>10} {'Y0':>8} {'err^2':>10} {'h+loss':>8}")
for c in report.checkpoints:
    print(f"{c.step:5d} {c.val_loss:10.3e} {c.y0_estimate:8.4f} {(c.y0_estimate - 1) ** 2:10.3e} {grid.h + c.val_loss:8.4f}")

sol = lsmc_implicit_solve(problem, grid, RegressionBasis(1, 1), 100_000, rng=np.random.default_rng(0))
cc = oracle_cross_check(problem, grid, policy, sol)
print(f"oracle Y0 = {sol.Y0:.4f} +- {sol.Y0_stderr:.4f}, deep Y0 = {policy.y0:.4f}, gap {cc.discrepancy:.2e}")
