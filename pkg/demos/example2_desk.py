"""Coupled example with a closed-form solution, at d=10 (a few minutes on one core)."""
from deepfbsde import TimeGrid, TrainConfig, builtin_problem, train
from deepfbsde.networks import LrSchedule

d = 10
problem = builtin_problem("example2", d)
grid = TimeGrid(problem.horizon, 40)
cfg = TrainConfig(iterations=2000, lr=LrSchedule(1e-2, 1e-3, 100, 2000), y0_init=(0.0, 1.0), checkpoint_every=200)

policy, report = train(problem, grid, cfg)
for c in report.checkpoints:
    print(f"step {c.step:5d}  loss {c.val_loss:.3e}  Y0 {c.y0_estimate:.5f}  rel err {c.rel_error:.2e}")
print("exact Y0:", problem.y0_exact)
