"""Weak-coupling audit: the conditions hold for small horizons and fail as T grows."""
from deepfbsde import ProblemConstants, check_conditions

base = dict(k_b=0.1, k_f=-0.2, b_y=0.05, sigma_x=0.3, sigma_y=0.02, f_x=0.1, f_z=0.2, g_x=0.1)
for T in (0.1, 0.5, 1.0, 2.0, 4.0):
    r = check_conditions(ProblemConstants(T=T, **base))
    print(f"T={T:4.1f}  L0={r.L0:.3e}  c={r.c:.3e}  holds={r.holds}")
