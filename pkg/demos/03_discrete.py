"""Estimating from observations at integer times only.

theta_bar uses the true Q and Z at integer times (computed on a fine grid);
theta_check uses nothing but X_0, X_1, ..., X_n. The two approach each other
as n grows. Both are Riemann sums with unit spacing, so they settle near
the unit-lag value e^theta - 1 rather than theta itself.
"""

import numpy as np

from fbmle.discrete_est import DiscreteRecord, fine_integer_values, theta_bar_profile, theta_check_profile
from fbmle.fbm_engine import TimeGrid, sample_exact_array
from fbmle.sde_lab import euler_array, linear

H, theta, N, npu, reps = 0.3, -1.0, 200, 64, 40
grid = TimeGrid(N * npu, 1.0 / npu)
X = euler_array(theta, linear(), sample_exact_array(H, grid, 3, reps), grid.dt)
Q, Z = fine_integer_values(H, X, linear(), npu)
bar = theta_bar_profile(Q, Z)
check = theta_check_profile(DiscreteRecord.from_fine(X, H, linear(), npu))

print(f"H = {H}, theta = {theta}, e^theta - 1 = {np.expm1(theta):.3f}, {reps} paths")
for n in (25, 50, 100, 200):
    b, c = bar[:, n - 1], check[:, n - 1]
    print(f"  n = {n:>3}: median theta_bar = {np.median(b):+.3f}, "
          f"median |theta_check - theta_bar| = {np.median(np.abs(c - b)):.3f}")
