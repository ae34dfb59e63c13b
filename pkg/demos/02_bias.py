"""Bias and MSE of the continuous-record estimator as the horizon grows.

For theta < 0, t * MSE settles near 2|theta| whatever H is, and a few
hundred replications already show it. The bias is about -2/t, but it is
small next to its own noise: with 300 paths the standard error of bias * t
is close to one at t = 100, so the fitted 1/t slope below is rough.
Thousands of replications per cell pin it down.
"""

from fbmle.config import ExperimentConfig
from fbmle.mc_harness import run_experiment

cfg = ExperimentConfig(experiment="bias_mse", H=(0.3, 0.7), theta=(-1.0,),
                       horizons=(25.0, 50.0, 100.0), reps=300, dt=0.1, seed=1)
rep = run_experiment(cfg)
print(f"{'H':>5} {'t':>6} {'bias*t':>14} {'t*MSE/|theta|':>14}")
for c in rep.cells:
    print(f"{c['H']:>5} {c['t']:>6g} {c['bias_t']:>8.2f} ± {c['se'] * c['t']:.2f} {c['mse_t']:>14.2f}")
for f in rep.fits:
    print(f"{f['group']}: |bias| ~ t^{f['bias_slope']:.2f} (± {f['bias_slope_se']:.2f})")
