"""Drift estimation for SDEs driven by fractional Brownian motion.

Modules: fbm_engine (fBm sampling), frac_ops (fractional operators and
quadrature plans), sde_lab (drifts and path simulation), estimators
(continuous-record MLE), discrete_est (integer-time estimators),
mc_harness (Monte Carlo experiments), verify (acceptance checks).
"""

from .fbm_engine import FbmPath, TimeGrid, covariance, sample_exact, sample_volterra, volterra_kernel
from .sde_lab import DriftSpec, euler_solve, fou_exact, get_drift
from .estimators import EstimateResult, compute_Q, kb_objects, mle_kb, mle_w_form, mle_z_form
from .discrete_est import theta_bar, theta_check

__version__ = "0.1.0"

__all__ = ["FbmPath", "TimeGrid", "covariance", "sample_exact", "sample_volterra", "volterra_kernel",
           "DriftSpec", "euler_solve", "fou_exact", "get_drift", "EstimateResult", "compute_Q",
           "kb_objects", "mle_kb", "mle_w_form", "mle_z_form", "theta_bar", "theta_check"]
