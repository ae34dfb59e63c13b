"""The Q process, the innovation Z and the continuous-record drift MLE.

Three equivalent forms are provided: against the driving Brownian motion W
(simulation only), against the innovation Z rebuilt from the observed path,
and the fundamental-martingale form built from the kernel
k(t, s) = s^{1/2-H} (t - s)^{1/2-H} / c_H.

All stochastic integrals are left-point (Ito) sums over grid cells. The cell
integrand q_cell is the exact image of the left-constant drift under the same
lower-triangular filter that maps dX to dZ, so dZ = theta q_cell dt + noise
holds cell by cell on Euler paths.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma

from .fbm_engine import TimeGrid
from .frac_ops import (SingularQuadraturePlan, _cached, _q_super_rows, apply_q_plan,
                       cell_weight_plan, innovation_filter, q_weights)

INFO_EPS = 1e-12


class DegenerateInformation(ArithmeticError):
    pass


def _regime(H):
    return "half" if H == 0.5 else ("sub-half" if H < 0.5 else "super-half")


@dataclass
class QProcess:
    H: float
    grid: TimeGrid
    Q: np.ndarray          # nodal values, length n+1
    Z: np.ndarray          # innovation at nodes, length n+1
    q_cell: np.ndarray     # integrand of the Ito sums, length n
    scheme: str = "innovation"
    regime: str = ""

    def __post_init__(self):
        self.regime = self.regime or _regime(self.H)

    @property
    def dZ(self):
        return np.diff(self.Z, axis=-1)


@dataclass
class EstimateResult:
    theta_hat: float
    information: float
    numerator: float
    profile_t: np.ndarray
    profile_theta: np.ndarray
    profile_info: np.ndarray
    method: str
    H: float = 0.5
    grid: TimeGrid | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self):
        d = {"method": self.method, "H": self.H, "theta_hat": self.theta_hat,
             "information": self.information, "numerator": self.numerator, "seed": self.seed}
        if self.grid is not None:
            d.update(n=self.grid.n, dt=self.grid.dt, T=self.grid.T)
        d.update(self.meta)
        return json.dumps(d, indent=2, sort_keys=True)

    def profile_csv(self, fname):
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "theta_hat_t", "I_t"])
            for row in zip(self.profile_t, self.profile_theta, self.profile_info):
                w.writerow([repr(float(v)) for v in row])


# --- Q and Z -------------------------------------------------------------------

def filter_arrays(H, grid, X, drift, scheme="innovation", cache=None):
    """(dZ, q_cell) for a batch of paths X of shape (..., n+1)."""
    X = np.asarray(X, dtype=float)
    F = innovation_filter(H, grid, scheme, cache).weights
    dZ = np.diff(X, axis=-1) @ F.T
    q = drift.b(X[..., :-1]) @ F.T
    return dZ, q


def noise_innovation(H, grid, B, scheme="innovation", cache=None):
    """Filter applied to the noise increments; equals dZ - theta q_cell dt on Euler paths."""
    F = innovation_filter(H, grid, scheme, cache).weights
    return np.diff(np.asarray(B, dtype=float), axis=-1) @ F.T


def nodal_q(H, grid, X, drift, cache=None):
    return apply_q_plan(q_weights(H, grid, cache), drift.b(np.asarray(X, dtype=float)))


def nodal_q_rows(H, grid, X, drift, rows, cache=None):
    """Nodal Q at node indices `rows` only; avoids the dense plan for H > 1/2 on long grids."""
    rows = np.asarray(rows)
    b = drift.b(np.asarray(X, dtype=float))
    if H <= 0.5:
        return apply_q_plan(q_weights(H, grid, cache), b)[..., rows]
    return b @ _q_super_rows(H, grid, rows).T


def compute_Q(path, drift=None, scheme="innovation", cache=None):
    """Q process and innovation Z for one path.

    scheme "innovation" uses the exact discrete innovations of the fGn
    increments, "quadrature" the product-integrated inverse-adjoint kernel.
    """
    drift = drift or path.drift
    H, grid, X = path.hurst, path.grid, path.X
    dZ, q = filter_arrays(H, grid, X, drift, scheme, cache)
    Z = np.concatenate([[0.0], np.cumsum(dZ)])
    return QProcess(H, grid, nodal_q(H, grid, X, drift, cache), Z, q, scheme)


def implied_driver(q, theta):
    """dW = dZ - theta q dt, the driver that makes the W- and Z-forms agree exactly."""
    return q.dZ - theta * q.q_cell * q.grid.dt


# --- estimators ---------------------------------------------------------------

def _ratio(num, info, t, method, H, grid, seed=None, meta=None):
    num_c = np.cumsum(num)
    info_c = np.cumsum(info)
    T = t[-1]
    if not info_c[-1] >= INFO_EPS * T:
        raise DegenerateInformation(f"information {info_c[-1]:.3e} below {INFO_EPS} * t")
    with np.errstate(divide="ignore", invalid="ignore"):
        prof = np.where(info_c > 0, num_c / info_c, np.nan)
    return EstimateResult(float(num_c[-1] / info_c[-1]), float(info_c[-1]), float(num_c[-1]),
                          t, prof, info_c, method, H, grid, seed, meta or {})


def mle_z_form(q, seed=None):
    dt = q.grid.dt
    return _ratio(q.q_cell * q.dZ, q.q_cell**2 * dt, q.grid.t[1:], "z-form", q.H, q.grid, seed,
                  {"scheme": q.scheme})


def mle_w_form(q, dW, theta, seed=None):
    """theta + int q dW / int q^2 dt; `theta` is the true parameter of the simulated path."""
    dt = q.grid.dt
    dW = np.asarray(dW, dtype=float)
    res = _ratio(q.q_cell * dW, q.q_cell**2 * dt, q.grid.t[1:], "w-form", q.H, q.grid, seed,
                 {"scheme": q.scheme})
    res.theta_hat += theta
    res.profile_theta = res.profile_theta + theta
    res.numerator += theta * res.information
    return res


def loglikelihood(theta, q, dW=None, theta_true=0.0):
    """log dP_theta/dP_0 = theta int q dZ - theta^2/2 int q^2 dt, with dZ = dW + theta_true q dt."""
    dt = q.grid.dt
    info = float(np.sum(q.q_cell**2) * dt)
    if dW is None:
        num = float(np.sum(q.q_cell * q.dZ))
    else:
        num = float(np.sum(q.q_cell * np.asarray(dW))) + theta_true * info
    return theta * num - 0.5 * theta**2 * info


def estimate_arrays(dZ, q, dt):
    """Vectorised z-form: theta_hat per row."""
    return np.sum(q * dZ, axis=-1) / (np.sum(q * q, axis=-1) * dt)


# --- fundamental-martingale form ----------------------------------------------

def kb_constant(H):
    return 2 * H * gamma(1.5 - H) * gamma(H + 0.5)


def kb_lambda(H):
    return 2 * H * gamma(3 - 2 * H) * gamma(H + 0.5) / gamma(1.5 - H)


def kb_omega(H, t):
    return np.asarray(t, dtype=float) ** (2 - 2 * H) / kb_lambda(H)


def kb_kernel(H, t, s):
    return s ** (0.5 - H) * (t - s) ** (0.5 - H) / kb_constant(H)


@dataclass
class KbObjects:
    H: float
    grid: TimeGrid
    c_H: float
    lambda_H: float
    omega: np.ndarray
    Z_kb: np.ndarray
    A_kb: np.ndarray
    Q_kb_cell: np.ndarray
    Q_kb: np.ndarray
    k_weights: np.ndarray | None = None


def kb_weights(H, grid, cache=None):
    """k_bar[i, j] = (1/dt) int_{cell j} k(t_i, s) ds (fresh row for every t_i)."""
    return gamma(1.5 - H) / kb_constant(H) * cell_weight_plan(H, grid, cache).weights


def kb_arrays(H, grid, X, weights=None):
    """Z^KB, A^KB and the cell integrand (A_{i+1} - A_i)/(omega_{i+1} - omega_i) for a batch."""
    X = np.asarray(X, dtype=float)
    kw = kb_weights(H, grid) if weights is None else weights
    Zk = np.diff(X, axis=-1) @ kw.T
    Ak = (X[..., :-1] * grid.dt) @ kw.T  # X left-constant on cells
    om = kb_omega(H, grid.t)
    qk = np.diff(Ak, axis=-1) / np.diff(om)
    return Zk, Ak, qk, om


def kb_A_rows(H, grid, tau):
    """W with A(tau_i) = W[i] . X for piecewise-linear X, tau_i in (t_{i-1}, t_i], i = 1..n.

    A(tau) = int_0^tau k(tau, s) X_s ds, cell moments by incomplete beta functions.
    """
    from scipy.special import beta, betainc

    n, dt = grid.n, grid.dt
    p = 0.5 - H
    tau = np.asarray(tau, dtype=float)
    edges = np.arange(n + 1) * dt
    x = np.clip(np.minimum(edges[None, :], tau[:, None]) / tau[:, None], 0.0, 1.0)
    M0 = np.diff(betainc(p + 1, p + 1, x), axis=1) * beta(p + 1, p + 1) * tau[:, None] ** (2 * p + 1)
    M1 = np.diff(betainc(p + 2, p + 1, x), axis=1) * beta(p + 2, p + 1) * tau[:, None] ** (2 * p + 2)
    W = np.zeros((len(tau), n + 1))
    W[:, :-1] += (edges[None, 1:] * M0 - M1) / dt
    W[:, 1:] += (M1 - edges[None, :-1] * M0) / dt
    return W / kb_constant(H)


def _build_kb_nodal(H, grid, substeps, block=256):
    n = grid.n
    h = grid.dt / substeps
    t = grid.t[1:]
    domega = (2 - 2 * H) * t ** (1 - 2 * H) / kb_lambda(H)
    D = np.zeros((n + 1, n + 1))
    for a in range(0, n, block):
        tt = t[a:a + block]
        W0, W1, W2 = (kb_A_rows(H, grid, tt - k * h) for k in range(3))
        D[a + 1:a + 1 + len(tt)] = (3 * W0 - 4 * W1 + W2) / (2 * h) / domega[a:a + block, None]
    return SingularQuadraturePlan(H, grid, f"kb-nodal-{substeps}", D)


def kb_nodal_q(H, grid, X, substeps=64, cache=None):
    """Q^KB at nodes: (dA/dt)/(domega/dt), second-order backward stencil with step dt/substeps.

    A is evaluated exactly for the piecewise-linear path, so the stencil only
    sees the smooth part of A inside the last cell.
    """
    D = _cached(H, grid, f"kb-nodal-{substeps}", lambda: _build_kb_nodal(H, grid, substeps), cache)
    return np.asarray(X, dtype=float) @ D.weights.T


def kb_objects(path, keep_weights=False, nodal=True, cache=None):
    H, grid = path.hurst, path.grid
    kw = kb_weights(H, grid, cache)
    Zk, Ak, qk, om = kb_arrays(H, grid, path.X, kw)
    qn = kb_nodal_q(H, grid, path.X, cache=cache) if nodal else None
    return KbObjects(H, grid, kb_constant(H), kb_lambda(H), om, Zk, Ak, qk, qn,
                     kw if keep_weights else None)


def mle_kb(kb, seed=None):
    dZ = np.diff(kb.Z_kb)
    dom = np.diff(kb.omega)
    return _ratio(kb.Q_kb_cell * dZ, kb.Q_kb_cell**2 * dom, kb.grid.t[1:], "kb-form", kb.H,
                  kb.grid, seed)


def fit_kb_relation(Q, Q_kb, t, H, skip=1):
    """Least-squares C in Q_i = C t_i^{1/2-H} Q^KB_i; returns (C, relative L2 residual)."""
    r = t[skip:] ** (0.5 - H) * Q_kb[skip:]
    y = Q[skip:]
    C = float(np.dot(r, y) / np.dot(r, r))
    return C, float(np.linalg.norm(y - C * r) / np.linalg.norm(y))


# --- linear drift via the A(s, t) kernel -------------------------------------

A_KERNEL_CONSTANT = 0.5  # Z_v = v test: int_0^t A(t, v) dv must equal K_H^{-1}(int K_H 1)(t)


def q_linear_via_A(q):
    """Q_t = int_0^t A(t, v) dZ_v with A(t, v) = c[(t/v)^{1/2-H} + (v/t)^{1/2-H}], linear drift only.

    Cell averages of both power terms are exact, so the sum splits into two
    running sums and costs O(n).
    """
    H, grid = q.H, q.grid
    if H != 0.5 and q.scheme != "quadrature":
        raise ValueError("q_linear_via_A needs the continuous-kernel (quadrature) innovation Z")
    t = grid.t
    dZ = q.dZ
    p = 0.5 - H
    m1 = (t[1:] ** (1 - p) - t[:-1] ** (1 - p)) / ((1 - p) * grid.dt)   # mean of v^{-p}
    m2 = (t[1:] ** (1 + p) - t[:-1] ** (1 + p)) / ((1 + p) * grid.dt)   # mean of v^{p}
    # on the first cell dZ_v is proportional to v^{1/2-H} dv, not uniform
    m1[0] = (1 + p) * grid.dt ** (-p)
    m2[0] = (1 + p) / (1 + 2 * p) * grid.dt**p
    S1 = np.concatenate([np.zeros(dZ.shape[:-1] + (1,)), np.cumsum(m1 * dZ, axis=-1)], axis=-1)
    S2 = np.concatenate([np.zeros(dZ.shape[:-1] + (1,)), np.cumsum(m2 * dZ, axis=-1)], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = A_KERNEL_CONSTANT * (t**p * S1 + np.where(t > 0, t ** (-p), 0.0) * S2)
    out[..., 0] = 0.0
    return out
