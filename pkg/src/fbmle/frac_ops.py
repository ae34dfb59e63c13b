"""Numerical fractional calculus on uniform grids.

Riemann-Liouville integrals and derivatives by product integration, the
inverse operator K_H^{-1} applied to running drift integrals (the Q process),
the weights that rebuild the Brownian innovation from an observed path, the
measure mu_H^t, and an FFT convolution engine.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.signal import fftconvolve
from scipy.special import beta, betainc, gamma, hyp2f1

from .fbm_engine import TimeGrid, fgn_autocovariance, volterra_constant

PLAN_CACHE_ENV = "FBMLE_PLAN_CACHE"


# --- constants ----------------------------------------------------------------

def kappa(H):
    """Constant of the inverse operator: K_H^{-1} h = kappa s^{H-1/2} d/ds I^{3/2-H}[u^{1/2-H} h']."""
    return 1.0 / (volterra_constant(H) * gamma(H + 0.5))


def q_constant(H):
    """Prefactor of the realized Q integrands.

    H < 1/2: Q_s = q s^{H-1/2} int_0^s (s-u)^{-1/2-H} u^{1/2-H} b du
    H > 1/2: q multiplies the three-term Marchaud bracket.
    """
    if H == 0.5:
        return 1.0
    if H < 0.5:
        return kappa(H) / gamma(0.5 - H)
    return kappa(H) / gamma(1.5 - H)


def split_constant(H):
    """int_0^1 (1 - x^{1/2-H}) (1 - x)^{-1/2-H} dx, finite for every H in (0, 1)."""
    if H == 0.5:
        return 0.0
    return 1.0 / (0.5 - H) - gamma(1.5 - H) * gamma(0.5 - H) / gamma(2 - 2 * H)


def mu_mass(H, t=1.0):
    if H >= 0.5:
        raise ValueError("mu_H^t is a measure only for H < 1/2")
    return t ** (0.5 - H) * beta(1.5 - H, 0.5 - H)


# --- fast convolution ------------------------------------------------------

def convolve_fast(kernel, signal, check=True, rng=None):
    """Causal convolution out[i] = sum_{k<=i} kernel[k] signal[i-k].

    `signal` may be a batch (rows are independent signals). One random output
    index is compared against the direct sum when `check` is set.
    """
    kernel = np.asarray(kernel, dtype=float)
    signal = np.asarray(signal, dtype=float)
    n = signal.shape[-1]
    if kernel.shape[-1] != n:
        raise ValueError(f"kernel length {kernel.shape[-1]} != signal length {n}")
    if n <= 64:
        out = np.stack([np.convolve(kernel, s)[:n] for s in np.atleast_2d(signal)])
        return out.reshape(signal.shape)
    sig2 = np.atleast_2d(signal)
    out = fftconvolve(sig2, kernel[None, :], axes=1)[:, :n]
    if check:
        i = (rng or np.random.default_rng(n)).integers(n)
        direct = sig2[:, i::-1] @ kernel[: i + 1]
        scale = max(1.0, np.abs(kernel).sum() * np.abs(sig2).max())
        if np.max(np.abs(direct - out[:, i])) > 1e-12 * scale:
            raise FloatingPointError("fft convolution disagrees with direct sum")
    return out.reshape(signal.shape)


# --- Riemann-Liouville ---------------------------------------------------------

def _pow_diff(k, p):
    """(k+1)^p - k^p, accurate for large k."""
    k = np.asarray(k, dtype=float)
    out = np.empty_like(k)
    z = k == 0
    out[z] = 1.0
    kk = k[~z]
    out[~z] = kk**p * np.expm1(p * np.log1p(1.0 / kk))
    return out


def rl_kernel(alpha, n, dt):
    """Toeplitz weights c[0..n] so that I^alpha f(t_i) = sum_k c[k] f[i-k] - a[i] f[0].

    Product integration of (t - u)^{alpha-1} against the piecewise-linear
    interpolant of f. Returns (c, a) where a is the correction for the f[0]
    term that the convolution over-counts.
    """
    k = np.arange(n + 1, dtype=float)
    m0 = dt**alpha * _pow_diff(k, alpha) / alpha
    m1 = dt ** (alpha + 1) * (_pow_diff(k, alpha + 1) / (alpha + 1) - k * _pow_diff(k, alpha) / alpha)
    a = (m0 - m1 / dt) / gamma(alpha)
    b = (m1 / dt) / gamma(alpha)
    c = a.copy()
    c[1:] += b[:-1]
    return c, a


def rl_integral(alpha, f, dt):
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    f = np.asarray(f, dtype=float)
    n = f.shape[-1] - 1
    if alpha == 1.0:
        out = np.zeros_like(f)
        out[..., 1:] = np.cumsum(0.5 * (f[..., 1:] + f[..., :-1]) * dt, axis=-1)
        return out
    c, a = rl_kernel(alpha, n, dt)
    out = convolve_fast(c, f) - a * f[..., :1]
    out[..., 0] = 0.0
    return out


def one_sided_derivative(g, dt):
    """Second-order differences: forward at node 0, centred at node 1, backward after."""
    g = np.asarray(g, dtype=float)
    d = np.empty_like(g)
    d[..., 0] = (-3 * g[..., 0] + 4 * g[..., 1] - g[..., 2]) / (2 * dt)
    d[..., 1] = (g[..., 2] - g[..., 0]) / (2 * dt)
    d[..., 2:] = (3 * g[..., 2:] - 4 * g[..., 1:-1] + g[..., :-2]) / (2 * dt)
    return d


def rl_derivative(alpha, f, dt):
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    f = np.asarray(f, dtype=float)
    if np.any(f[..., 0] != 0):
        raise ValueError("rl_derivative needs f[0] == 0")
    if f.shape[-1] < 3:
        raise ValueError("need at least 3 nodes")
    return one_sided_derivative(rl_integral(1 - alpha, f, dt), dt)


# --- plans and cache -------------------------------------------------------

@dataclass
class SingularQuadraturePlan:
    H: float
    grid: TimeGrid
    tag: str
    weights: np.ndarray
    extra: dict = field(default_factory=dict)


class PlanCache:
    """Directory of .npz plan files keyed by (H, n, dt, tag)."""

    def __init__(self, directory=None):
        directory = directory or os.environ.get(PLAN_CACHE_ENV)
        self.dir = Path(directory) if directory else None
        self._mem = {}

    @staticmethod
    def key(H, grid, tag):
        raw = f"{tag}|{H!r}|{grid.n}|{grid.dt!r}"
        return f"{tag}-{hashlib.sha1(raw.encode()).hexdigest()[:16]}"

    def get(self, H, grid, tag, build):
        k = self.key(H, grid, tag)
        if k in self._mem:
            return self._mem[k]
        plan = None
        if self.dir is not None:
            f = self.dir / f"{k}.npz"
            if f.exists():
                with np.load(f) as z:
                    extra = {name[2:]: z[name] for name in z.files if name.startswith("x_")}
                    plan = SingularQuadraturePlan(H, grid, tag, z["weights"], extra)
        if plan is None:
            plan = build()
            if self.dir is not None:
                self.dir.mkdir(parents=True, exist_ok=True)
                tmp = self.dir / f"{k}.tmp.npz"
                np.savez(tmp, weights=plan.weights, **{f"x_{a}": v for a, v in plan.extra.items()})
                os.replace(tmp, self.dir / f"{k}.npz")
        self._mem[k] = plan
        return plan

    def clear_memory(self):
        self._mem.clear()


default_cache = PlanCache()


def _cached(H, grid, tag, build, cache):
    return (cache or default_cache).get(H, grid, tag, build)


# --- nodal Q ---------------------------------------------------------------

def _beta_cum(p, q, x):
    """Unnormalised incomplete beta B(x; p, q) for p, q > 0."""
    return betainc(p, q, np.clip(x, 0.0, 1.0)) * beta(p, q)


def _q_super_rows(H, grid, rows):
    """Rows of the H > 1/2 nodal plan: three-term split with dense weights on b(X_j)."""
    n, dt = grid.n, grid.dt
    qc = q_constant(H)
    e = 1.5 - H
    lead = 1.0 + (H - 0.5) * split_constant(H)
    j = np.arange(n)
    P = np.zeros((len(rows), n + 1))
    for r, i in enumerate(rows):
        if i == 0:
            continue
        ti = i * dt
        x = np.arange(i + 1) * dt / ti
        w = np.diff(_beta_cum(e, e, x)) * ti ** (2 - 2 * H)  # int_cell u^{1/2-H}(t-u)^{1/2-H} du
        pref = qc * (H - 0.5) * ti ** (H - 0.5)
        P[r, i] += qc * lead * ti ** (0.5 - H)
        # last cell: exact slope (b_i - b_{i-1}) / dt
        P[r, i] += pref * w[-1] / dt
        P[r, i - 1] -= pref * w[-1] / dt
        if i > 1:
            jj = j[: i - 1]
            g = pref * w[:-1] / (ti - (jj + 0.5) * dt)
            P[r, i] += g.sum()
            P[r, jj] -= 0.5 * g
            P[r, jj + 1] -= 0.5 * g
    return P


def _build_q_plan(H, grid):
    n, dt = grid.n, grid.dt
    if H < 0.5:
        al = 0.5 - H
        c, a = rl_kernel(al, n, dt)
        # first cell: integrate u^{1/2-H} exactly against the linear interpolant of b
        t = grid.t[1:]
        x = dt / t
        w_all = t ** (1 - 2 * H) * _beta_cum(1.5 - H, al, x)
        w1 = t ** (2 - 2 * H) * _beta_cum(2.5 - H, al, x) / dt
        first = np.zeros((3, n + 1))
        first[0, 1:] = w_all - w1                       # weight on b_0
        first[1, 1:] = w1                               # weight on b_1
        first[2, 1:] = gamma(al) * a[:-1] * dt**al      # what the convolution gave b_1
        return SingularQuadraturePlan(H, grid, "q-nodal", c, {"first": first})
    P = _q_super_rows(H, grid, np.arange(n + 1))
    return SingularQuadraturePlan(H, grid, "q-nodal", P)


def q_weights(H, grid, cache=None):
    """Plan that maps samples b(X_0..X_n) to nodal Q_0..Q_n."""
    if H == 0.5:
        return SingularQuadraturePlan(H, grid, "q-nodal", np.eye(grid.n + 1))
    return _cached(H, grid, "q-nodal", lambda: _build_q_plan(H, grid), cache)


def apply_q_plan(plan, b):
    """Nodal Q from drift samples b (shape (..., n+1)).

    Q at t = 0 is reported as 0; for H > 1/2 and b(X_0) != 0 the true value
    diverges like t^{1/2-H}.
    """
    b = np.asarray(b, dtype=float)
    H, grid = plan.H, plan.grid
    if H == 0.5:
        return b.copy()
    if H < 0.5:
        t = grid.t
        f = np.zeros_like(b)
        f[..., 1:] = t[1:] ** (0.5 - H) * b[..., 1:]
        w0, w1, wlin = plan.extra["first"]
        out = gamma(0.5 - H) * convolve_fast(plan.weights, f)  # f[0] == 0
        out += np.multiply.outer(b[..., 0], w0) + np.multiply.outer(b[..., 1], w1 - wlin)
        out[..., 1:] *= q_constant(H) * t[1:] ** (H - 0.5)
        out[..., 0] = 0.0
        return out
    return b @ plan.weights.T


# --- innovation filters ----------------------------------------------------

def cell_weight_matrix(H, grid):
    """A[i, j] = (1 / (dt Gamma(3/2-H))) int_{cell j, u < t_i} (t_i - u)^{1/2-H} u^{1/2-H} du.

    Row i applied to increments dX gives Y(t_i) = I^{3/2-H}[u^{1/2-H} X'](t_i)
    for piecewise-linear X. Shape (n+1, n); row 0 is zero.
    """
    n, dt = grid.n, grid.dt
    e = 1.5 - H
    i = np.arange(1, n + 1)[:, None]
    x = np.arange(n + 1)[None, :] / i
    F = _beta_cum(e, e, x) * (i * dt) ** (2 - 2 * H)
    A = np.zeros((n + 1, n))
    A[1:] = np.diff(F, axis=1) / (dt * gamma(e))
    return A


def cell_weight_plan(H, grid, cache=None):
    return _cached(H, grid, "cell-A",
                   lambda: SingularQuadraturePlan(H, grid, "cell-A", cell_weight_matrix(H, grid)), cache)


def cell_mean_power(H, grid):
    """Cell weights m_i for int s^{H-1/2} dY_s; the first cell uses Y ~ s^{2-2H}."""
    t = grid.t
    m = (t[1:] ** (H + 0.5) - t[:-1] ** (H + 0.5)) / ((H + 0.5) * grid.dt)
    m[0] = (2 - 2 * H) / (1.5 - H) * grid.dt ** (H - 0.5)
    return m


def _build_quadrature_filter(H, grid, cache=None):
    A = cell_weight_plan(H, grid, cache).weights
    F = kappa(H) * cell_mean_power(H, grid)[:, None] * np.diff(A, axis=0)
    return SingularQuadraturePlan(H, grid, "filter-quadrature", np.tril(F))


def _build_innovation_filter(H, grid):
    n = grid.n
    cov = fgn_autocovariance(H, np.subtract.outer(np.arange(n), np.arange(n)))
    L = cholesky(cov, lower=True)
    F = solve_triangular(L, np.eye(n), lower=True) * grid.dt ** (0.5 - H)
    return SingularQuadraturePlan(H, grid, "filter-innovation", np.tril(F))


SCHEMES = ("innovation", "quadrature")


def innovation_filter(H, grid, scheme="innovation", cache=None):
    """Lower-triangular F with dZ = F dX.

    "quadrature": product integration of the continuous inverse-adjoint kernel.
    "innovation": exact discrete innovations of the fGn sequence, normalised so
    that each increment has variance dt; F F^T = dt * Cov(dB)^{-1}.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if H == 0.5:
        return SingularQuadraturePlan(H, grid, f"filter-{scheme}", np.eye(grid.n))
    if scheme == "innovation":
        return _cached(H, grid, "filter-innovation", lambda: _build_innovation_filter(H, grid), cache)
    return _cached(H, grid, "filter-quadrature", lambda: _build_quadrature_filter(H, grid, cache), cache)


def kstar_inverse_indicator(H, t, grid, scheme="quadrature", cache=None):
    """Weights w_j with Z_t = sum_{j < i} w_j (X_{j+1} - X_j), t = t_i.

    The weights are the row sums of the innovation filter up to node i, so the
    row at t equals the cell-integrated (K^{*,-1} 1_[0,t])(s).
    """
    i = int(round(t / grid.dt))
    if not 0 < i <= grid.n or abs(i * grid.dt - t) > 1e-9 * max(1.0, t):
        raise ValueError("t must be a positive grid node")
    F = innovation_filter(H, grid, scheme, cache).weights
    return F[:i, :i].sum(axis=0)


def kstar_inverse_density(H, t, s):
    """Continuous weight (K^{*,-1} 1_[0,t])(s) for H < 1/2 by direct quadrature.

    kappa/Gamma(1/2-H) s^{1/2-H} int_s^t r^{H-1/2} (r-s)^{-1/2-H} dr; used as an
    independent check on the discrete rows.
    """
    from scipy.integrate import quad

    if H >= 0.5:
        raise ValueError("direct form is for H < 1/2")
    val, _ = quad(lambda r: r ** (H - 0.5), s, t, weight="alg", wvar=(-0.5 - H, 0.0))
    return kappa(H) / gamma(0.5 - H) * s ** (0.5 - H) * val


# --- mu measure ------------------------------------------------------------

def mu_weights(H, t, n):
    """Exact cell masses of mu_H^t(dr) = (r/t)^{1/2-H} (t-r)^{-1/2-H} dr on n cells of [0, t]."""
    if H >= 0.5:
        raise ValueError("mu_H^t is a measure only for H < 1/2")
    x = np.linspace(0.0, 1.0, n + 1)
    return np.diff(_beta_cum(1.5 - H, 0.5 - H, x)) * t ** (0.5 - H)


def mu_nodes(H, t, m):
    """m-point Gauss-Jacobi rule for mu_H^t: nodes r_k and weights w_k."""
    from scipy.special import roots_jacobi

    if H >= 0.5:
        raise ValueError("mu_H^t is a measure only for H < 1/2")
    # weight (1-y)^a (1+y)^b on [-1, 1] with x = (1+y)/2
    x, w = roots_jacobi(m, -0.5 - H, 0.5 - H)
    r = 0.5 * (x + 1) * t
    w = w * 0.5 ** (1.0) * 0.5 ** (0.5 - H) * 0.5 ** (-0.5 - H) * t ** (0.5 - H)
    return r, w


# --- continuous inverse-adjoint weight -------------------------------------

def kstar_inverse_weight(H, t, u):
    """(K^{*,-1} 1_[0,t])(u) in closed form, any H, 0 < u < t.

    kappa/Gamma(3/2-H) (u(t-u)/t)^{1/2-H} 2F1(1, 1/2-H; 3/2-H; 1-u/t).
    """
    u = np.asarray(u, dtype=float)
    if H == 0.5:
        return np.ones_like(u)
    p = 0.5 - H
    x = u / t
    return kappa(H) / gamma(1.5 - H) * t**p * (x * (1 - x)) ** p * hyp2f1(1.0, p, 1.5 - H, 1 - x)


def kstar_inverse_rows(H, grid, rows, order=3):
    """Cell averages of the closed-form weight: Z_{t_i} = W[r] . dX for i = rows[r].

    Gauss-Legendre inside the row, adaptive quadrature on the two end cells of
    each row where the weight has power or log singularities.
    """
    from scipy.integrate import quad

    n, dt = grid.n, grid.dt
    rows = np.asarray(rows)
    W = np.zeros((len(rows), n))
    if H == 0.5:
        return (np.arange(n)[None, :] < rows[:, None]).astype(float)
    gx, gw = np.polynomial.legendre.leggauss(order)
    gx, gw = 0.5 * (gx + 1), 0.5 * gw
    for r, i in enumerate(rows):
        if i == 0:
            continue
        t = i * dt
        u = (np.arange(i)[:, None] + gx[None, :]) * dt
        W[r, :i] = kstar_inverse_weight(H, t, u) @ gw
        for j in {0, i - 1}:
            W[r, j] = quad(lambda v: kstar_inverse_weight(H, t, v), j * dt, (j + 1) * dt,
                           limit=200)[0] / dt
    return W
