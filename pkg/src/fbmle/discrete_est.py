"""Drift estimation from observations at integer times.

theta_bar uses the true Q and Z (computed on a fine grid) at integer times,
theta_check only the integer-time samples of X. Both are ratios
sum Q_m (Z_{m+1} - Z_m) / sum Q_m^2 over m = 0..n-1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .estimators import INFO_EPS, DegenerateInformation, nodal_q_rows
from .fbm_engine import TimeGrid
from .frac_ops import (_cached, SingularQuadraturePlan, apply_q_plan, convolve_fast,
                       innovation_filter, kstar_inverse_rows, q_constant, q_weights)
from .sde_lab import DriftSpec

NODES_PER_UNIT = 64
MIN_NODES_PER_UNIT = 32


@dataclass
class DiscreteRecord:
    H: float
    X: np.ndarray          # X_0..X_n, or a batch of shape (reps, n+1)
    drift: DriftSpec

    @property
    def n(self):
        return self.X.shape[-1] - 1

    @classmethod
    def from_fine(cls, X_fine, H, drift, nodes_per_unit):
        X_fine = np.asarray(X_fine, dtype=float)
        if (X_fine.shape[-1] - 1) % nodes_per_unit:
            raise ValueError("fine grid does not end on an integer time")
        return cls(H, X_fine[..., ::nodes_per_unit].copy(), drift)

    def truncate(self, n):
        return DiscreteRecord(self.H, self.X[..., : n + 1], self.drift)


def save_record_csv(record, fname):
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "X_m"])
        for m, x in enumerate(np.asarray(record.X, dtype=float)):
            w.writerow([m, repr(float(x))])


def load_record_csv(fname, H, drift):
    with open(fname, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or {"m", "X_m"} - set(rows[0]):
        raise ValueError(f"{fname}: need columns m, X_m")
    m = np.array([int(r["m"]) for r in rows])
    if not np.array_equal(m, np.arange(len(m))):
        raise ValueError(f"{fname}: m must run 0, 1, 2, ... without gaps")
    return DiscreteRecord(H, np.array([float(r["X_m"]) for r in rows]), drift)


# --- the ratio ----------------------------------------------------------------

def theta_bar_profile(Q, Z):
    """theta_bar_n for n = 1..N from Q, Z at integer times 0..N (batch over leading axes)."""
    Q = np.asarray(Q, dtype=float)
    Z = np.asarray(Z, dtype=float)
    num = np.cumsum(Q[..., :-1] * np.diff(Z, axis=-1), axis=-1)
    den = np.cumsum(Q[..., :-1] ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > INFO_EPS, num / den, np.nan)


def theta_bar(Q, Z):
    """sum_{m<n} Q_m (Z_{m+1} - Z_m) / sum_{m<n} Q_m^2, n = len(Q) - 1."""
    Q = np.asarray(Q, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Q.shape[-1] < 2 or Q.shape != Z.shape:
        raise ValueError("need matching Q, Z with n >= 1")
    den = np.sum(Q[..., :-1] ** 2, axis=-1)
    if np.any(den <= INFO_EPS):
        raise DegenerateInformation("sum of Q_m^2 vanishes")
    out = np.sum(Q[..., :-1] * np.diff(Z, axis=-1), axis=-1) / den
    return float(out) if np.ndim(out) == 0 else out


def fine_integer_values(H, X_fine, drift, nodes_per_unit, cache=None):
    """True Q_m and Z_m at m = 0..n from a fine path with `nodes_per_unit` steps per unit time.

    Q from the nodal singular quadrature, Z from cell averages of the closed-form
    inverse-adjoint weight; only the integer-time rows are formed.
    """
    X_fine = np.asarray(X_fine, dtype=float)
    N = X_fine.shape[-1] - 1
    if N % nodes_per_unit:
        raise ValueError("fine grid does not end on an integer time")
    grid = TimeGrid(N, 1.0 / nodes_per_unit)
    rows = np.arange(0, N + 1, nodes_per_unit)
    Q = nodal_q_rows(H, grid, X_fine, drift, rows, cache)
    W = _cached(H, grid, f"kstar-rows-{nodes_per_unit}",
                lambda: SingularQuadraturePlan(H, grid, "kstar-rows",
                                               kstar_inverse_rows(H, grid, rows)), cache).weights
    Z = np.diff(X_fine, axis=-1) @ W.T
    return Q, Z


# --- observable versions ------------------------------------------------------

def q_check(record, rule="printed", cache=None):
    """Q at integer times from integer-time observations only.

    rule "printed": for H < 1/2 the left-point sum
        q(H) m^{H-1/2} sum_{j<m} (m-j)^{-H-1/2} j^{1/2-H} b(X_j),
    whose j = 0 term vanishes; for H > 1/2 the three-term split on the unit grid.
    rule "product": the fine-grid nodal rule applied to the unit grid for all H
    (exact cell masses of the singular kernel against piecewise-linear b).
    """
    X = np.asarray(record.X, dtype=float)
    H, n = record.H, record.X.shape[-1] - 1
    b = record.drift.b(X)
    if H == 0.5:
        return b.copy()
    if rule == "printed" and H < 0.5:
        m = np.arange(n + 1, dtype=float)
        k = np.zeros(n + 1)
        k[1:] = m[1:] ** (-H - 0.5)
        f = m ** (0.5 - H) * b
        out = convolve_fast(k, f)
        out[..., 1:] *= q_constant(H) * m[1:] ** (H - 0.5)
        out[..., 0] = 0.0
        return out
    if rule not in ("printed", "product"):
        raise ValueError(f"unknown rule {rule!r}")
    return apply_q_plan(q_weights(H, TimeGrid(n, 1.0), cache), b)


def z_check(record, cache=None):
    """Z at integer times: unit-spacing cell weights of (K^{*,-1} 1_[0,m]) against dX."""
    X = np.asarray(record.X, dtype=float)
    n = X.shape[-1] - 1
    F = innovation_filter(record.H, TimeGrid(n, 1.0), "quadrature", cache).weights
    dZ = np.diff(X, axis=-1) @ F.T
    return np.concatenate([np.zeros(dZ.shape[:-1] + (1,)), np.cumsum(dZ, axis=-1)], axis=-1)


def theta_check(record, rule="printed", cache=None):
    return theta_bar(q_check(record, rule, cache), z_check(record, cache))


def theta_check_profile(record, rule="printed", cache=None):
    return theta_bar_profile(q_check(record, rule, cache), z_check(record, cache))


# --- brackets -----------------------------------------------------------------

@dataclass
class BracketDiagnostics:
    n: np.ndarray
    qv_B: np.ndarray
    qv_AB: np.ndarray
    ratio: np.ndarray
    alpha_hat: float
    growth_hat: float


def _loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def bracket_diagnostics(Q_fine, nodes_per_unit=NODES_PER_UNIT, window=None):
    """<B>_n = sum_{m<n} Q_m^2 and <A-B>_n = sum_{m<n} int_m^{m+1} |Q_s - Q_m|^2 ds.

    alpha_hat is minus the log-log slope of the ratio over the last decade of n
    (or over `window` = (n_lo, n_hi)); growth_hat the slope of <B>_n there.
    """
    if nodes_per_unit < MIN_NODES_PER_UNIT:
        raise ValueError(f"need at least {MIN_NODES_PER_UNIT} nodes per unit interval")
    Q_fine = np.asarray(Q_fine, dtype=float)
    N = (len(Q_fine) - 1) // nodes_per_unit
    Qc = Q_fine[: N * nodes_per_unit + 1]
    Qm = Qc[:-1:nodes_per_unit]
    blocks = Qc[: N * nodes_per_unit].reshape(N, nodes_per_unit)
    ends = np.concatenate([blocks[1:, :1], Qc[-1:, None]], axis=0)
    d2 = (np.concatenate([blocks, ends], axis=1) - Qm[:, None]) ** 2
    cell = np.trapezoid(d2, dx=1.0 / nodes_per_unit, axis=1)
    n = np.arange(1, N + 1)
    qv_B = np.cumsum(Qm**2)
    qv_AB = np.cumsum(cell)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = qv_AB / qv_B
    lo, hi = window or (max(1, N // 10), N)
    sel = (n >= lo) & (n <= hi) & (ratio > 0) & (qv_B > 0)
    alpha = -_loglog_slope(n[sel], ratio[sel]) if sel.sum() >= 2 else np.nan
    growth = _loglog_slope(n[sel], qv_B[sel]) if sel.sum() >= 2 else np.nan
    return BracketDiagnostics(n, qv_B, qv_AB, ratio, alpha, growth)


def save_brackets_csv(diag, fname):
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "qv_B", "qv_AB", "ratio"])
        for row in zip(diag.n, diag.qv_B, diag.qv_AB, diag.ratio):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


# --- classical baseline -------------------------------------------------------

def classical_discrete_mle(X, dt, drift, convention="model"):
    """Discretized Brownian-case MLE sum b(X_i) dX_i / sum b(X_i)^2 dt.

    convention "model" estimates theta in dX = theta b(X) dt + dB; "printed"
    carries the leading minus sign of the textbook form written for
    dX = -theta b(X) dt + dB.
    """
    X = np.asarray(X, dtype=float)
    b = drift.b(X[..., :-1])
    den = np.sum(b**2, axis=-1) * dt
    if np.any(den <= INFO_EPS):
        raise DegenerateInformation("sum of b(X_i)^2 vanishes")
    out = np.sum(b * np.diff(X, axis=-1), axis=-1) / den
    if convention == "printed":
        out = -out
    elif convention != "model":
        raise ValueError(f"unknown convention {convention!r}")
    return float(out) if np.ndim(out) == 0 else out
