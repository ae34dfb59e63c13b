"""Drift registry and path simulation for X_t = theta int_0^t b(X_s) ds + B^H_t."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fbm_engine import FbmPath

DIVERGENCE_LIMIT = 1e12


class DivergenceError(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"path diverged at step {step} (|X| = {value:.3g})")
        self.step = step


@dataclass(frozen=True)
class DriftSpec:
    family: str
    b: Callable
    db: Callable | None = None
    d2b: Callable | None = None
    lipschitz: float = 1.0
    growth: float = 1.0
    condition_class: tuple = ()
    params: dict = field(default_factory=dict)
    consistency: tuple = ()  # regimes where consistency of the MLE is covered

    def __call__(self, x):
        return self.b(x)

    def spot_check(self, pairs=1000, seed=0, scale=10.0):
        """Lipschitz and affine-growth checks on random points; returns the worst ratios."""
        rng = np.random.default_rng(seed)
        x, y = rng.normal(0, scale, (2, pairs))
        with np.errstate(divide="ignore", invalid="ignore"):
            lip = np.abs(self.b(x) - self.b(y)) / np.abs(x - y)
        grow = np.abs(self.b(x)) / (1 + np.abs(x))
        return {"lipschitz": float(np.nanmax(lip)), "growth": float(grow.max()),
                "ok": bool(np.nanmax(lip) <= self.lipschitz * (1 + 1e-9)
                           and grow.max() <= self.growth * (1 + 1e-9))}


def linear():
    return DriftSpec("linear", lambda x: np.asarray(x, dtype=float),
                     lambda x: np.ones_like(np.asarray(x, dtype=float)),
                     lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                     1.0, 1.0, ("C gamma=0", "C'"), {},
                     ("continuous H<1/2", "continuous H>1/2", "discrete"))


def lemma3(C=1.0, c=1.0, alpha=0.5):
    """b(x) = C + c x + min(|x|, 1)^alpha."""
    if not (c > 0 and 0 < alpha < 1):
        raise ValueError("need c > 0 and alpha in (0, 1)")

    def b(x):
        x = np.asarray(x, dtype=float)
        return C + c * x + np.minimum(np.abs(x), 1.0) ** alpha

    # (|x| ^ 1)^alpha is Hoelder, not Lipschitz, at 0
    return DriftSpec("lemma3", b, None, None, np.inf, abs(C) + c + 1.0, ("C gamma=0",),
                     {"C": C, "c": c, "alpha": alpha},
                     ("continuous H<1/2", "continuous H>1/2"))


def prop2():
    """b(x) = x + log(cosh x) / 2: b' in [1/2, 3/2], b'' = sech^2(x) / 2."""

    def b(x):
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        return x + 0.5 * (ax + np.log1p(np.exp(-2 * ax)) - np.log(2.0))

    def db(x):
        return 1 + 0.5 * np.tanh(x)

    def d2b(x):
        return 0.5 / np.cosh(np.clip(x, -350, 350)) ** 2

    return DriftSpec("prop2", b, db, d2b, 1.5, 1.5, ("C gamma=1-beta",),
                     {"b0": 0.5, "B1": 1.5},
                     ("continuous H<1/2", "continuous H>1/2", "discrete"))


def custom(func, lipschitz, growth, db=None, d2b=None):
    return DriftSpec("custom", func, db, d2b, float(lipschitz), float(growth), ("none",), {}, ())


_REGISTRY = {"linear": linear, "lemma3": lemma3, "prop2": prop2}


def get_drift(name, **params):
    try:
        return _REGISTRY[name.lower()](**params)
    except KeyError:
        raise ValueError(f"unknown drift {name!r}; known: {sorted(_REGISTRY)}") from None


def drift_registry_list():
    return [{"name": k, "condition_class": v().condition_class, "consistency": v().consistency,
             "params": v().params} for k, v in _REGISTRY.items()]


@dataclass
class SdePath:
    theta: float
    drift: DriftSpec
    fbm: FbmPath
    X: np.ndarray
    scheme: str = "euler"

    @property
    def grid(self):
        return self.fbm.grid

    @property
    def hurst(self):
        return self.fbm.hurst


def euler_array(theta, drift, B, dt):
    """Euler scheme on a batch of noise paths B (shape (reps, n+1) or (n+1,))."""
    B = np.asarray(B, dtype=float)
    dB = np.diff(B, axis=-1)
    X = np.zeros_like(B)
    if theta == 0:
        X[...] = B - B[..., :1]
        return X
    for i in range(dB.shape[-1]):
        X[..., i + 1] = X[..., i] + theta * drift.b(X[..., i]) * dt + dB[..., i]
        big = np.abs(X[..., i + 1])
        if not np.all(big <= DIVERGENCE_LIMIT):
            raise DivergenceError(i + 1, float(np.nanmax(np.where(np.isfinite(big), big, np.inf))))
    return X


def euler_solve(theta, drift, fbm):
    X = euler_array(theta, drift, fbm.values, fbm.grid.dt)
    return SdePath(theta, drift, fbm, X, "euler")


def fou_exact_array(theta, B, dt):
    """X_t = B_t + theta int_0^t e^{theta (t-u)} B_u du, trapezoid on the smooth integrand."""
    B = np.asarray(B, dtype=float)
    if theta == 0:
        return B.copy()
    n = B.shape[-1] - 1
    e = np.exp(theta * dt)
    J = np.zeros_like(B)  # J_i = int_0^{t_i} e^{theta(t_i-u)} B_u du
    for i in range(n):
        J[..., i + 1] = e * J[..., i] + 0.5 * dt * (e * B[..., i] + B[..., i + 1])
    return B + theta * J


def fou_exact(theta, fbm, drift=None):
    d = drift or linear()
    if d.family != "linear":
        raise ValueError("fou_exact needs the linear drift")
    return SdePath(theta, d, fbm, fou_exact_array(theta, fbm.values, fbm.grid.dt), "exact-fou")


def gronwall_check(path, stride=16):
    """Evaluate the a priori bounds on sup|X| and on increments against the drift's growth constant."""
    C, th = path.drift.growth, abs(path.theta)
    X, B, t = path.X, path.fbm.values, path.grid.t
    T = t[-1]
    lhs = float(np.abs(X).max())
    rhs = float((C * th * T + np.abs(B).max()) * np.exp(C * th * T))
    idx = np.arange(0, len(t), stride)
    supX = np.maximum.accumulate(np.abs(X))[idx]
    Xi, Bi, ti = X[idx], B[idx], t[idx]
    inc_l = np.abs(Xi[:, None] - Xi[None, :])
    inc_r = (C * th * (1 + np.maximum(supX[:, None], supX[None, :])) * np.abs(ti[:, None] - ti[None, :])
             + np.abs(Bi[:, None] - Bi[None, :]))
    inc_ok = bool(np.all(inc_l <= inc_r * (1 + 1e-12) + 1e-12))
    return {"lhs": lhs, "rhs": rhs, "sup_ok": lhs <= rhs * (1 + 1e-12),
            "increment_ok": inc_ok, "pass": lhs <= rhs * (1 + 1e-12) and inc_ok}
