"""Fractional Brownian motion: covariance, Volterra kernel and path samplers."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky
from scipy.special import gamma, hyp2f1


class EmbeddingError(RuntimeError):
    """Circulant embedding produced negative eigenvalues."""


def _check_hurst(H):
    if not 0.0 < H < 1.0:
        raise ValueError(f"Hurst index must lie in (0, 1), got {H}")


@dataclass(frozen=True)
class TimeGrid:
    n: int
    dt: float

    def __post_init__(self):
        if self.n < 1 or not self.dt > 0:
            raise ValueError("grid needs n >= 1 and dt > 0")

    @property
    def T(self):
        return self.n * self.dt

    @property
    def t(self):
        return np.arange(self.n + 1) * self.dt

    @classmethod
    def from_horizon(cls, T, n):
        return cls(int(n), float(T) / int(n))


@dataclass
class FbmPath:
    hurst: float
    grid: TimeGrid
    values: np.ndarray
    driver: np.ndarray | None = None
    seed: int | None = None
    scheme: str = "exact"
    meta: dict = field(default_factory=dict)

    @property
    def increments(self):
        return np.diff(self.values)


def covariance(H, s, t):
    """R(s, t) = (t^2H + s^2H - |t - s|^2H) / 2."""
    _check_hurst(H)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("times must be nonnegative")
    h2 = 2 * H
    return 0.5 * (t**h2 + s**h2 - np.abs(t - s) ** h2)


def fgn_autocovariance(H, k, dt=1.0):
    _check_hurst(H)
    k = np.abs(np.asarray(k, dtype=float))
    h2 = 2 * H
    return 0.5 * dt**h2 * (np.abs(k + 1) ** h2 - 2 * k**h2 + np.abs(k - 1) ** h2)


def volterra_constant(H):
    return np.sqrt(2 * H * gamma(1.5 - H) / (gamma(H + 0.5) * gamma(2 - 2 * H)))


def volterra_kernel(H, t, s):
    """Square-integrable kernel K with B_t = int_0^t K(t, s) dW_s.

    Written in the form whose hypergeometric argument 1 - s/t stays in [0, 1),
    which is the accurate branch for scipy's hyp2f1.
    """
    _check_hurst(H)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0) or np.any(s >= t):
        raise ValueError("volterra_kernel needs 0 < s < t")
    if H == 0.5:
        return np.ones(np.broadcast(t, s).shape)
    return (volterra_constant(H) * (t - s) ** (H - 0.5) * (t / s) ** (0.5 - H)
            * hyp2f1(H - 0.5, 2 * H, H + 0.5, 1 - s / t))


# --- random streams ---------------------------------------------------------

def replication_rng(seed, rep):
    """Independent generator for replication `rep`, derived from (seed, rep) only."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(rep,))))


def standard_normals(seed, reps, size, start=0):
    out = np.empty((reps, size))
    for r in range(reps):
        out[r] = replication_rng(seed, start + r).standard_normal(size)
    return out


# --- exact sampler ----------------------------------------------------------

def _circulant_sqrt_eigs(H, n):
    g = fgn_autocovariance(H, np.arange(n + 1))
    c = np.concatenate([g, g[-2:0:-1]])
    lam = np.fft.fft(c).real
    if lam.min() < -1e-10 * lam.max():
        raise EmbeddingError(f"negative circulant eigenvalue {lam.min():.3e} (H={H}, n={n})")
    return np.sqrt(np.clip(lam, 0, None) / len(c))


def fgn_unit(H, n, normals):
    """Unit-spacing fGn rows from standard normals.

    Circulant embedding when n >= 256 (needs 4n normals per row), Cholesky below
    (needs n normals per row).
    """
    normals = np.atleast_2d(normals)
    if n >= 256:
        m = 2 * n
        sq = _circulant_sqrt_eigs(H, n)
        w = sq * (normals[:, :m] + 1j * normals[:, m:2 * m])
        return np.fft.fft(w, axis=1).real[:, :n]
    cov = fgn_autocovariance(H, np.subtract.outer(np.arange(n), np.arange(n)))
    L = cholesky(cov, lower=True)
    return normals[:, :n] @ L.T


def normals_needed(n):
    return 4 * n if n >= 256 else n


def sample_exact_array(H, grid, seed, reps=1, start=0):
    """(reps, n+1) array of exact fBm samples on the grid."""
    _check_hurst(H)
    z = standard_normals(seed, reps, normals_needed(grid.n), start)
    inc = fgn_unit(H, grid.n, z) * grid.dt**H
    out = np.zeros((reps, grid.n + 1))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def sample_exact(H, grid, seed, reps=1):
    arr = sample_exact_array(H, grid, seed, reps)
    return [FbmPath(H, grid, arr[r], None, seed, "exact", {"rep": r}) for r in range(reps)]


# --- Volterra sampler -------------------------------------------------------

def volterra_synthesis_rows(H, grid, rows):
    """Weights L[i, j] with B_i = sum_j L[i, j] dW_j, for node indices `rows`.

    Midpoint nodes; the cells touching the two kernel singularities (s -> 0 for
    every H != 1/2, s -> t for H < 1/2) are rescaled so that the pure power
    singularity is integrated exactly over that cell.
    """
    rows = np.asarray(rows)
    n, dt = grid.n, grid.dt
    i = rows[:, None]
    j = np.arange(n)[None, :]
    mask = j < i
    if H == 0.5:
        return mask.astype(float)
    t = i * dt
    s = (j + 0.5) * dt
    with np.errstate(all="ignore"):
        ss = np.where(mask, s, 0.5 * t)
        val = np.where(mask, volterra_constant(H) * (t - ss) ** (H - 0.5) * (t / ss) ** (0.5 - H)
                       * hyp2f1(H - 0.5, 2 * H, H + 0.5, 1 - ss / t), 0.0)
    d = abs(H - 0.5)
    val[:, 0] *= 2.0**(-d) / (1 - d)
    if H < 0.5:
        r = np.nonzero(rows > 0)[0]
        val[r, rows[r] - 1] *= 2.0**(H - 0.5) / (H + 0.5)
    return val


def sample_volterra_array(H, grid, dW, block=512):
    dW = np.atleast_2d(dW)
    out = np.zeros((dW.shape[0], grid.n + 1))
    for a in range(1, grid.n + 1, block):
        rows = np.arange(a, min(a + block, grid.n + 1))
        out[:, rows] = dW @ volterra_synthesis_rows(H, grid, rows).T
    return out


def sample_volterra(H, grid, seed, rep=0):
    _check_hurst(H)
    dW = replication_rng(seed, rep).standard_normal(grid.n) * np.sqrt(grid.dt)
    B = sample_volterra_array(H, grid, dW)[0]
    return FbmPath(H, grid, B, dW, seed, "volterra", {"rep": rep})


# --- path I/O -----------------------------------------------------------------

def save_csv(path, fname, extra=None):
    t = path.grid.t
    cols = {"t": t, "B": path.values}
    if path.driver is not None:
        cols["dW"] = np.append(path.driver, np.nan)
    if extra:
        cols.update(extra)
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        for row in zip(*cols.values()):
            w.writerow([repr(float(v)) for v in row])


def load_csv(fname, hurst, column="B"):
    with open(fname, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{fname}: no data rows")
    t = np.array([float(r["t"]) for r in rows])
    vals = np.array([float(r[column]) for r in rows])
    dt = np.diff(t)
    if len(t) < 2 or not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError(f"{fname}: time column is not a uniform grid")
    driver = None
    if "dW" in rows[0]:
        driver = np.array([float(r["dW"]) for r in rows[:-1]])
    return FbmPath(hurst, TimeGrid(len(t) - 1, float(dt[0])), vals, driver, None, "csv")


_MAGIC = b"FBMP"
_HEADER = struct.Struct("<4sdqdq16s?")


def save_binary(path, fname, scheme=None):
    tag = (scheme or path.scheme).encode()[:16].ljust(16, b"\0")
    seed = -1 if path.seed is None else int(path.seed)
    has_driver = path.driver is not None
    with open(fname, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, path.hurst, path.grid.n, path.grid.dt, seed, tag, has_driver))
        fh.write(np.asarray(path.values, dtype="<f8").tobytes())
        if has_driver:
            fh.write(np.asarray(path.driver, dtype="<f8").tobytes())


def load_binary(fname):
    raw = Path(fname).read_bytes()
    magic, H, n, dt, seed, tag, has_driver = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{fname}: not an fBm path record")
    off = _HEADER.size
    vals = np.frombuffer(raw, "<f8", n + 1, off).copy()
    driver = np.frombuffer(raw, "<f8", n, off + 8 * (n + 1)).copy() if has_driver else None
    return FbmPath(H, TimeGrid(n, dt), vals, driver, None if seed < 0 else seed,
                   tag.rstrip(b"\0").decode())
