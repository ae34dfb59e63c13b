"""Command line: simulate, estimate, experiment, report, verify."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import frac_ops
from .config import ConfigError, load_config
from .discrete_est import (DiscreteRecord, fine_integer_values, load_record_csv, theta_bar,
                           theta_check)
from .estimators import (DegenerateInformation, compute_Q, kb_objects, mle_kb, mle_w_form,
                         mle_z_form)
from .fbm_engine import TimeGrid, load_csv, sample_exact, sample_volterra, save_csv
from .sde_lab import _REGISTRY, DivergenceError, SdePath, euler_solve, get_drift

DRIFTS = sorted(_REGISTRY)


class UsageError(Exception):
    pass


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--plan-cache", metavar="PATH",
                        help=f"directory for cached quadrature plans (default ${frac_ops.PLAN_CACHE_ENV})")
    common.add_argument("--seed", type=int)

    p = argparse.ArgumentParser(prog="fbmle", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write an fBm / SDE path to CSV")
    s.add_argument("--hurst", type=float, required=True)
    s.add_argument("--theta", type=float, default=0.0)
    s.add_argument("--drift", default="linear", choices=DRIFTS)
    s.add_argument("--n", type=int, default=1000, help="number of steps")
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--sampler", choices=("exact", "volterra"), default="volterra",
                   help="volterra also stores the driving increments dW")
    s.add_argument("--out", required=True, help="output CSV (columns t, B, [dW], X)")

    e = sub.add_parser("estimate", parents=[common], help="estimate theta from one path")
    e.add_argument("--input", required=True)
    e.add_argument("--hurst", type=float, required=True)
    e.add_argument("--drift", default="linear", choices=DRIFTS)
    e.add_argument("--method", choices=("w", "z", "kb", "bar", "check"), default="z")
    e.add_argument("--scheme", choices=frac_ops.SCHEMES, default="innovation")
    e.add_argument("--theta", type=float, help="true theta (w-form only)")
    e.add_argument("--rule", choices=("printed", "product"), default="printed",
                   help="integer-time Q rule for --method check")
    e.add_argument("--profile", help="optional CSV for the running estimate")

    x = sub.add_parser("experiment", parents=[common], help="run a Monte Carlo experiment")
    x.add_argument("--config", required=True)
    x.add_argument("--out", help="run directory (default: <config out>/<experiment>)")
    x.add_argument("--reps", type=int)
    x.add_argument("--hurst", type=float, nargs="+")
    x.add_argument("--theta", type=float, nargs="+")
    x.add_argument("--drift", nargs="+", choices=DRIFTS)
    x.add_argument("--method", choices=("z", "kb"))

    r = sub.add_parser("report", help="re-aggregate a persisted run and print its JSON report")
    r.add_argument("run_dir")

    v = sub.add_parser("verify", parents=[common], help="acceptance checks, one line per criterion")
    v.add_argument("--quick", action="store_true", help="fast algebraic and oracle checks only")
    v.add_argument("--only", nargs="+", metavar="AC", help="e.g. AC-3 AC-12")
    v.add_argument("--verbose", action="store_true")
    return p


def _set_cache(path):
    if path:
        os.environ[frac_ops.PLAN_CACHE_ENV] = path
        frac_ops.default_cache.dir = Path(path)


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(a):
    drift = get_drift(a.drift)
    grid = TimeGrid(a.n, a.dt)
    seed = a.seed or 0
    fb = sample_volterra(a.hurst, grid, seed) if a.sampler == "volterra" else sample_exact(a.hurst, grid, seed)[0]
    path = euler_solve(a.theta, drift, fb)
    save_csv(fb, a.out, extra={"X": path.X})
    print(json.dumps({"out": a.out, "H": a.hurst, "theta": a.theta, "drift": a.drift, "n": a.n,
                      "dt": a.dt, "seed": seed, "sampler": a.sampler}))
    return 0


def _read_path(fname, H):
    with open(fname, newline="") as fh:
        cols = next(csv.reader(fh))
    col = "X" if "X" in cols else "B"
    return load_csv(fname, H, col)


def cmd_estimate(a):
    drift = get_drift(a.drift)
    H = a.hurst
    if a.method == "check":
        with open(a.input, newline="") as fh:
            cols = next(csv.reader(fh))
        if "X_m" in cols:
            rec = load_record_csv(a.input, H, drift)
        else:
            fb = _read_path(a.input, H)
            if not np.isclose(fb.grid.dt, 1.0):
                raise UsageError("--method check needs observations at unit spacing")
            rec = DiscreteRecord(H, fb.values, drift)
        val = theta_check(rec, a.rule)
        print(json.dumps({"method": "check", "H": H, "n": rec.n, "rule": a.rule, "theta_hat": val}))
        return 0
    fb = _read_path(a.input, H)
    if a.method == "bar":
        npu = int(round(1.0 / fb.grid.dt))
        if not np.isclose(npu * fb.grid.dt, 1.0) or fb.grid.n % npu:
            raise UsageError("--method bar needs a fine path with an integer number of nodes per unit time")
        Q, Z = fine_integer_values(H, fb.values, drift, npu)
        print(json.dumps({"method": "bar", "H": H, "n": fb.grid.n // npu, "nodes_per_unit": npu,
                          "theta_hat": theta_bar(Q, Z)}))
        return 0
    path = SdePath(float("nan"), drift, fb, fb.values)
    if a.method == "kb":
        if drift.family != "linear":
            raise UsageError("--method kb is for the linear drift")
        res = mle_kb(kb_objects(path))
    else:
        q = compute_Q(path, drift, a.scheme)
        if a.method == "w":
            if fb.driver is None or a.theta is None:
                raise UsageError("--method w needs a dW column in the input and --theta")
            res = mle_w_form(q, fb.driver, a.theta)
        else:
            res = mle_z_form(q)
    if a.profile:
        res.profile_csv(a.profile)
    print(res.to_json())
    return 0


def cmd_experiment(a):
    from .mc_harness import SIMULATE, persist, run_experiment

    cfg = load_config(a.config)
    if cfg.experiment not in SIMULATE:
        raise ConfigError(f"{a.config}: unknown experiment {cfg.experiment!r}; known: {sorted(SIMULATE)}")
    unknown = set(cfg.drift) - set(DRIFTS)
    if unknown:
        raise ConfigError(f"{a.config}: unknown drift {sorted(unknown)}; known: {DRIFTS}")
    for name, val in (("seed", a.seed), ("reps", a.reps), ("method", a.method)):
        if val is not None:
            setattr(cfg, name, val)
    for name, val in (("H", a.hurst), ("theta", a.theta), ("drift", a.drift)):
        if val:
            setattr(cfg, name, tuple(val))
    out = Path(a.out) if a.out else Path(cfg.out) / cfg.experiment
    rep = run_experiment(cfg)
    persist(cfg, rep, out)
    for c in rep.checks:
        state = {True: "PASS", False: "FAIL", None: "info"}[c["passed"]]
        print(f"{state:<5} {c['name']:<28} {c['group']:<32} value={c['value']!s:.60} target={c['target']}")
    print(f"wrote {out}")
    return 0 if rep.passed else 1


def cmd_report(a):
    from .mc_harness import load, report

    cfg, raw = load(a.run_dir)
    sys.stdout.write(report(cfg, raw).to_json())
    return 0


def cmd_verify(a):
    from . import verify

    ids = a.only
    if ids:
        unknown = [i for i in ids if i not in verify.ALL]
        if unknown:
            raise UsageError(f"unknown criteria {unknown}; known: {list(verify.ALL)}")
    res = verify.run(ids, quick=a.quick, seed=a.seed or 0, verbose=a.verbose,
                     out=lambda s: print(s, flush=True))
    n_ok = sum(r.passed for r in res)
    print(f"{n_ok}/{len(res)} criteria pass")
    return 0 if n_ok == len(res) else 1


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "experiment": cmd_experiment,
            "report": cmd_report, "verify": cmd_verify}


def main(argv=None):
    parser = _parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _set_cache(getattr(a, "plan_cache", None))
    try:
        return COMMANDS[a.cmd](a)
    except (UsageError, ConfigError) as e:
        print(f"fbmle {a.cmd}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, DegenerateInformation, DivergenceError) as e:
        print(f"fbmle {a.cmd}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
