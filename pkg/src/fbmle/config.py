"""Experiment configuration files.

One `key = value` per line, `#` starts a comment. Values are Python/TOML-style
literals: numbers, quoted strings, true/false, or bracketed lists; a bare
comma-separated list is also accepted. `include = "other.toml"` pulls in a file
relative to the including one; keys set later override earlier ones.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "bias_mse"
    H: tuple = (0.5,)
    theta: tuple = (-1.0,)
    drift: tuple = ("linear",)
    horizons: tuple = (25.0, 50.0, 100.0, 200.0)
    reps: int = 100
    dt: float = 0.1
    seed: int = 0
    out: str = "runs"
    method: str = "z"
    scheme: str = "innovation"
    nodes_per_unit: int = 64
    eps: tuple = (0.02, 0.05, 0.1, 0.2, 0.4)
    mu_nodes: int = 32
    n_grid: int = 256
    workers: int = 1
    tolerances: dict = field(default_factory=dict)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "tolerances":
                lines += [f"tol.{k} = {_fmt(x)}" for k, x in sorted(v.items())]
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return asdict(self)


_TUPLES = {f.name for f in fields(ExperimentConfig) if f.type == "tuple"}
_INTS = {"reps", "seed", "nodes_per_unit", "mu_nodes", "n_grid", "workers"}
_FLOATS = {"dt"}
_FLOAT_TUPLES = {"H", "theta", "horizons", "eps"}


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, str):
        return repr(v).replace("'", '"')
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _literal(text, where):
    text = text.strip()
    repl = {"true": "True", "false": "False"}
    try:
        return ast.literal_eval(repl.get(text, text))
    except (ValueError, SyntaxError):
        pass
    if "," in text:
        return [_literal(p, where) for p in text.split(",") if p.strip()]
    if text and all(c.isalnum() or c in "_-./" for c in text):
        return text  # bare word
    raise ConfigError(f"{where}: cannot parse value {text!r}")


def read_raw(path, _seen=None):
    path = Path(path)
    seen = _seen or set()
    key = path.resolve()
    if key in seen:
        raise ConfigError(f"{path}: include cycle")
    seen = seen | {key}
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        val = _literal(v, f"{path}:{no}")
        if k == "include":
            out.update(read_raw(path.parent / str(val), seen))
        else:
            out[k] = val
    return out


def from_mapping(raw, where="config"):
    cfg = ExperimentConfig()
    names = {f.name for f in fields(ExperimentConfig)}
    tol = {}
    for k, v in raw.items():
        if k.startswith("tol."):
            tol[k[4:]] = float(v)
            continue
        if k not in names or k == "tolerances":
            raise ConfigError(f"{where}: unknown key {k!r}")
        try:
            if k in _TUPLES:
                v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
                v = tuple(float(x) for x in v) if k in _FLOAT_TUPLES else tuple(str(x) for x in v)
            elif k in _INTS:
                v = int(v)
            elif k in _FLOATS:
                v = float(v)
            else:
                v = str(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: bad value for {k!r}: {v!r}") from None
        setattr(cfg, k, v)
    cfg.tolerances = tol
    if cfg.reps < 1 or cfg.dt <= 0:
        raise ConfigError(f"{where}: need reps >= 1 and dt > 0")
    return cfg


def load_config(path):
    return from_mapping(read_raw(path), str(path))


def parse_config_text(text, base="."):
    tmp = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"<text>:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        val = _literal(v, f"<text>:{no}")
        if k == "include":
            tmp.update(read_raw(Path(base) / str(val)))
        else:
            tmp[k] = val
    return from_mapping(tmp, "<text>")
