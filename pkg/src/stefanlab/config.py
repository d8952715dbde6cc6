"""Experiment configuration: INI sections parsed with configparser and validated.

Every key has a default; unknown sections or keys, even cell counts and
violations of the resolvability caps are reported with the offending key.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(";", ",").split(",") if x.strip()]


# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "media": {"preset": ("str", "identity"), "dim": ("int", 3), "g": ("str", ""),
              **{f"a{i}{j}": ("str", "") for i in range(1, 4) for j in range(1, 4)}},
    "grid": {"R_box": ("float", 6.0), "cells": ("int", 65)},
    "source": {"r_K": ("float", 1.0), "r_omega": ("float", 1.5)},
    "time": {"dt": ("float", 0.1), "T": ("float", 2.0), "output_times": ("floats", "1, 2")},
    "solver": {"tol": ("float", 1e-9), "omega": ("float", 0.0), "support_constant": ("float", 0.0)},
    "homogenize": {"cell_resolution": ("int", 32), "averaging_epsilons": ("floats", "1, 0.5, 0.25, 0.125, 0.0625")},
    "greens": {"R_box": ("float", 4.0), "cells": ("int", 65), "boundary": ("str", "far_field"),
               "lambdas": ("floats", ""), "annulus_inner": ("float", 0.0), "annulus_outer": ("float", 0.0)},
    "barriers": {"t0": ("float", 0.0), "slope_tolerance": ("float", 0.0)},
    "nearfield": {"R_box": ("float", 8.0), "cells": ("int", 65), "method": ("str", "matched")},
    "sweep": {"lambdas": ("floats", "1, 8"), "R_box": ("float", 2.25), "cells": ("int", 73), "dt": ("float", 0.05),
              "times": ("floats", "1"), "r_K": ("float", 0.5), "annulus_inner": ("float", 0.5),
              "annulus_outer": ("float", 2.0), "hausdorff_threshold": ("float", 0.0)},
    "output": {"dir": ("str", "out"), "seed": ("int", 0), "jobs": ("int", 1)},
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]]
    derived: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        sec, k = key.split(".", 1)
        return self.values[sec][k]

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"), default=_jsonable)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def dim(self) -> int:
        return int(self["media.dim"])


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _convert(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "floats":
            return _floats(raw)
        return str(raw).strip()
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from exc


def defaults() -> dict[str, dict[str, object]]:
    return {sec: {k: _convert(f"{sec}.{k}", kind, str(d)) for k, (kind, d) in keys.items()}
            for sec, keys in SCHEMA.items()}


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    vals = defaults()
    items = [(sec, k, v) for sec in cp.sections() for k, v in cp.items(sec)]
    for key, v in (overrides or {}).items():
        if "." not in key:
            raise ConfigError(key, "override keys must look like section.key")
        sec, k = key.split(".", 1)
        items.append((sec, k, v))
    for sec, k, v in items:
        if sec not in SCHEMA:
            raise ConfigError(sec, "unknown section")
        if k not in SCHEMA[sec]:
            raise ConfigError(f"{sec}.{k}", "unknown key")
        vals[sec][k] = _convert(f"{sec}.{k}", SCHEMA[sec][k][0], v)
    cfg = ExperimentConfig(vals)
    validate(cfg)
    return cfg


def parse_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, overrides)


def _odd(cfg: ExperimentConfig, key: str):
    c = int(cfg[key])
    if c % 2 == 0:
        raise ConfigError(key, f"cell count must be odd, got {c}")
    if c < 9:
        raise ConfigError(key, f"cell count must be >= 9, got {c}")


def _positive(cfg: ExperimentConfig, key: str):
    if not float(cfg[key]) > 0:
        raise ConfigError(key, "must be positive")


def validate(cfg: ExperimentConfig) -> None:
    n = cfg.dim
    if n != 3:
        raise ConfigError("media.dim", "only n = 3 is supported by the presets and checks")
    for key in ("grid.cells", "greens.cells", "nearfield.cells", "sweep.cells"):
        _odd(cfg, key)
    for key in ("grid.R_box", "source.r_K", "time.dt", "time.T", "solver.tol", "greens.R_box",
                "nearfield.R_box", "sweep.R_box", "sweep.dt", "sweep.r_K"):
        _positive(cfg, key)
    if cfg["source.r_omega"] <= cfg["source.r_K"]:
        raise ConfigError("source.r_omega", "initial support radius must exceed r_K")
    h = 2 * cfg["grid.R_box"] / (cfg["grid.cells"] - 1)
    if 2 * cfg["source.r_K"] < 3 * h:
        raise ConfigError("source.r_K", f"source not resolved: need h <= 2 r_K / 3 (h = {h:.4g})")
    outs = cfg["time.output_times"]
    if not outs:
        raise ConfigError("time.output_times", "at least one output time required")
    if any(t <= 0 or t > cfg["time.T"] + 1e-12 for t in outs):
        raise ConfigError("time.output_times", "output times must lie in (0, T]")
    steps = [t / cfg["time.dt"] for t in outs]
    if any(abs(s - round(s)) > 1e-9 for s in steps):
        raise ConfigError("time.output_times", "output times must be multiples of dt")
    t0 = cfg["barriers.t0"]
    if t0 > 0 and not any(abs(t0 - t) < 1e-12 for t in outs):
        raise ConfigError("barriers.t0", "must be one of time.output_times")
    if cfg["greens.boundary"] not in ("far_field", "zero"):
        raise ConfigError("greens.boundary", "must be far_field or zero")
    if cfg["nearfield.method"] not in ("matched", "zero"):
        raise ConfigError("nearfield.method", "must be matched or zero")
    if cfg["nearfield.R_box"] < 8 * cfg["source.r_K"]:
        raise ConfigError("nearfield.R_box", "needs R_box >= 8 r_K")
    gh = 2 * cfg["greens.R_box"] / (cfg["greens.cells"] - 1)
    for lam in cfg["greens.lambdas"]:
        if lam < 1:
            raise ConfigError("greens.lambdas", "lambda must be >= 1")
        if gh > lam ** (-1.0 / n) / 8 + 1e-12:
            raise ConfigError("greens.lambdas", f"lambda = {lam:g} violates h <= lambda^(-1/n)/8 (h = {gh:.4g})")
    lams = cfg["sweep.lambdas"]
    if any(b <= a for a, b in zip(lams[:-1], lams[1:])):
        raise ConfigError("sweep.lambdas", "must be strictly increasing")
    sh = 2 * cfg["sweep.R_box"] / (cfg["sweep.cells"] - 1)
    for lam in lams:
        if sh > lam ** (-1.0 / n) / 8 + 1e-12:
            raise ConfigError("sweep.lambdas", f"lambda = {lam:g} violates h <= lambda^(-1/n)/8 (h = {sh:.4g})")
        if sh > cfg["sweep.r_K"] * lam ** (-1.0 / n) / 3 + 1e-12:
            raise ConfigError("sweep.lambdas", f"lambda = {lam:g} violates h <= r_K lambda^(-1/n)/3 (h = {sh:.4g})")
    cfg.derived.update(h=h, greens_h=gh, sweep_h=sh)


def check_support_bound(cfg: ExperimentConfig, Q: np.ndarray, L_avg: float) -> float:
    """Estimated max free-boundary radius at T; raises if it comes near the box.

    With [solver] support_constant set (a supersolution constant C2 from a
    barriers run) the reach is C2 T^{1/n}. Otherwise the self-similar volume
    law with the ball capacity bound C~ <= r_K^{n-2} lambda_max(Q) / sqrt(det Q)
    is added to the stretched initial support volume. The reach must stay
    below R_box minus a margin of 0.1 R_box + 2h, which absorbs the faster
    pre-asymptotic growth seen on anisotropic media.
    """
    n = cfg.dim
    w = np.linalg.eigvalsh(Q)
    C2 = cfg["solver.support_constant"]
    T = cfg["time.T"]
    if C2 > 0:
        reach = C2 * T ** (1.0 / n)
        what = f"C2 T^(1/n) = {C2:.4g} * {T:g}^(1/{n})"
    else:
        Ct = cfg["source.r_K"] ** (n - 2) * w.max() / math.sqrt(np.prod(w))
        C2 = math.sqrt(w.max()) * (n * (n - 2) * Ct / L_avg) ** (1.0 / n)
        r0 = math.sqrt(w.max()) * cfg["source.r_omega"]
        reach = (r0 ** n + C2 ** n * T) ** (1.0 / n)
        what = f"(r0^n + C2^n T)^(1/n) with r0 = {r0:.4g}, C2 = {C2:.4g}, T = {T:g}"
    limit = 0.9 * cfg["grid.R_box"] - 2 * cfg.derived["h"]
    if reach >= limit:
        raise ConfigError("grid.R_box", f"box too small for T: support bound {what} gives {reach:.4g} >= "
                                        f"0.9 R_box - 2h = {limit:.4g}")
    cfg.derived["support_bound"] = reach
    return reach


def echo(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, keys in cfg.values.items():
        cp[sec] = {k: (", ".join(repr(x) for x in v) if isinstance(v, list) else
                       (repr(v) if isinstance(v, float) else str(v))) for k, v in keys.items()}
    import io
    buf = io.StringIO()
    cp.write(buf)
    for k, v in sorted(cfg.derived.items()):
        buf.write(f"# derived {k} = {v!r}\n")
    return buf.getvalue()


def to_dict(cfg: ExperimentConfig) -> dict:
    return {"values": cfg.values, "derived": cfg.derived}


__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text", "check_support_bound",
           "echo", "defaults", "asdict"]
