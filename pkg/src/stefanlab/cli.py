"""Command line driver: config parsing, stage orchestration, manifest and report."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .asymptotics import SweepConfig, build_selfsimilar, near_field_for_ball, run_sweep
from .barriers import (BarrierError, build_quadratic_barrier, choose_subsolution, choose_supersolution,
                       envelope_check, explicit_evaluator, integrate_barrier,
                       integrate_barrier_quadrature, table_evaluator)
from .config import ConfigError, ExperimentConfig, check_support_bound, echo, parse_config
from .greens import (bound_constant, delta_test, distance_to_F0, eval_F0, gradient_bound_check, greens_for_media,
                     kappa, mirror_asymmetry, radial_profile)
from .grid import GridError, build_grid
from .homogenize import CellProblemError, averaging_check, gaussian_bump, solve_cell_problems, voigt_reuss
from .linsolve import ConvergenceError
from .media import MediaError, get_preset, media_from_expressions, validate_media
from .vi_solver import SolverError, make_setup, run, weak_monotonicity_check

log = logging.getLogger("stefanlab")

STAGES = ("homogenize", "greens", "solve", "barriers", "nearfield", "selfsim", "sweep", "report")
DEPENDS = {
    "homogenize": (),
    "greens": ("homogenize",),
    "solve": ("homogenize",),
    "barriers": ("homogenize", "solve"),
    "nearfield": ("homogenize",),
    "selfsim": ("homogenize", "nearfield"),
    "sweep": ("homogenize", "nearfield"),
    "report": (),
}
OUTPUT_ENV = "STEFANLAB_OUTPUT_ROOT"
EXIT_PASS, EXIT_VERDICT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class DependencyError(ConfigError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    versions: dict
    out_dir: str
    stages: list = field(default_factory=list)
    files: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(all(v.values()) for v in self.verdicts.values())

    def to_json(self) -> dict:
        return sio.to_plain(self.__dict__)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(**d)


def versions() -> dict:
    import numba
    import scipy
    return {"stefanlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


# ------------------------------------------------------------------ helpers

def build_media(cfg: ExperimentConfig):
    """(field, closed-form homogenized data or None) from the [media] section."""
    exprs = {(i - 1, j - 1): cfg[f"media.a{i}{j}"] for i in range(1, 4) for j in range(1, 4)
             if cfg[f"media.a{i}{j}"]}
    if exprs:
        if not cfg["media.g"]:
            raise ConfigError("media.g", "expression media need g")
        try:
            return media_from_expressions(exprs, cfg["media.g"], cfg.dim), None
        except MediaError as exc:
            raise ConfigError("media.a11", str(exc)) from exc
    try:
        p = get_preset(cfg["media.preset"])
    except MediaError as exc:
        raise ConfigError("media.preset", str(exc)) from exc
    return p.field, p.known_homogenized


def resolve_stages(requested, strict: bool = True) -> list[str]:
    req = set(requested)
    unknown = req - set(STAGES)
    if unknown:
        raise ConfigError("stages", f"unknown stages {sorted(unknown)}")
    if not strict:
        stack = list(req)
        while stack:
            for d in DEPENDS[stack.pop()]:
                if d not in req:
                    req.add(d)
                    stack.append(d)
    for s in req:
        missing = [d for d in DEPENDS[s] if d not in req]
        if missing:
            raise DependencyError("stages", f"stage {s!r} needs {missing}")
    return [s for s in STAGES if s in req]


def _tag(t: float) -> str:
    return ("%.6g" % t).replace(".", "p")


class _Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, jobs: int):
        self.cfg, self.out, self.jobs = cfg, out, jobs
        self.fld, self.hom_exact = build_media(cfg)
        self.hom = None
        self.run = None
        self.C_star = None
        self.files: list[str] = []
        self.verdicts: dict = {}
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name


# ------------------------------------------------------------------- stages

def stage_homogenize(ctx: _Context) -> None:
    cfg, fld = ctx.cfg, ctx.fld
    hom = solve_cell_problems(fld, cfg["homogenize.cell_resolution"], jobs=ctx.jobs)
    ctx.hom = hom
    reuss, voigt = voigt_reuss(fld)
    w = np.linalg.eigvalsh(hom.Q)
    vr = validate_media(fld)
    v = {
        "media_valid": vr.passed,
        "Q_spd": bool(w.min() > 0) and bool(np.allclose(hom.Q, hom.Q.T, atol=1e-14)),
        "P_squared_is_Q": bool(np.abs(hom.P_sqrt @ hom.P_sqrt - hom.Q).max() <= 1e-10 * w.max()),
        "L_avg_in_bounds": 1.0 / fld.M_g - 1e-12 <= hom.L_avg <= 1.0 / fld.m_g + 1e-12,
        "voigt_reuss_bounds": bool(np.linalg.eigvalsh(hom.Q - reuss).min() >= -1e-8)
        and bool(np.linalg.eigvalsh(voigt - hom.Q).min() >= -1e-8),
    }
    exact = ctx.hom_exact
    if exact is not None:
        v["matches_closed_form"] = bool(np.abs(hom.Q - exact.Q).max() <= 1e-3
                                        and abs(hom.L_avg - exact.L_avg) <= 1e-6)
    rows = averaging_check(fld, gaussian_bump(), cfg["homogenize.averaging_epsilons"], L_avg=hom.L_avg)
    sio.write_csv(ctx.path("averaging.csv"), ["epsilon", "weighted", "averaged", "error"],
                  [(r.epsilon, r.weighted, r.averaged, r.error) for r in rows])
    errs = [r.error for r in rows]
    v["averaging_converges"] = errs[-1] <= errs[0]
    data = {"Q": hom.Q, "P_sqrt": hom.P_sqrt, "L_avg": hom.L_avg, "cell_resolution": hom.cell_resolution,
            "reuss": reuss, "voigt": voigt, "media": fld.name}
    sio.write_json(ctx.path("homogenize.json"), data)
    ctx.verdicts["homogenize"] = v
    ctx.summary["homogenize"] = {"Q": hom.Q, "L_avg": hom.L_avg}


def stage_greens(ctx: _Context) -> None:
    cfg, fld, hom = ctx.cfg, ctx.fld, ctx.hom
    grid = build_grid(cfg.dim, cfg["greens.R_box"], cfg["greens.cells"])
    tab = greens_for_media(fld, grid, hom, boundary=cfg["greens.boundary"])
    n, h = grid.dim, grid.h
    prof = radial_profile(tab)
    sio.write_csv(ctx.path("greens_profile.csv"), ["r", "G", "G_r_pow"], prof)
    grad = gradient_bound_check(tab)
    dt = delta_test(hom)
    C = tab.bound_constant
    m = tab.annulus(2 * h, grid.R_box / 2)
    ratio = tab.G[m] * grid.radius[m] ** (n - 2) / kappa(n)
    C_kappa = float(max(ratio.max(), 1.0 / ratio.min()))
    v = {"two_sided_bound_finite": math.isfinite(C) and C > 0, "gradient_bound_finite": grad.finite,
         "delta_test": dt.relative_error <= 1e-8}
    data = {"bound_constant": C, "bound_constant_kappa": C_kappa, "iterations": tab.iterations,
            "gradient": grad, "delta_test": dt, "mirror_asymmetry": mirror_asymmetry(tab),
            "boundary": tab.boundary, "h": h}
    if fld.A0 is not None:
        sel = tab.annulus(4 * h, grid.R_box / 4) & (grid.radius > 0)
        F = eval_F0(fld.A0, grid.centers()[sel])
        rel = float(np.abs(tab.G[sel] / F - 1.0).max()) if np.any(sel) else float("nan")
        data["relative_error_to_F0"] = rel
        v["matches_F0_3pct"] = rel <= 0.03
    lams = cfg["greens.lambdas"]
    if lams:
        r_in = cfg["greens.annulus_inner"] or grid.R_box / 4
        r_out = cfg["greens.annulus_outer"] or grid.R_box / 2
        rows = []
        for lam in lams:
            t = tab if lam == 1.0 else greens_for_media(fld, grid, hom, lam=lam, boundary=cfg["greens.boundary"])
            rows.append((lam, distance_to_F0(t, r_in, r_out, hom), bound_constant(t)))
        d = [r[1] for r in rows]
        mono = all(b <= a for a, b in zip(d[:-1], d[1:]))
        sio.write_csv(ctx.path("greens_lambda.csv"), ["lambda", "distance_to_F0", "bound_constant", "nonincreasing"],
                      [r + (mono,) for r in rows])
        v["lambda_distance_nonincreasing"] = mono
        v["lambda_distance_halved"] = d[-1] < 0.5 * d[0]
        data["lambda_distances"] = rows
    sio.write_json(ctx.path("greens.json"), data)
    ctx.verdicts["greens"] = v
    ctx.summary["greens"] = {"bound_constant": C, "bound_constant_kappa": C_kappa}


def _solve_grid(cfg):
    return build_grid(cfg.dim, cfg["grid.R_box"], cfg["grid.cells"])


def stage_solve(ctx: _Context) -> None:
    cfg = ctx.cfg
    grid = _solve_grid(cfg)
    omega = cfg["solver.omega"] or None
    setup = make_setup(grid, ctx.fld, cfg["source.r_K"], cfg["source.r_omega"], cfg["time.dt"], cfg["time.T"],
                       tol=cfg["solver.tol"], omega=omega)
    res = run(setup, cfg["time.output_times"], keep_all_radii=True)
    ctx.run = res
    for t, u, vv, snap in zip(res.times, res.u, res.v, res.snapshots):
        sio.write_field(ctx.path(f"u_t{_tag(t)}.bin"), grid, u)
        sio.write_field(ctx.path(f"v_t{_tag(t)}.bin"), grid, vv)
        sio.write_csv(ctx.path(f"fb_t{_tag(t)}.csv"), ["x", "y", "z"][:grid.dim], snap.boundary_cells)
        sio.write_csv(ctx.path(f"v_slice_t{_tag(t)}.csv"), ["x", "y", "v"], sio.slice_rows(grid, vv))
    sio.write_csv(ctx.path("radius_series.csv"), ["t", "r_min", "r_max"], res.radius_series)
    d = res.diagnostics
    wm = weak_monotonicity_check(res)
    rel = d.max_complementarity / setup.f_norm
    sio.write_json(ctx.path("solve.json"), {"diagnostics": d, "complementarity_relative": rel,
                                            "weak_monotonicity": wm, "support_bound": cfg.derived.get("support_bound"),
                                            "f_norm": setup.f_norm})
    ctx.verdicts["solve"] = {"complementarity": rel <= 1e-8, "nonnegative": d.min_u >= 0.0,
                             "nondecreasing": d.min_increment >= 0.0, "nested": d.nested,
                             "weak_monotonicity_finite": wm.finite}
    ctx.summary["solve"] = {"complementarity_relative": rel, "steps": d.steps,
                            "final_max_radius": res.snapshots[-1].max_radius}


def stage_barriers(ctx: _Context) -> None:
    cfg, fld, hom, res = ctx.cfg, ctx.fld, ctx.hom, ctx.run
    grid = res.setup.grid
    n = grid.dim
    t0 = cfg["barriers.t0"] or res.times[0]
    k = [i for i, t in enumerate(res.times) if abs(t - t0) < 1e-12][0]
    v_t0 = res.v[k]
    k_mask = res.setup.masks.k_mask
    if fld.A0 is not None:
        F = explicit_evaluator(fld.A0)
    else:
        F = table_evaluator(greens_for_media(fld, grid, hom))
    sup = choose_supersolution(fld, F, grid, v_t0, t0, k_mask)
    hq = build_quadratic_barrier(fld, grid, hom)
    data = {"t0": t0, "super": {"C1": sup.barrier.C1, "C2": sup.barrier.C2, "fb_margin": sup.fb_margin,
                                "support_constant": sup.support_bound, "iterations": sup.iterations}}
    v = {"super_admissible": sup.dominates_snapshot and sup.above_one_on_K and sup.fb_margin >= 0}
    sub = None
    try:
        sr = choose_subsolution(fld, F, hq, grid, v_t0, t0, k_mask)
        sub = sr.barrier
        data["sub"] = {"c1": sub.c1, "c2": sub.c2, "c3": sub.c3, "interval": sr.interval,
                       "pde_margin": sr.pde_margin, "fb_margin": sr.fb_margin, "fb_points": sr.fb_points,
                       "verified": sr.verified, "r0_t0": sub.r0(t0)}
        v["feasibility_nonempty"] = bool(sr.interval.nonempty)
        v["sub_verified"] = sr.verified
    except BarrierError as exc:
        data["sub"] = {"error": str(exc)}
        v["feasibility_nonempty"] = False
    env = envelope_check(res, sub, sup.barrier, t0)
    xs = np.array([[1.5, 0.0, 0.0], [0.0, 2.0, 0.5], [1.0, 1.0, 1.0]])[:, :n]
    Fx = F.value(xs)
    T = cfg["time.T"]
    closed = integrate_barrier(sup.barrier, xs, T, Fx=Fx)
    quad = np.array([integrate_barrier_quadrature(sup.barrier, f, T) for f in Fx])
    irel = float(np.max(np.abs(closed - quad) / np.maximum(np.abs(quad), 1e-300)))
    data["integrate_relative_error"] = irel
    data["envelope"] = env
    v["envelope_ordering"] = env.passed_ordering
    v["integrate_matches_quadrature"] = irel <= 1e-6
    tol = cfg["barriers.slope_tolerance"]
    if tol > 0:
        v["growth_slope"] = abs(env.slope - 1.0 / n) <= tol
    ts = np.array([a for a, _, _ in res.radius_series])
    rmax = np.array([c for _, _, c in res.radius_series])
    sel = ts >= ts.max() / 10.0
    coef = np.polyfit(np.log(ts[sel]), np.log(rmax[sel]), 1)
    sio.write_csv(ctx.path("growth.csv"), ["t", "r_max", "fit_r_max", "in_window", "slope", "target"],
                  [(t, r, math.exp(np.polyval(coef, math.log(t))), s, env.slope, 1.0 / n)
                   for t, r, s in zip(ts, rmax, sel)])
    sio.write_json(ctx.path("barriers.json"), data)
    ctx.verdicts["barriers"] = v
    ctx.summary["barriers"] = {"slope": env.slope, "target": 1.0 / n, "slope_window": env.slope_window,
                               "support_constant": sup.support_bound}


def stage_nearfield(ctx: _Context) -> None:
    cfg = ctx.cfg
    nf = near_field_for_ball(ctx.fld, cfg["source.r_K"], cfg["nearfield.R_box"], cfg["nearfield.cells"], ctx.hom,
                             method=cfg["nearfield.method"])
    ctx.C_star = nf.C_star_estimate
    sio.write_csv(ctx.path("nearfield_shells.csv"), ["r", "P_over_F"], nf.shells)
    g = nf.grid
    r = g.radius
    rows = []
    edges = np.linspace(cfg["source.r_K"], g.R_box, 33)
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (r >= a) & (r < b)
        if np.any(sel):
            rows.append((float(r[sel].mean()), float(nf.P_field[sel].mean())))
    sio.write_csv(ctx.path("nearfield_profile.csv"), ["r", "P"], rows)
    spread = float(np.ptp(nf.shells[:, 1]) / nf.C_star_estimate)
    sio.write_json(ctx.path("nearfield.json"), {"C_star": nf.C_star_estimate, "matching_coefficient":
                                                nf.matching_coefficient, "monotone": nf.monotone,
                                                "method": nf.method, "shell_spread": spread,
                                                "C_star_over_capacity_scale": nf.C_star_estimate / (
                                                    (cfg.dim - 2) * 4 * math.pi * cfg["source.r_K"] ** (cfg.dim - 2))})
    ctx.verdicts["nearfield"] = {"positive": nf.C_star_estimate > 0, "monotone": nf.monotone,
                                 "shells_flat": spread <= 0.05}
    ctx.summary["nearfield"] = {"C_star": nf.C_star_estimate}


def stage_selfsim(ctx: _Context) -> None:
    cfg = ctx.cfg
    ss = build_selfsimilar(ctx.C_star, ctx.hom)
    n = cfg.dim
    times = np.geomspace(0.1, 100.0, 31)
    res_a = max(ss.velocity_residual(t) for t in times)
    res_fd = max(ss.velocity_residual_fd(t) for t in (0.5, 1.0, 2.0, 5.0))
    rng = np.random.default_rng(cfg["output.seed"])
    x = rng.uniform(-3, 3, (100, n))
    t = rng.uniform(0.1, 10.0, 100)
    lam = 10 ** rng.uniform(0, 3, 100)
    V = ss.V(x, t)
    Vl = np.array([ss.rescale(x[i], t[i], lam[i]) for i in range(100)])
    fp = float(np.max(np.abs(Vl - V) / np.maximum(np.abs(V), 1.0)))
    sio.write_csv(ctx.path("selfsim_radius.csv"), ["t", "R"], zip(times, ss.R(times)))
    rr = np.linspace(0.05, 3.0, 60)
    e1 = np.zeros((rr.size, n))
    e1[:, 0] = rr
    sio.write_csv(ctx.path("selfsim_profile.csv"), ["r", "V_t1"], zip(rr, ss.V(e1, 1.0)))
    sio.write_json(ctx.path("selfsim.json"), {"C_star": ctx.C_star, "C_tilde": ss.C_tilde, "L_avg": ss.L_avg,
                                              "velocity_residual": res_a, "velocity_residual_fd": res_fd,
                                              "fixed_point_error": fp})
    ctx.verdicts["selfsim"] = {"velocity_residual": res_a <= 1e-10, "velocity_residual_fd": res_fd <= 1e-6,
                               "rescale_fixed_point": fp <= 1e-12}
    ctx.summary["selfsim"] = {"C_tilde": ss.C_tilde}


def stage_sweep(ctx: _Context) -> None:
    cfg = ctx.cfg
    thr = cfg["sweep.hausdorff_threshold"]
    C_star, rK = ctx.C_star, cfg["sweep.r_K"]
    if not math.isclose(rK, cfg["source.r_K"], rel_tol=1e-12):
        # C* belongs to the source ball; redo the near field for the sweep's ball at the same relative resolution
        scale = rK / cfg["source.r_K"]
        C_star = near_field_for_ball(ctx.fld, rK, cfg["nearfield.R_box"] * scale, cfg["nearfield.cells"], ctx.hom,
                                     method=cfg["nearfield.method"]).C_star_estimate
    sc = SweepConfig(ctx.fld, ctx.hom, C_star, tuple(cfg["sweep.lambdas"]), r_K=cfg["sweep.r_K"],
                     R_box=cfg["sweep.R_box"], cells=cfg["sweep.cells"], dt=cfg["sweep.dt"],
                     times=tuple(cfg["sweep.times"]), annulus=(cfg["sweep.annulus_inner"], cfg["sweep.annulus_outer"]),
                     tol=cfg["solver.tol"], thresholds={"hausdorff": thr} if thr > 0 else {})
    rep = run_sweep(sc, progress=lambda r: log.info("sweep lambda=%g t=%g sup_v=%.4g hausdorff=%.4g",
                                                    r.lam, r.t, r.sup_v, r.hausdorff))
    keys = ["lam", "t", "sup_v", "sup_u", "hausdorff", "singularity_ratio", "ratio_to_U", "shell_radius",
            "fb_min_radius", "fb_max_radius", "steps", "complementarity"]
    sio.write_csv(ctx.path("sweep.csv"), keys, [[getattr(r, k) for k in keys] for r in rep.rows])
    for lam, t, prof in rep.profiles:
        sio.write_csv(ctx.path(f"sweep_profile_l{_tag(lam)}_t{_tag(t)}.csv"), ["r", "v_lambda", "V"], prof)
    sio.write_json(ctx.path("sweep.json"), {"lambdas": rep.lambdas, "C_star": rep.C_star, "rows": rep.rows,
                                            "verdicts": rep.verdicts})
    ctx.verdicts["sweep"] = dict(rep.verdicts)
    ctx.summary["sweep"] = {"final_singularity_ratio": rep.rows[-1].singularity_ratio}


STAGE_FUNCS = {"homogenize": stage_homogenize, "greens": stage_greens, "solve": stage_solve,
               "barriers": stage_barriers, "nearfield": stage_nearfield, "selfsim": stage_selfsim,
               "sweep": stage_sweep}


# ----------------------------------------------------------------- pipeline

def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    if override:
        return Path(override)
    d = Path(cfg["output.dir"])
    return d if d.is_absolute() else Path(os.environ.get(OUTPUT_ENV, ".")) / d


def _precheck(cfg: ExperimentConfig, ctx: _Context, stages) -> None:
    """Config checks that need media data; run before any stage computes."""
    if "solve" in stages:
        hom = ctx.hom_exact or solve_cell_problems(ctx.fld, 16)
        check_support_bound(cfg, hom.Q, hom.L_avg)
        if ctx.fld.A0 is None and cfg.derived["h"] > 1.0 / 8 + 1e-12:
            raise ConfigError("grid.cells", f"variable media need h <= 1/8 (h = {cfg.derived['h']:.4g})")


def run_pipeline(cfg: ExperimentConfig, stages, out_dir=None, jobs: int | None = None,
                 strict: bool = True) -> RunManifest:
    order = resolve_stages(stages, strict=strict)
    out = output_dir(cfg, out_dir)
    jobs = jobs or cfg["output.jobs"]
    ctx = _Context(cfg, out, jobs)
    _precheck(cfg, ctx, order)
    out.mkdir(parents=True, exist_ok=True)
    try:
        import numba
        warnings.filterwarnings("ignore", message="The TBB threading layer")
        numba.set_num_threads(max(1, min(jobs, numba.config.NUMBA_NUM_THREADS)))
    except (ImportError, ValueError):
        pass
    man = RunManifest(cfg.digest(), versions(), str(out), stages=list(order))
    (out / "config_echo.ini").write_text(echo(cfg), encoding="utf-8")
    ctx.files.append("config_echo.ini")
    for s in order:
        if s == "report":
            continue
        t = time.perf_counter()
        log.info("stage %s", s)
        STAGE_FUNCS[s](ctx)
        man.wall_clock[s] = time.perf_counter() - t
    man.files = list(ctx.files)
    man.verdicts = ctx.verdicts
    man.summary = sio.to_plain(ctx.summary)
    if "report" in order:
        man.files += [p.name for p in emit_report(man)]
    man.files.append("manifest.json")
    sio.write_json(out / "manifest.json", man.to_json())
    return man


def emit_report(man: RunManifest) -> list[Path]:
    """summary.md, verdicts.csv and plot-data series derived from the stage outputs."""
    out = Path(man.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    lines = ["# Run summary", "", f"config hash: `{man.config_hash}`", ""]
    ran = [s for s in man.stages if s != "report"]
    if not ran:
        lines.append("no stages run")
    else:
        lines += ["| stage | verdict | check | wall clock (s) |", "|---|---|---|---|"]
        for s in ran:
            for name, ok in man.verdicts.get(s, {}).items():
                lines.append(f"| {s} | {'PASS' if ok else 'FAIL'} | {name} | {man.wall_clock.get(s, 0.0):.1f} |")
        lines += ["", f"overall: {'PASS' if man.passed else 'FAIL'}", ""]
        for s in ran:
            if s in man.summary:
                lines.append(f"- {s}: " + ", ".join(f"{k} = {_short(v)}" for k, v in man.summary[s].items()))
    p = out / "summary.md"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(p)
    rows = [(s, name, bool(ok)) for s in ran for name, ok in man.verdicts.get(s, {}).items()]
    p = out / "verdicts.csv"
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stage,check,passed\n")
        for s, name, ok in rows:
            fh.write(f"{s},{name},{int(ok)}\n")
    written.append(p)
    if (out / "growth.csv").exists():
        _, g = sio.read_csv(out / "growth.csv")
        p = sio.write_csv(out / "plot_growth_loglog.csv", ["log_t", "log_r_max", "log_fit", "slope", "target"],
                          [(math.log(r[0]), math.log(r[1]), math.log(r[2]), r[4], r[5]) for r in g if r[1] > 0])
        written.append(p)
    if (out / "sweep.csv").exists():
        hdr, sw = sio.read_csv(out / "sweep.csv")
        c = {k: i for i, k in enumerate(hdr)}
        series = []
        for t in sorted(set(sw[:, c["t"]])):
            sel = sw[sw[:, c["t"]] == t]
            hd = sel[:, c["hausdorff"]]
            sv = sel[:, c["sup_v"]]
            mh = bool(np.all(np.diff(hd) < 0))
            ms = bool(np.all(np.diff(sv) < 0))
            series += [(r[c["lam"]], t, r[c["hausdorff"]], r[c["sup_v"]], mh, ms) for r in sel]
        p = sio.write_csv(out / "plot_lambda_distance.csv",
                          ["lambda", "t", "hausdorff", "sup_v", "hausdorff_monotone", "sup_v_monotone"], series)
        written.append(p)
    return written


def _short(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return json.dumps(v if not v or not isinstance(v[0], list) else [[round(x, 6) for x in r] for r in v])
    return str(v)


# ---------------------------------------------------------------------- main

def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(p, "overrides look like section.key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stefanlab", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", "-c", help="INI experiment config (defaults used when omitted)")
        sp.add_argument("--out", "-o", help=f"output directory (default: ${OUTPUT_ENV}/<output.dir>)")
        sp.add_argument("--set", "-s", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--jobs", "-j", type=int, help="worker cap for threaded kernels")
        sp.add_argument("--verbose", "-v", action="store_true")
        if name == "run":
            sp.add_argument("--stages", default=",".join(STAGES), help="comma-separated stage list (strict)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        ov = _overrides(args.set)
        if args.command == "report" and not args.config:
            # re-emit from an existing manifest
            out = Path(args.out or Path(os.environ.get(OUTPUT_ENV, ".")) / "out")
            man = RunManifest.load(out / "manifest.json")
            man.out_dir = str(out)
            emit_report(man)
            print((out / "summary.md").read_text(encoding="utf-8"))
            return EXIT_PASS if man.passed else EXIT_VERDICT
        if args.config:
            cfg = parse_config(args.config, ov)
        else:
            from .config import parse_config_text
            cfg = parse_config_text("", ov)
        if args.command == "run":
            stages, strict = [s.strip() for s in args.stages.split(",") if s.strip()], True
        else:
            stages, strict = [args.command], False
        man = run_pipeline(cfg, stages, out_dir=args.out, jobs=args.jobs, strict=strict)
    except (ConfigError, GridError, MediaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ConvergenceError, CellProblemError, BarrierError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.command == "homogenize":
        print(json.dumps(sio.to_plain({"Q": man.summary["homogenize"]["Q"],
                                       "P_sqrt": _load(man, "homogenize.json")["P_sqrt"],
                                       "L_avg": man.summary["homogenize"]["L_avg"]}), indent=2))
    for s, vs in man.verdicts.items():
        for name, ok in vs.items():
            print(f"{'PASS' if ok else 'FAIL'}  {s}.{name}")
    print(f"outputs in {man.out_dir}")
    return EXIT_PASS if man.passed else EXIT_VERDICT


def _load(man: RunManifest, name: str) -> dict:
    with open(Path(man.out_dir) / name, encoding="utf-8") as fh:
        return json.load(fh)


if __name__ == "__main__":
    sys.exit(main())
