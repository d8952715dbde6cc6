"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with the measured numbers."""

import filecmp
import math
import time

import numpy as np
import pytest

from stefanlab.asymptotics import SweepConfig, build_selfsimilar, near_field_for_ball, run_sweep
from stefanlab.barriers import (SuperBarrier, build_quadratic_barrier, choose_subsolution, choose_supersolution,
                                envelope_check, explicit_evaluator, find_c2, growth_fit, integrate_barrier,
                                integrate_barrier_quadrature, subsolution_constants, table_evaluator)
from stefanlab.cli import run_pipeline
from stefanlab.config import parse_config_text
from stefanlab.greens import bound_constant, distance_to_F0, greens_for_media, rescaled_greens
from stefanlab.grid import assemble_operator, build_grid, outer_layer
from stefanlab.homogenize import solve_cell_problems
from stefanlab.media import PRESET_NAMES, get_preset, make_constant_media
from stefanlab.vi_solver import comparison_test, extract_free_boundary, make_setup, run

pytestmark = pytest.mark.acceptance


def test_c01_homogenization_layered(acceptance_record):
    p = get_preset("layered")
    t = time.perf_counter()
    hom = solve_cell_problems(p.field, 64)
    wall = time.perf_counter() - t
    qerr = float(np.abs(hom.Q - np.diag([math.sqrt(3.0), 2.0, 2.0])).max())
    lerr = abs(hom.L_avg - 1.0 / math.sqrt(3.0))
    ok = qerr <= 1e-3 and lerr <= 1e-6 and wall < 10
    acceptance_record(1, "layered homogenization", ok, f"|Q - Q*| = {qerr:.2e}, |L - L*| = {lerr:.2e}, {wall:.1f} s")
    assert ok


def test_c02_operator_on_quadratics(acceptance_record):
    t = time.perf_counter()
    A0s = [np.diag([1.0, 2.0, 3.0]), np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]]),
           np.array([[1.5, 0.2, -0.1], [0.2, 1.2, 0.15], [-0.1, 0.15, 1.0]])]
    worst = 0.0
    for A0 in A0s:
        Ai = np.linalg.inv(A0)
        for cells in (9, 17, 33):
            g = build_grid(3, 1.0, cells)
            op = assemble_operator(g, make_constant_media(A0, 1.0))
            x = g.centers()
            Lq = op.apply(0.5 * np.einsum("...i,ij,...j->...", x, Ai, x))
            worst = max(worst, float(np.abs(Lq[~outer_layer(g)] - 3.0).max()))
    # the quadratic is reproduced to round-off, so the order is fitted on a variable-coefficient field
    fld = get_preset("smooth3d").field
    hs, errs = [], []
    for cells in (17, 33, 65):
        g = build_grid(3, 0.5, cells)
        x = g.centers()
        Lu = assemble_operator(g, fld).apply(x[..., 0] ** 2 * x[..., 1] + x[..., 2] ** 2)
        sel = np.abs(x).max(axis=-1) <= 0.25
        pts = x[sel]
        exact = np.zeros(len(pts))
        e = 1e-4
        for i in range(3):
            for s in (1, -1):
                d = np.zeros(3)
                d[i] = s * e / 2
                q = pts + d
                gu = np.stack([2 * q[:, 0] * q[:, 1], q[:, 0] ** 2, 2 * q[:, 2]], axis=-1)
                exact += s * np.einsum("kij,kj->ki", fld.a(q), gu)[:, i] / e
        hs.append(g.h)
        errs.append(float(np.abs(Lu[sel] - exact).max()))
    order = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    wall = time.perf_counter() - t
    ok = worst <= 1e-10 and order >= 1.8 and wall < 5
    acceptance_record(2, "operator consistency", ok,
                      f"max |L q - n| = {worst:.1e} over 3 A0 x 3 grids, variable-media order {order:.2f}, "
                      f"{wall:.1f} s")
    assert ok


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_c03_obstacle_contract(name, acceptance_record):
    g = build_grid(3, 6.0, 97)
    t = time.perf_counter()
    s = make_setup(g, get_preset(name).field, 1.0, 1.5, 0.05, 10.0)
    res = run(s, [2.5, 5.0, 7.5, 10.0])
    wall = time.perf_counter() - t
    d = res.diagnostics
    rel = d.max_complementarity / s.f_norm
    ok = rel <= 1e-8 and d.min_u >= 0.0 and d.min_increment >= 0.0 and d.nested and d.steps == 200 and wall < 900
    acceptance_record(3, f"obstacle contract ({name})", ok,
                      f"complementarity {rel:.1e} |f|, min u {d.min_u:.1e}, min increment {d.min_increment:.1e}, "
                      f"nested {d.nested}, 97^3 x {d.steps} steps in {wall:.0f} s")
    assert ok


def test_c04_comparison(acceptance_record):
    rng = np.random.default_rng(20240601)
    g = build_grid(3, 4.0, 49)
    t = time.perf_counter()
    worst_u = worst_v = 0.0
    fails = 0
    for _ in range(10):
        fld = get_preset(PRESET_NAMES[rng.integers(len(PRESET_NAMES))]).field
        r_lo, r_hi = np.sort(rng.uniform(1.05, 1.6, 2))
        s_lo, s_hi = np.sort(rng.uniform(0.5, 1.5, 2))
        outs = [0.5, 1.0, 1.5, 2.0]
        lo = run(make_setup(g, fld, 0.75, 0.75 * r_lo, 0.1, 2.0, v0_scale=s_lo), outs)
        hi = run(make_setup(g, fld, 0.75, 0.75 * r_hi, 0.1, 2.0, v0_scale=s_hi), outs)
        rep = comparison_test(lo, hi, slack=1e-10)
        worst_u = max(worst_u, rep.max_u_violation)
        worst_v = max(worst_v, rep.max_v_violation)
        fails += not rep.passed
    wall = time.perf_counter() - t
    ok = fails == 0 and wall < 600
    acceptance_record(4, "comparison principle", ok,
                      f"10 ordered pairs on 49^3, max violation u {worst_u:.1e}, v {worst_v:.1e}, {wall:.0f} s")
    assert ok


def test_c05_greens(acceptance_record):
    t = time.perf_counter()
    ident = get_preset("identity")
    g = build_grid(3, 4.0, 65)
    tab = greens_for_media(ident.field, g, ident.known_homogenized)
    sel = tab.annulus(4 * g.h, g.R_box / 4)
    r = g.radius[sel]
    rel = float(np.abs(tab.G[sel] * 4 * math.pi * r - 1.0).max())
    lay = get_preset("layered")
    Cs = []
    for cells in (65, 129):
        gl = build_grid(3, 4.0, cells)
        tl = greens_for_media(lay.field, gl, lay.known_homogenized)
        Cs.append(bound_constant(tl, r_in=0.25, r_out=2.0))
    drift = abs(Cs[1] - Cs[0]) / Cs[0]
    wall = time.perf_counter() - t
    ok = rel <= 0.03 and drift <= 0.10 and all(np.isfinite(Cs)) and wall < 300
    acceptance_record(5, "Green's function", ok,
                      f"identity max rel err {rel:.2%} on 4h<=|x|<=R/4; layered C = {Cs[0]:.3f} -> {Cs[1]:.3f} "
                      f"({drift:.1%}), {wall:.0f} s")
    assert ok


def test_c06_rescaled_greens(acceptance_record):
    t = time.perf_counter()
    lay = get_preset("layered")
    # one solve at h = 1/8 on a box wide enough that every rescaled annulus stays inside R_box/2;
    # G^lam = lam^{(n-2)/n} G(lam^{1/n} x) is then an exact relabelling with h^lam = h lam^{-1/n}
    g = build_grid(3, 16.0, 257)
    tab = greens_for_media(lay.field, g, lay.known_homogenized)
    lams = (1, 8, 64, 512)
    d = [distance_to_F0(rescaled_greens(tab, lam), 0.5, 1.0, lay.known_homogenized) for lam in lams]
    wall = time.perf_counter() - t
    mono = all(b <= a for a, b in zip(d[:-1], d[1:]))
    ok = mono and d[-1] < 0.5 * d[0] and wall < 1200
    acceptance_record(6, "rescaled Green's convergence", ok,
                      "sup_{0.5<=|x|<=1}|G^lam - F0| = " + ", ".join(f"{x:.4g}" for x in d) +
                      f" for lam = {lams}, {wall:.0f} s")
    assert ok


def test_c07_growth_and_envelope(acceptance_record):
    t = time.perf_counter()
    ident = get_preset("identity")
    g = build_grid(3, 12.0, 97)
    T, t0 = 320.0, 4.0
    outs = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 320.0]
    s = make_setup(g, ident.field, 1.0, 1.5, 1.0, T)
    res = run(s, outs, keep_all_radii=True)
    ts = [a for a, _, _ in res.radius_series]
    rmax = [c for _, _, c in res.radius_series]
    slope, win = growth_fit(ts, rmax)
    F = explicit_evaluator(np.eye(3))
    k = outs.index(t0)
    sup = choose_supersolution(ident.field, F, g, res.v[k], t0, s.masks.k_mask)
    hq = build_quadratic_barrier(ident.field, g)
    sub = choose_subsolution(ident.field, F, hq, g, res.v[k], t0, s.masks.k_mask)
    env = envelope_check(res, sub.barrier, sup.barrier, t0)
    wall = time.perf_counter() - t
    ok = abs(slope - 1.0 / 3.0) <= 0.05 and env.passed_ordering and wall < 1200
    acceptance_record(7, "growth law and barrier envelope", ok,
                      f"slope {slope:.4f} on t in [{win[0]:g}, {win[1]:g}] (target 1/3), ordering violations "
                      f"sub {env.sub_violation:.1e} super {env.super_violation:.1e}, {wall:.0f} s")
    assert ok


def test_c08_barrier_feasibility(acceptance_record):
    t = time.perf_counter()
    g = build_grid(3, 3.0, 49)
    details = []
    ok = True
    for name in PRESET_NAMES:
        p = get_preset(name)
        fld = p.field
        hom = p.known_homogenized or solve_cell_problems(fld, 16)
        if fld.A0 is not None:
            F = explicit_evaluator(fld.A0)
        else:
            F = table_evaluator(greens_for_media(fld, g, hom))
        hq = build_quadratic_barrier(fld, g, hom)
        s = make_setup(g, fld, 0.75, 1.125, 0.1, 1.0)
        res = run(s, [1.0])
        snap = extract_free_boundary(g, res.v[0], 1.0, exclude=s.masks.k_mask)
        C_tilde = snap.min_radius / 1.0 ** (1.0 / 3.0)
        iv = find_c2(subsolution_constants(fld, F, hq, C_tilde), 1.0, 3)
        ok &= iv.nonempty
        details.append(f"{name} [{iv.lower:.3g}, {iv.upper:.3g}] at c2 = {iv.c2:.3g}")
    worst = 0.0
    for C1, C2 in ((12.0, 0.6), (20.0, 0.3), (4 * math.pi, 1.0)):
        b = SuperBarrier(C1, C2, explicit_evaluator(np.eye(3)))
        for Fx in (0.02, 0.08, 0.3, 1.0):
            for T in (0.5, 2.0, 10.0):
                x = np.array([[1.0 / (4 * math.pi * Fx), 0.0, 0.0]])
                q = integrate_barrier_quadrature(b, Fx, T)
                c = float(integrate_barrier(b, x, T)[0])
                if q > 0:
                    worst = max(worst, abs(c - q) / q)
    wall = time.perf_counter() - t
    ok = ok and worst <= 1e-6 and wall < 60
    acceptance_record(8, "barrier feasibility", ok,
                      "; ".join(details) + f"; integral vs quadrature {worst:.1e} rel, {wall:.0f} s")
    assert ok


def test_c09_selfsimilar(acceptance_record):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_a = worst_fd = worst_fp = 0.0
    for name in ("identity", "anisotropic", "layered"):
        hom = get_preset(name).known_homogenized
        ss = build_selfsimilar(4 * math.pi, hom)
        for tt in np.geomspace(0.1, 100.0, 7):
            worst_a = max(worst_a, ss.velocity_residual(tt))
            worst_fd = max(worst_fd, ss.velocity_residual_fd(tt))
        for _ in range(100):
            x = rng.uniform(-3, 3, 3)
            tt = rng.uniform(0.05, 10.0)
            lam = 10 ** rng.uniform(0, 4)
            V = float(ss.V(x, tt))
            worst_fp = max(worst_fp, abs(float(ss.rescale(x, tt, lam)) - V) / max(abs(V), 1.0))
    wall = time.perf_counter() - t
    ok = worst_a <= 1e-10 and worst_fd <= 1e-6 and worst_fp <= 1e-12 and wall < 1
    acceptance_record(9, "self-similar solution", ok,
                      f"velocity residual {worst_a:.1e} (closed form), {worst_fd:.1e} (differences), "
                      f"fixed point {worst_fp:.1e} at 300 points, {wall:.2f} s")
    assert ok


def test_c10_near_field(acceptance_record):
    t = time.perf_counter()
    ident = get_preset("identity")
    C1 = near_field_for_ball(ident.field, 1.0, 8.0, 97, ident.known_homogenized).C_star_estimate
    C2 = near_field_for_ball(ident.field, 2.0, 16.0, 97, ident.known_homogenized).C_star_estimate
    wall = time.perf_counter() - t
    e1 = abs(C1 / (4 * math.pi) - 1.0)
    e2 = abs(C2 / (2 * C1) - 1.0)
    ok = e1 <= 0.03 and e2 <= 0.03 and wall < 300
    acceptance_record(10, "near-field constant", ok,
                      f"C* = {C1:.4f} ({e1:.2%} from 4 pi), r_K = 2 gives {C2:.4f} = {C2 / C1:.4f} x, {wall:.0f} s")
    assert ok


def test_c11_main_convergence(acceptance_record):
    t = time.perf_counter()
    p = get_preset("layered")
    hom = p.known_homogenized
    C = near_field_for_ball(p.field, 0.5, 4.0, 97, hom).C_star_estimate
    rep = run_sweep(SweepConfig(p.field, hom, C, (1, 8, 64), r_K=0.5, R_box=2.25, cells=145, dt=0.05,
                                times=(1.0,), annulus=(0.5, 2.0)))
    wall = time.perf_counter() - t
    sv = rep.series(1.0, "sup_v")
    hd = rep.series(1.0, "hausdorff")
    sr = rep.series(1.0, "singularity_ratio")
    ok = all(rep.verdicts.values()) and wall < 3600
    acceptance_record(11, "main convergence sweep", ok,
                      "lam = 1, 8, 64: sup|v - V| " + ", ".join(f"{x:.4f}" for x in sv) +
                      "; Hausdorff " + ", ".join(f"{x:.4f}" for x in hd) +
                      f"; singularity ratio at lam = 64 {sr[-1]:.3f}; C* = {C:.4f}; {wall:.0f} s")
    assert ok


DETERMINISM_CONFIG = """
[media]
preset = layered
[grid]
R_box = 3
cells = 49
[source]
r_K = 0.75
r_omega = 1.125
[time]
dt = 0.1
T = 1
output_times = 0.5, 1
[greens]
R_box = 2
cells = 33
[nearfield]
R_box = 6
cells = 49
[sweep]
lambdas = 1, 8
R_box = 2.25
cells = 73
dt = 0.1
times = 0.5
annulus_inner = 0.4
annulus_outer = 1.5
[output]
seed = 11
"""


def test_c12_determinism(tmp_path, acceptance_record):
    t = time.perf_counter()
    stages = ["homogenize", "greens", "solve", "barriers", "nearfield", "selfsim", "sweep", "report"]
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        run_pipeline(parse_config_text(DETERMINISM_CONFIG), stages, out_dir=out)
        runs.append(out)
    csvs = sorted(p.name for p in runs[0].glob("*.csv"))
    same = [filecmp.cmp(runs[0] / c, runs[1] / c, shallow=False) for c in csvs]
    wall = time.perf_counter() - t
    ok = bool(csvs) and all(same) and sorted(p.name for p in runs[1].glob("*.csv")) == csvs
    acceptance_record(12, "determinism", ok, f"{sum(same)}/{len(csvs)} CSV files byte-identical, {wall:.0f} s")
    assert ok
