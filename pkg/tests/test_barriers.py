import numpy as np
import pytest

from stefanlab.barriers import (BarrierError, SuperBarrier, build_quadratic_barrier, choose_supersolution,
                                envelope_check, explicit_evaluator, find_c2, growth_fit, integrate_barrier,
                                integrate_barrier_quadrature, subsolution_constants, choose_subsolution)
from stefanlab.grid import build_grid
from stefanlab.media import get_preset, make_constant_media
from stefanlab.vi_solver import make_setup, run


def test_super_barrier_rejects_nonpositive_c2():
    F = explicit_evaluator(np.eye(3))
    with pytest.raises(BarrierError):
        SuperBarrier(1.0, 0.0, F)


@pytest.mark.parametrize("C1,C2", [(10.0, 0.5), (3.0, 2.0)])
def test_integral_closed_form(C1, C2):
    b = SuperBarrier(C1, C2, explicit_evaluator(np.eye(3)))
    for Fx in (0.05, 0.2, 1.0):
        x = np.array([[1.0 / (4 * np.pi * Fx), 0.0, 0.0]])
        closed = integrate_barrier(b, x, 5.0)[0]
        quad = integrate_barrier_quadrature(b, Fx, 5.0)
        assert closed == pytest.approx(quad, rel=1e-6)


def test_quadratic_barrier_constant_media():
    A0 = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])
    g = build_grid(3, 2.0, 17)
    hq = build_quadratic_barrier(make_constant_media(A0, 1.0), g)
    x = np.array([[0.3, -0.2, 0.5]])
    assert hq.value(x)[0] == pytest.approx(0.5 * x[0] @ np.linalg.solve(A0, x[0]))
    assert 0 < hq.c_low <= hq.c_high


def test_quadratic_barrier_variable_media():
    p = get_preset("layered")
    g = build_grid(3, 3.0, 49)
    hq = build_quadratic_barrier(p.field, g, p.known_homogenized)
    assert hq.residual < 1e-6
    assert hq.c_low > 0


@pytest.mark.parametrize("name", ["identity", "anisotropic"])
def test_feasibility_interval_nonempty(name):
    p = get_preset(name)
    F = explicit_evaluator(p.field.A0)
    hq = build_quadratic_barrier(p.field, build_grid(3, 2.0, 17))
    consts = subsolution_constants(p.field, F, hq, 0.8)
    iv = find_c2(consts, 1.0, 3)
    assert iv.nonempty and iv.lower < iv.upper


@pytest.fixture(scope="module")
def short_run():
    g = build_grid(3, 4.0, 33)
    s = make_setup(g, get_preset("identity").field, 1.0, 1.5, 0.1, 2.0)
    return run(s, [0.5, 1.0, 1.5, 2.0], keep_all_radii=True)


def test_envelope_ordering(short_run):
    s = short_run.setup
    fld = get_preset("identity").field
    F = explicit_evaluator(np.eye(3))
    sup = choose_supersolution(fld, F, s.grid, short_run.v[0], 0.5, s.masks.k_mask)
    assert sup.dominates_snapshot and sup.above_one_on_K and sup.fb_margin >= 0
    hq = build_quadratic_barrier(fld, s.grid)
    sub = choose_subsolution(fld, F, hq, s.grid, short_run.v[0], 0.5, s.masks.k_mask)
    assert sub.interval.nonempty
    env = envelope_check(short_run, sub.barrier, sup.barrier, 0.5)
    assert env.passed_ordering, env


def test_growth_fit_exact_power():
    t = np.geomspace(1, 100, 50)
    slope, win = growth_fit(t, 2.0 * t ** (1 / 3))
    assert slope == pytest.approx(1 / 3, abs=1e-12)
    assert win[0] == pytest.approx(10.0, rel=0.1)


def test_supersolution_support_decays():
    b = SuperBarrier(5.0, 0.5, explicit_evaluator(np.eye(3)))
    x = np.array([[3.0, 0.0, 0.0]])
    assert b.evaluate(x, 0.01)[0] == 0.0
    assert b.evaluate(x, 1e4)[0] > 0.0
