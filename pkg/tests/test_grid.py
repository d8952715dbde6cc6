import numpy as np
import pytest

from stefanlab.grid import (GridError, assemble_operator, build_grid, embed_ball_boundary, mask_ball_source,
                            outer_layer)
from stefanlab.media import get_preset, make_constant_media

A0S = [np.diag([1.0, 2.0, 3.0]),
       np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]]),
       np.array([[1.5, 0.2, -0.1], [0.2, 1.2, 0.15], [-0.1, 0.15, 1.0]])]


@pytest.mark.parametrize("A0", A0S)
def test_quadratic_reproduced(A0):
    g = build_grid(3, 1.0, 17)
    op = assemble_operator(g, make_constant_media(A0, 1.0))
    x = g.centers()
    q = 0.5 * np.einsum("...i,ij,...j->...", x, np.linalg.inv(A0), x)
    Lq = op.apply(q)
    inner = ~outer_layer(g)
    assert np.abs(Lq[inner] - 3.0).max() < 1e-10


def test_grid_rejects_even_cells():
    with pytest.raises(GridError):
        build_grid(3, 1.0, 16)


def test_symmetric_negative_semidefinite():
    g = build_grid(3, 1.0, 13)
    op = assemble_operator(g, get_preset("smooth3d").field)
    rng = np.random.default_rng(0)
    inner = ~outer_layer(g)
    u = np.where(inner, rng.standard_normal(g.shape), 0.0)
    w = np.where(inner, rng.standard_normal(g.shape), 0.0)
    a = np.sum(w * op.neg_L(u))
    b = np.sum(u * op.neg_L(w))
    assert abs(a - b) < 1e-10 * abs(a)
    assert np.sum(u * op.neg_L(u)) > 0


def test_variable_consistency_order():
    # L applied to a smooth polynomial vs the exact operator, on a fixed interior point set
    fld = get_preset("smooth3d").field
    errs = []
    hs = []
    for cells in (17, 33, 65):
        g = build_grid(3, 0.5, cells)
        op = assemble_operator(g, fld)
        x = g.centers()
        u = x[..., 0] ** 2 * x[..., 1] + x[..., 2] ** 2
        Lu = op.apply(u)
        # exact: div(A grad u) by central differences of the flux on a fine stencil
        e = 1e-4
        pts = x[np.abs(x).max(axis=-1) <= 0.25]
        exact = np.zeros(len(pts))
        for i in range(3):
            for s in (1, -1):
                d = np.zeros(3)
                d[i] = s * e / 2
                p = pts + d
                gu = np.stack([2 * p[:, 0] * p[:, 1], p[:, 0] ** 2, 2 * p[:, 2]], axis=-1)
                flux = np.einsum("kij,kj->ki", fld.a(p), gu)[:, i]
                exact += s * flux / e
        sel = np.abs(x).max(axis=-1) <= 0.25
        errs.append(np.abs(Lu[sel] - exact).max())
        hs.append(g.h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 1.8


def test_ball_mask_resolution():
    g = build_grid(3, 2.0, 9)
    with pytest.raises(GridError):
        mask_ball_source(g, 0.5)


def test_embedded_boundary_keeps_symmetry():
    g = build_grid(3, 4.0, 33)
    m = mask_ball_source(g, 1.0)
    op = embed_ball_boundary(assemble_operator(g, get_preset("identity").field), m)
    rng = np.random.default_rng(2)
    act = m.active
    u = np.where(act, rng.standard_normal(g.shape), 0.0)
    w = np.where(act, rng.standard_normal(g.shape), 0.0)
    a = np.sum(w * op.neg_L(u, idx=m.free_idx))
    b = np.sum(u * op.neg_L(w, idx=m.free_idx))
    assert abs(a - b) < 1e-10 * abs(a)
