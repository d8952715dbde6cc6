import math

import numpy as np
import pytest

from stefanlab.greens import (delta_test, distance_to_F0, eval_F0, grad_F0, greens_for_media, kappa,
                              mirror_asymmetry, radial_profile, rescaled_greens, sphere_area)
from stefanlab.grid import GridError, build_grid
from stefanlab.media import get_preset


def test_constants():
    assert sphere_area(3) == pytest.approx(4 * math.pi)
    assert kappa(3) == pytest.approx(1 / (4 * math.pi))


def test_F0_identity_and_gradient():
    x = np.array([[1.0, 2.0, -0.5], [0.3, 0.1, 0.2]])
    r = np.linalg.norm(x, axis=1)
    assert np.allclose(eval_F0(np.eye(3), x), 1 / (4 * math.pi * r))
    Q = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])
    e = 1e-6
    fd = np.stack([(eval_F0(Q, x + e * d) - eval_F0(Q, x - e * d)) / (2 * e) for d in np.eye(3)], axis=-1)
    assert np.allclose(grad_F0(Q, x), fd, rtol=1e-6)
    with pytest.raises(ValueError):
        eval_F0(Q, np.zeros(3))


@pytest.mark.parametrize("Q", [np.eye(3), np.diag([np.sqrt(3.0), 2.0, 2.0]),
                               np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])])
def test_delta_normalisation(Q):
    dt = delta_test(Q)
    assert dt.relative_error < 1e-10
    assert dt.printed_variant == pytest.approx(3.0, rel=1e-10)


@pytest.fixture(scope="module")
def identity_table():
    g = build_grid(3, 2.0, 33)
    return greens_for_media(get_preset("identity").field, g, get_preset("identity").known_homogenized)


def test_identity_matches_F0(identity_table):
    g = identity_table.grid
    sel = identity_table.annulus(4 * g.h, g.R_box / 4 + 0.5)
    r = g.radius[sel]
    err = np.abs(identity_table.G[sel] * 4 * math.pi * r - 1).max()
    assert err < 0.03


def test_symmetry_and_profile(identity_table):
    assert mirror_asymmetry(identity_table) < 1e-8
    prof = radial_profile(identity_table)
    assert np.all(np.diff(prof[:, 1]) < 0)


def test_resample_is_exact_relabel(identity_table):
    t8 = rescaled_greens(identity_table, 8.0)
    assert t8.grid.R_box == pytest.approx(1.0)
    assert np.allclose(t8.G, 2.0 * identity_table.G)
    # identity media: F0 is invariant under the rescaling, so distances agree up to the factor
    d1 = distance_to_F0(identity_table, 0.5, 1.0)
    d8 = distance_to_F0(t8, 0.25, 0.5)
    assert d8 == pytest.approx(2.0 * d1, rel=1e-12)


def test_resolution_cap_variable_media():
    g = build_grid(3, 2.0, 17)
    p = get_preset("layered")
    with pytest.raises(GridError):
        greens_for_media(p.field, g, p.known_homogenized)
