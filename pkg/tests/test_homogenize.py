import numpy as np
import pytest

from stefanlab.homogenize import averaging_check, gaussian_bump, solve_cell_problems, sqrt_spd, voigt_reuss
from stefanlab.media import MediaError, get_preset, make_constant_media


def test_constant_media_reproduce_A0():
    A0 = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])
    hom = solve_cell_problems(make_constant_media(A0, 2.0), 16)
    assert np.abs(hom.Q - A0).max() < 1e-10
    assert hom.L_avg == pytest.approx(0.5)


def test_layered_exact():
    p = get_preset("layered")
    hom = solve_cell_problems(p.field, 32)
    assert np.abs(hom.Q - p.known_homogenized.Q).max() < 1e-8
    assert abs(hom.L_avg - p.known_homogenized.L_avg) < 1e-8


def test_smooth_media_converges_and_is_bounded():
    fld = get_preset("smooth3d").field
    q = [solve_cell_problems(fld, N).Q for N in (16, 32, 64)]
    d1 = np.abs(q[1] - q[0]).max()
    d2 = np.abs(q[2] - q[1]).max()
    assert d2 < d1 / 3.0          # second-order refinement ratio is 4
    reuss, voigt = voigt_reuss(fld)
    assert np.linalg.eigvalsh(q[2] - reuss).min() > -1e-8
    assert np.linalg.eigvalsh(voigt - q[2]).min() > -1e-8
    assert np.allclose(q[2], q[2].T)


def test_sqrt_spd():
    Q = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])
    P = sqrt_spd(Q)
    assert np.allclose(P @ P, Q, atol=1e-14)
    assert np.allclose(P, P.T)
    with pytest.raises(MediaError):
        sqrt_spd(-Q)


def test_resolution_floor():
    with pytest.raises(ValueError):
        solve_cell_problems(get_preset("layered").field, 8)


@pytest.mark.parametrize("name", ["layered", "smooth3d"])
def test_averaging_decreases(name):
    fld = get_preset(name).field
    hom = solve_cell_problems(fld, 16)
    rows = averaging_check(fld, gaussian_bump(), [0.5, 0.25, 0.125], L_avg=hom.L_avg)
    errs = [r.error for r in rows]
    assert errs[1] < errs[0] and errs[2] <= errs[1] + 1e-12
