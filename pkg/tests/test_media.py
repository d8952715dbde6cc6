import numpy as np
import pytest

from stefanlab.media import (MediaError, PRESET_NAMES, get_preset, layered_homogenized, make_constant_media,
                             media_from_expressions, two_plus_sin, validate_media)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_validate(name):
    p = get_preset(name)
    rep = validate_media(p.field, samples=2000)
    assert rep.passed, rep.failures
    assert p.field.alpha > 0 and p.field.beta >= p.field.alpha
    assert p.field.m_g > 0 and p.field.M_g >= p.field.m_g


def test_unknown_preset():
    with pytest.raises(MediaError):
        get_preset("nope")


def test_constant_media_rejects_indefinite():
    with pytest.raises(MediaError):
        make_constant_media(np.array([[1.0, 2.0, 0], [2.0, 1.0, 0], [0, 0, 1]]), 1.0)


def test_constant_media_rejects_nonpositive_g():
    with pytest.raises(MediaError):
        make_constant_media(np.eye(3), 0.0)


def test_layered_closed_form():
    hom = layered_homogenized(two_plus_sin, 3)
    assert np.allclose(np.diag(hom.Q), [np.sqrt(3.0), 2.0, 2.0], atol=1e-12)
    assert abs(hom.L_avg - 1 / np.sqrt(3.0)) < 1e-12


def test_expression_media_matches_layered():
    fld = media_from_expressions({(0, 0): "2 + sin(2*pi*x1)", (1, 1): "2 + sin(2*pi*x1)",
                                  (2, 2): "2 + sin(2*pi*x1)"}, "2 + sin(2*pi*x1)")
    ref = get_preset("layered").field
    x = np.random.default_rng(1).uniform(-2, 2, (50, 3))
    assert np.allclose(fld.a(x), ref.a(x))
    assert np.allclose(fld.g(x), ref.g(x))


def test_expression_rejects_unknown_names():
    with pytest.raises(MediaError):
        media_from_expressions({(0, 0): "__import__('os')", (1, 1): "1", (2, 2): "1"}, "1")


def test_validation_catches_nonperiodic():
    fld = media_from_expressions({(0, 0): "2 + 0.1*x1", (1, 1): "2", (2, 2): "2"}, "1")
    assert not validate_media(fld, samples=500).passed
