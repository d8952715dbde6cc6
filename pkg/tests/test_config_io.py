import numpy as np
import pytest

from stefanlab import io as sio
from stefanlab.config import ConfigError, check_support_bound, echo, parse_config, parse_config_text
from stefanlab.grid import build_grid


def test_defaults_valid_and_echoed():
    cfg = parse_config_text("")
    assert cfg["grid.cells"] % 2 == 1
    assert cfg.derived["h"] == pytest.approx(2 * cfg["grid.R_box"] / (cfg["grid.cells"] - 1))
    text = echo(cfg)
    assert "[grid]" in text and "derived h" in text


def test_hash_stable_under_reserialization():
    cfg = parse_config_text("[media]\npreset = layered\n[time]\nT = 3\noutput_times = 1, 3\n")
    again = parse_config_text(echo(cfg))
    assert again.digest() == cfg.digest()


@pytest.mark.parametrize("text,key", [
    ("[grid]\nbogus = 1\n", "grid.bogus"),
    ("[nosuch]\na = 1\n", "nosuch"),
    ("[grid]\ncells = 64\n", "grid.cells"),
    ("[sweep]\nlambdas = 1, 1e9\n", "sweep.lambdas"),
    ("[greens]\nlambdas = 1e9\n", "greens.lambdas"),
    ("[time]\noutput_times = 0.55\n", "time.output_times"),
    ("[solver]\ntol = 0\n", "solver.tol"),
])
def test_distinct_diagnostics(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.key == key


def test_cap_message_cites_bound():
    with pytest.raises(ConfigError, match=r"lambda\^\(-1/n\)/8"):
        parse_config_text("[sweep]\nlambdas = 1e9\n")


def test_support_bound():
    cfg = parse_config_text("[grid]\nR_box = 3\n[time]\nT = 200\noutput_times = 1\n")
    with pytest.raises(ConfigError, match=r"box too small"):
        check_support_bound(cfg, np.eye(3), 1.0)
    cfg = parse_config_text("[grid]\nR_box = 3\n[time]\nT = 200\noutput_times = 1\n"
                            "[solver]\nsupport_constant = 0.4\n")
    assert check_support_bound(cfg, np.eye(3), 1.0) == pytest.approx(0.4 * 200 ** (1 / 3))


def test_overrides_and_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[grid]\ncells = 33\n")
    cfg = parse_config(p, {"grid.cells": "41"})
    assert cfg["grid.cells"] == 41
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.ini")


def test_field_roundtrip(tmp_path):
    g = build_grid(3, 1.5, 9)
    f = np.random.default_rng(0).standard_normal(g.shape)
    sio.write_field(tmp_path / "f.bin", g, f)
    g2, f2 = sio.read_field(tmp_path / "f.bin")
    assert g2 == g and np.array_equal(f, f2)


def test_csv_full_precision(tmp_path):
    x = 0.1 + 0.2
    sio.write_csv(tmp_path / "t.csv", ["a", "b"], [(x, 3)])
    hdr, data = sio.read_csv(tmp_path / "t.csv")
    assert hdr == ["a", "b"] and data[0, 0] == x
