import json
import math
from pathlib import Path

import numpy as np
import pytest

from stefanlab.cli import (DependencyError, RunManifest, emit_report, main, resolve_stages, run_pipeline)
from stefanlab.config import check_support_bound, parse_config, parse_config_text

QUICK = """
[media]
preset = identity
[grid]
R_box = 4
cells = 33
[time]
dt = 0.1
T = 2
output_times = 0.5, 1, 2
[greens]
R_box = 4
cells = 33
[nearfield]
R_box = 8
cells = 33
[sweep]
lambdas = 1, 8
R_box = 2.25
cells = 73
dt = 0.1
times = 0.5
annulus_inner = 0.4
annulus_outer = 1.5
"""


def test_dependency_error():
    with pytest.raises(DependencyError):
        resolve_stages(["sweep"])
    assert resolve_stages(["sweep"], strict=False) == ["homogenize", "nearfield", "sweep"]


def test_homogenize_constant_media(tmp_path):
    cfg = parse_config_text("[media]\npreset = anisotropic\n")
    man = run_pipeline(cfg, ["homogenize"], out_dir=tmp_path)
    Q = np.array(json.loads((tmp_path / "homogenize.json").read_text())["Q"])
    assert np.abs(Q - np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])).max() < 1e-10
    assert man.passed and "homogenize.json" in man.files


def test_empty_report(tmp_path):
    man = RunManifest("x", {}, str(tmp_path))
    emit_report(man)
    assert "no stages run" in (tmp_path / "summary.md").read_text()


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    cfg = parse_config_text(QUICK)
    man = run_pipeline(cfg, ["homogenize", "greens", "solve", "barriers", "nearfield", "selfsim", "sweep",
                             "report"], out_dir=out)
    return man, out


def test_manifest_lists_files(full_run):
    man, out = full_run
    for f in man.files:
        assert (out / f).exists(), f
    on_disk = {p.name for p in out.iterdir()}
    assert on_disk == set(man.files)
    assert set(man.verdicts) == {"homogenize", "greens", "solve", "barriers", "nearfield", "selfsim", "sweep"}


def test_report_series(full_run):
    _, out = full_run
    hdr = (out / "plot_growth_loglog.csv").read_text().splitlines()[0].split(",")
    assert "slope" in hdr and "target" in hdr
    target = np.loadtxt(out / "plot_growth_loglog.csv", delimiter=",", skiprows=1)[:, -1]
    assert np.allclose(target, 1 / 3)
    hdr = (out / "plot_lambda_distance.csv").read_text().splitlines()[0].split(",")
    assert "hausdorff_monotone" in hdr


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("STEFANLAB_OUTPUT_ROOT", str(tmp_path))
    assert main(["homogenize", "-s", "media.preset=identity"]) == 0
    assert (tmp_path / "out" / "homogenize.json").exists()
    assert '"L_avg"' in capsys.readouterr().out
    assert main(["solve", "-s", "grid.cells=64"]) == 2
    assert main(["run", "--stages", "sweep"]) == 2
    assert main(["report"]) == 0
    cfg = tmp_path / "c.ini"
    cfg.write_text("[solver]\ntol = 1e-9\n")
    # a failing verdict: zero Dirichlet data truncate G far more than the 3% check allows
    assert main(["greens", "-c", str(cfg), "-s", "greens.cells=33", "-s", "greens.boundary=zero"]) == 1


def test_example_config_passes_prechecks():
    cfg = parse_config(Path(__file__).resolve().parents[1] / "configs" / "layered_demo.ini")
    Q = np.diag([math.sqrt(3.0), 2.0, 2.0])
    assert check_support_bound(cfg, Q, 1 / math.sqrt(3.0)) < cfg["grid.R_box"]
