import json
import logging

import numpy as np
import pytest

from thedra.cli import main
from thedra.cloud_io import CloudFormatError, read_cloud, write_ply_ascii, write_xyz
from thedra.geom_core import PointCloud
from thedra.pipeline import RunConfig, StageError, reconstruct
from thedra.thedron import import_obj
from thedra.tsurface_gen import benchmark_spec, sample_tsurface_points


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--out", str(d / "bench"), "--points", "4000", "--variance", "1e-6",
                 "--seed", "3", "-m", "8", "-n", "8"]) == 0
    return d


def test_generate_outputs_and_manifest(generated):
    man = json.loads((generated / "bench.manifest.json").read_text())
    assert man["axis"] == [0.0, 0.0, 1.0]
    assert man["variance"] == 1e-6 and man["points"] == 4000
    assert read_cloud(generated / "bench.xyz").points.shape == (4000, 3)
    assert import_obj((generated / "bench.truth.obj").read_bytes()).shape == (9, 9, 3)


def test_generate_reproducible(tmp_path):
    for k in (1, 2):
        assert main(["generate", "--out", str(tmp_path / f"a{k}"), "--points", "500", "--variance", "1e-3",
                     "--seed", "9"]) == 0
    assert (tmp_path / "a1.xyz").read_bytes() == (tmp_path / "a2.xyz").read_bytes()
    assert (tmp_path / "a1.truth.obj").read_bytes() == (tmp_path / "a2.truth.obj").read_bytes()


def test_generate_zero_variance_is_noiseless(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "z"), "--points", "300", "--variance", "0",
                 "--seed", "5", "--format", "ply"]) == 0
    P = read_cloud(tmp_path / "z.ply").points
    assert np.allclose(P, sample_tsurface_points(benchmark_spec(), 300, seed=5), atol=1e-12)


def test_generate_usage_error(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "x"), "--variance", "-1"]) == 2


def test_reconstruct_missing_input(tmp_path, capsys):
    code = main(["reconstruct", "--input", str(tmp_path / "nope.xyz"), "--out", str(tmp_path / "r")])
    assert code == 2
    assert "input not found" in capsys.readouterr().err


def test_reconstruct_bad_flag_is_usage_error(tmp_path):
    assert main(["reconstruct", "--input", "x", "--out", "y", "--axis", "1,2"]) == 2
    assert main(["reconstruct"]) == 2


def test_reconstruct_end_to_end(generated, tmp_path, caplog):
    out = tmp_path / "run"
    with caplog.at_level(logging.INFO, logger="thedra"):
        code = main(["reconstruct", "--input", str(generated / "bench.xyz"), "--out", str(out), "-m", "8",
                     "-n", "8", "--max-iters", "30", "--axis", "0,0,1", "--seed", "1"])
    assert code == 0
    assert "axis override given; estimation skipped" in caplog.text
    metrics = json.loads((tmp_path / "run_metrics.json").read_text())
    for key in ("axis_candidates", "axis", "angular_deviation", "initial_rms", "final_rms", "max_G1",
                "max_G2", "angular_deviation_table"):
        assert key in metrics
    assert metrics["axis_source"] == "override"
    assert metrics["final_rms"] <= metrics["initial_rms"] * 1.0001
    assert metrics["final_rms_relative"] <= 0.01
    assert metrics["max_G1"] <= 1e-9 and metrics["max_G2"] <= 1e-9
    assert import_obj((tmp_path / "run_final.obj").read_bytes()).shape == (9, 9, 3)
    assert (tmp_path / "run_initial.obj").exists()
    assert (tmp_path / "run_iterations.csv").read_text().startswith("iteration,L,F")


def test_reconstruct_stage_failure_writes_partial(tmp_path, capsys):
    # a flat disc has no slices with two usable trajectories
    rng = np.random.default_rng(0)
    P = np.c_[rng.uniform(-1, 1, (400, 2)), np.zeros(400)]
    write_xyz(tmp_path / "flat.xyz", P)
    code = main(["reconstruct", "--input", str(tmp_path / "flat.xyz"), "--out", str(tmp_path / "f"),
                 "--axis", "0,0,1"])
    assert code == 1
    err = capsys.readouterr().err
    assert "[initial_guess]" in err and "hint" in err
    assert (tmp_path / "f_metrics.json.partial").exists()


def test_run_config_validation():
    with pytest.raises(StageError):
        reconstruct(PointCloud(np.random.default_rng(0).normal(size=(50, 3))), RunConfig(m=1))
    with pytest.raises(StageError):
        RunConfig(slice_q1=0.5, slice_q2=0.5).validate()


def test_curves_circle_evolute_point(tmp_path):
    assert main(["curves", "--out", str(tmp_path / "c"), "--beta", "0"]) == 0
    data = json.loads((tmp_path / "c.json").read_text())
    pts = np.array(data["results"][0]["points"])
    assert np.max(np.abs(pts)) < 1e-9
    assert data["results"][0]["identically_singular"]
    assert "<svg" in (tmp_path / "c.svg").read_text()


def test_curves_involutes(tmp_path):
    assert main(["curves", "--out", str(tmp_path / "i"), "--mode", "involute", "--beta", str(np.pi / 4),
                 "--t-range", f"0,{np.pi / 2}", "--samples", "401"]) == 0
    data = json.loads((tmp_path / "i.json").read_text())
    assert [r["d"] for r in data["results"]] == [1.0, 2.0, 3.0]


def test_curves_ellipse_four_singularities(tmp_path):
    assert main(["curves", "--out", str(tmp_path / "e"), "--curve", "ellipse", "--axes", "2,1"]) == 0
    data = json.loads((tmp_path / "e.json").read_text())
    assert len(data["results"][0]["singular_params"]) == 4


def test_curves_bad_beta(tmp_path):
    assert main(["curves", "--out", str(tmp_path / "b"), "--beta", "2"]) == 2


def test_cloud_io_roundtrip_and_errors(tmp_path):
    P = np.random.default_rng(1).normal(size=(20, 3))
    write_xyz(tmp_path / "a.xyz", P)
    write_ply_ascii(tmp_path / "a.ply", P)
    assert np.array_equal(read_cloud(tmp_path / "a.xyz").points, P)
    assert np.array_equal(read_cloud(tmp_path / "a.ply").points, P)
    (tmp_path / "bad.xyz").write_text("1 2 3\n1 2 x\n" + "0 0 0\n" * 5)
    with pytest.raises(CloudFormatError, match="2"):
        read_cloud(tmp_path / "bad.xyz")


def test_reconstruct_estimates_axis_and_reports_deviation(generated, tmp_path):
    code = main(["reconstruct", "--input", str(generated / "bench.xyz"), "--out", str(tmp_path / "e"), "-m", "8",
                 "-n", "8", "--max-iters", "30"])
    assert code == 0
    metrics = json.loads((tmp_path / "e_metrics.json").read_text())
    assert metrics["axis_source"] == "estimated"
    assert len(metrics["axis_candidates"]) >= 1
    table = metrics["angular_deviation_table"]
    assert table["Angular Deviation Before Elapse"] < 0.5
    assert metrics["final_rms_relative"] <= 0.01
