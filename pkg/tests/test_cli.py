import json
from pathlib import Path

import numpy as np
import pytest

from momentfit.cli import main
from momentfit.shapes import read_points


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    code = run("generate", "--shape", "elliptic-cone", "--count", 3000,
               "--noise-level", 0.2, "--seed", 7, "--output", out)
    assert code == 0
    return out


def test_generate_outputs(generated):
    meta = json.loads((generated / "elliptic-cone_meta.json").read_text())
    clean = read_points(generated / "elliptic-cone_noiseless.csv")
    noisy = read_points(generated / "elliptic-cone_noisy.csv")
    assert clean.shape == noisy.shape == (3000, 3)
    assert meta["seed"] == 7
    assert meta["u_actual"] == pytest.approx(0.2 * meta["max_abs"])
    assert meta["max_abs"] == pytest.approx(0.5)  # normalized by default
    assert np.abs(noisy - clean).max() <= meta["u_actual"]
    assert (generated / "elliptic-cone_noisy.png").exists()


def test_generate_reproducible(generated, tmp_path):
    out2 = tmp_path / "again"
    assert run("generate", "--shape", "elliptic-cone", "--count", 3000,
               "--noise-level", 0.2, "--seed", 7, "--output", out2, "--no-plot") == 0
    for name in ("elliptic-cone_noiseless.csv", "elliptic-cone_noisy.csv"):
        assert (generated / name).read_bytes() == (out2 / name).read_bytes()


def test_generate_zero_level_files_match(tmp_path):
    assert run("generate", "--shape", "unit-circle", "--count", 100,
               "--noise-level", 0, "--seed", 3, "--output", tmp_path, "--no-plot") == 0
    clean = (tmp_path / "unit-circle_noiseless.csv").read_bytes()
    noisy = (tmp_path / "unit-circle_noisy.csv").read_bytes()
    assert clean == noisy


def test_generate_unknown_shape(tmp_path, capsys):
    assert run("generate", "--shape", "nonexistent", "--count", 10,
               "--output", tmp_path) == 1
    assert "unknown shape" in capsys.readouterr().err


def test_build_plan_deterministic(tmp_path):
    basis = '{"n": 3, "gamma": 2, "kind": "monomial", "omega": null}'
    p1, p2 = tmp_path / "a.plan", tmp_path / "b.plan"
    assert run("build-plan", "--basis", basis, "--output", p1) == 0
    assert run("build-plan", "--basis", basis, "--output", p2) == 0
    assert p1.read_bytes() == p2.read_bytes()


def test_build_plan_trig_contains_harmonic_moments(tmp_path):
    basis = '{"n": 1, "gamma": 2, "kind": "poly-trig", "omega": 2.0}'
    out = tmp_path / "trig.plan"
    assert run("build-plan", "--basis", basis, "--output", out) == 0
    doc = json.loads(out.read_bytes())
    assert doc["format_version"] == 1
    blob = out.read_text()
    assert '"cos"' in blob and '"sin"' in blob


def test_build_plan_capacity_exit_code(tmp_path, capsys):
    basis = '{"n": 6, "gamma": 6, "kind": "monomial", "omega": null}'
    assert run("build-plan", "--basis", basis, "--output", tmp_path / "x.plan") == 2
    assert "error" in capsys.readouterr().err


def test_fit_and_eval_pipeline(generated, tmp_path):
    result = tmp_path / "fit.json"
    meta = json.loads((generated / "elliptic-cone_meta.json").read_text())
    assert run("fit", "--input", generated / "elliptic-cone_noisy.csv",
               "--basis", json.dumps(meta["basis_spec"]),
               "--theta", meta["u_actual"], "--output", result,
               "--export-level-set", tmp_path / "mesh.obj",
               "--resolution", 48, "--bbox=-0.7:0.7") == 0
    doc = json.loads(result.read_text())
    assert doc["mode"] == "plain"
    assert doc["theta_used"] == pytest.approx(meta["u_actual"])
    a_star = np.asarray(meta["a_star"])
    a_fit = np.asarray(doc["coefficients"])
    # a_star is in the raw cone frame; the generated cloud is normalized, so
    # compare against the normalized-frame truth
    from momentfit.basis import BasisSpec
    from momentfit.evaluation import cosine_similarity
    from momentfit.shapes import map_coefficients_to_normalized_frame
    from momentfit.fitter import AffineTransform
    clean = read_points(generated / "elliptic-cone_noiseless.csv")
    assert (tmp_path / "mesh.obj").exists()
    assert (tmp_path / "mesh.png").exists()

    report = tmp_path / "report.json"
    assert run("eval", "--noiseless", generated / "elliptic-cone_noiseless.csv",
               "--fit-result", result, "--metadata", generated / "elliptic-cone_meta.json",
               "--bbox=-0.7:0.7", "--resolution", 64,
               "--output", report, "--no-plot") == 0
    rep = json.loads(report.read_text())
    assert 0.0 <= rep["cosine_similarity"] <= 1.0
    assert rep["loss"] >= 0.0


def test_grid_search_cli(generated, tmp_path):
    meta = json.loads((generated / "elliptic-cone_meta.json").read_text())
    prefix = tmp_path / "scan"
    assert run("grid-search", "--input", generated / "elliptic-cone_noisy.csv",
               "--basis", json.dumps(meta["basis_spec"]),
               "--grid", "0:0.5:0.05",
               "--metadata", generated / "elliptic-cone_meta.json",
               "--output", prefix) == 0
    doc = json.loads(prefix.with_suffix(".json").read_text())
    assert doc["level_star"] == pytest.approx(0.2, abs=0.1)
    rows = prefix.with_suffix(".csv").read_text().strip().splitlines()
    assert rows[0] == "level,theta,sigma_min"
    assert len(rows) == 1 + len(doc["levels"])
    assert prefix.with_suffix(".png").exists()


def test_fit_missing_input_exit_code(tmp_path, capsys):
    assert run("fit", "--input", tmp_path / "nope.csv",
               "--basis", '{"n": 2, "gamma": 1, "kind": "monomial", "omega": null}',
               "--theta", 0.1, "--output", tmp_path / "out.json") == 1
    assert "not found" in capsys.readouterr().err


def test_fit_requires_theta_or_grid(generated, tmp_path, capsys):
    assert run("fit", "--input", generated / "elliptic-cone_noisy.csv",
               "--basis", '{"n": 3, "gamma": 2, "kind": "monomial", "omega": null}',
               "--output", tmp_path / "out.json") == 2
    assert "--theta or --grid" in capsys.readouterr().err


def test_inputs_not_mutated(generated):
    before = (generated / "elliptic-cone_noisy.csv").read_bytes()
    meta = json.loads((generated / "elliptic-cone_meta.json").read_text())
    out = generated / "tmp_fit.json"
    run("fit", "--input", generated / "elliptic-cone_noisy.csv",
        "--basis", json.dumps(meta["basis_spec"]),
        "--theta", meta["u_actual"], "--output", out)
    assert (generated / "elliptic-cone_noisy.csv").read_bytes() == before
