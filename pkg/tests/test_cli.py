import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dendrorecon import __version__, cli
from dendrorecon.mcmc import PosteriorDraws

FAST = ["--chains", "2", "--iters", "200", "--burn-in", "100", "--thin", "2", "--seed", "1"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--scenario", "micro", "--seed", "2", "--out", str(out)]) == 0
    return out


def inputs(sim_dir):
    return ["--rings", str(sim_dir / "rings.csv"), "--climate", str(sim_dir / "climate.csv")]


def test_simulate_outputs(sim_dir):
    truth = rows(sim_dir / "truth.csv")
    assert len(truth) == 60
    man = json.loads((sim_dir / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["seed"] == 2
    assert man["outputs"] == ["climate.csv", "rings.csv", "truth.csv"]
    assert len(man["config_hash"]) == 64


def test_standardize_and_calibrate(sim_dir, tmp_path):
    assert cli.main(["standardize", "--rings", str(sim_dir / "rings.csv"), "--method", "ts",
                     "--mean", "biweight", "--out", str(tmp_path / "s")]) == 0
    chron = rows(tmp_path / "s" / "chronology.csv")
    assert len(chron) == 60 and set(chron[0]) == {"year", "z", "sample_depth"}
    assert cli.main(["calibrate", "--chronology", str(tmp_path / "s" / "chronology.csv"),
                     "--climate", str(sim_dir / "climate.csv"), "--out", str(tmp_path / "c")]) == 0
    pred = rows(tmp_path / "c" / "predictions.csv")
    assert len(pred) == 30
    assert all(float(r["lo95"]) < float(r["xhat"]) < float(r["hi95"]) for r in pred)
    cal = json.loads((tmp_path / "c" / "calibration.json").read_text())
    assert cal["method"] == "inverse" and cal["n_calibration"] == 30


def test_fit_writes_draws_and_summary(sim_dir, tmp_path):
    out = tmp_path / "f"
    assert cli.main(["fit", *inputs(sim_dir), "--model", "m_ts_const", "--force", "--out", str(out), *FAST]) == 0
    draws = PosteriorDraws.load(out / "draws.npz")
    assert draws.model == "M_TS_const" and draws.n_chains == 2 and draws.n_saved == 50
    summ = rows(out / "summary.csv")
    assert len(summ) == 30
    diag = rows(out / "diagnostics.csv")
    assert diag[0]["quantity"] == "beta2"
    man = json.loads((out / "manifest.json").read_text())
    assert man["settings"]["sampler"]["iterations"] == 200


def test_fit_not_converged_exit_code(sim_dir, tmp_path):
    # an unreachable threshold forces the gate to fail
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sampler": {"rhat_threshold": 0.5}}))
    out = tmp_path / "f"
    code = cli.main(["fit", *inputs(sim_dir), "--config", str(cfg), "--draws-format", "csv",
                     "--out", str(out), *FAST])
    assert code == cli.EXIT_NOT_CONVERGED == 2
    assert (out / "draws.csv").exists()
    assert not (out / "summary.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["settings"]["converged"] is False


def test_config_overrides_flags(sim_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "M_TS_spl", "knot_spacing": 10, "sampler": {"iterations": 120}}))
    out = tmp_path / "f"
    assert cli.main(["fit", *inputs(sim_dir), "--config", str(cfg), "--force", "--out", str(out), *FAST]) == 0
    draws = PosteriorDraws.load(out / "draws.npz")
    assert draws.spec.name == "M_TS_spl" and draws.spec.knot_spacing == 10
    assert draws.n_saved == 10
    cfg.write_text(json.dumps({"sampler": {"warp": 9}}))
    assert cli.main(["fit", *inputs(sim_dir), "--config", str(cfg), "--out", str(out), *FAST]) == 1


def test_check_multistep_and_joint(sim_dir, tmp_path):
    assert cli.main(["check", *inputs(sim_dir), "--holdout", "first", "--model", "rcs_inverse",
                     "--out", str(tmp_path / "a")]) == 0
    res = json.loads((tmp_path / "a" / "holdout.json").read_text())
    assert res["method"] == "rcs_inverse" and res["n_held"] == 15
    assert cli.main(["check", *inputs(sim_dir), "--holdout", "second", "--out", str(tmp_path / "b"), *FAST]) == 0
    held = rows(tmp_path / "b" / "holdout.csv")
    assert len(held) == 15
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["settings"]["holdout"] == "second_half"


def test_residuals(sim_dir, tmp_path):
    fit = tmp_path / "f"
    assert cli.main(["fit", *inputs(sim_dir), "--force", "--out", str(fit), *FAST]) == 0
    assert cli.main(["residuals", "--fit", str(fit / "draws.npz"), *inputs(sim_dir),
                     "--out", str(tmp_path / "r")]) == 0
    res = rows(tmp_path / "r" / "residuals.csv")
    assert len(res) == 60
    summary = json.loads((tmp_path / "r" / "residuals.json").read_text())
    assert summary["longest_exceedance_years"] >= 0
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["settings"]["fit"] == "draws.npz" and len(man["settings"]["fit_sha256"]) == 64


def test_summary_and_basis(sim_dir, tmp_path):
    assert cli.main(["summary", *inputs(sim_dir), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "dataset.json").exists()
    assert cli.main(["summary", "--dump-basis", "--n", "100", "--knot-spacing", "20",
                     "--out", str(tmp_path / "b")]) == 0
    basis = np.loadtxt(tmp_path / "b" / "basis.csv", delimiter=",", skiprows=1)
    assert basis.shape == (100, 1 + 4 + 4)
    np.testing.assert_allclose(basis[:, 1:].sum(axis=1), 1.0, atol=1e-6)
    assert cli.main(["summary", "--out", str(tmp_path / "c")]) == 1


@pytest.mark.parametrize("argv", [
    [],
    ["fit", "--rings", "x.csv"],
    ["fit", "--rings", "missing.csv", "--climate", "missing.csv"],
    ["fit", "--rings", "a", "--climate", "b", "--model", "M_TS_cubic"],
    ["simulate", "--scenario", "arctic"],
    ["calibrate", "--chronology", "nope.csv", "--climate", "nope.csv"],
])
def test_invalid_input_exit_one(argv, tmp_path, capsys):
    assert cli.main([*argv, "--out", str(tmp_path)] if argv else argv) == 1
    assert capsys.readouterr().err


def test_bad_rings_file(tmp_path, capsys):
    bad = tmp_path / "rings.csv"
    bad.write_text("tree_id,year,width_mm\nA,2000,-1\n")
    clim = tmp_path / "climate.csv"
    clim.write_text("year,temperature_c\n2000,10\n")
    assert cli.main(["fit", "--rings", str(bad), "--climate", str(clim), "--out", str(tmp_path)]) == 1
    assert "dendrorecon fit" in capsys.readouterr().err


def test_version_and_entry_point():
    out = subprocess.run([sys.executable, "-m", "dendrorecon.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
