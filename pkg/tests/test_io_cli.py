import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mvpibp.cli import main
from mvpibp.genprior import simulate_mvpibp
from mvpibp.io import (ArchiveConflict, PosteriorArchive, RunConfig, ValidationError, load_config,
                       load_covariates_csv, load_occurrence_csv, read_draw_table, save_occurrence_csv,
                       write_draw_table)
from mvpibp.model import FeatureMatrix, Identity, calibrate


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_identity_file(tmp_path):
    Y = load_occurrence_csv(_write(tmp_path / "y.csv", "sample,a,b\ns1,1,0\ns2,0,1\n"))
    np.testing.assert_array_equal(Y.entries, np.eye(2))
    assert Y.feature_ids == ["a", "b"] and Y.sample_ids == ["s1", "s2"]


def test_round_trip_simulated_matrix(tmp_path):
    Y = simulate_mvpibp(calibrate(10, 300), Identity(), 80, np.random.default_rng(0)).matrix
    assert not Y.entries.any(axis=0).all()  # all-zero columns are part of the round trip
    path = str(tmp_path / "y.csv")
    save_occurrence_csv(Y, path)
    Z = load_occurrence_csv(path)
    assert np.array_equal(Z.entries, Y.entries)
    assert Z.sample_ids == Y.sample_ids and Z.feature_ids == Y.feature_ids


@pytest.mark.parametrize("text,fragment", [
    ("s,a,b\nx,1,2\n", "(row 1, col 2)"),
    ("s,a,b\nx,1,0\ny,0,yes\n", "(row 2, col 2)"),
    ("s,a,a\nx,1,0\n", "duplicate feature id 'a'"),
    ("s,a\nx,1\nx,0\n", "duplicate sample id 'x'"),
    ("s,a,b\nx,1\n", "line 2: expected 3 cells"),
    ("s\nx\n", "no feature columns"),
    ("s,a\n", "no sample rows"),
])
def test_occurrence_errors(tmp_path, text, fragment):
    with pytest.raises(ValidationError) as err:
        load_occurrence_csv(_write(tmp_path / "bad.csv", text))
    assert fragment in str(err.value)


def test_missing_file():
    with pytest.raises(ValidationError, match="file not found"):
        load_occurrence_csv("/nonexistent/y.csv")


def test_covariates_alignment_and_errors(tmp_path):
    p = _write(tmp_path / "x.csv", "sample,temp,site\ns2,2.5,1\ns1,-1,0\n")
    X, names = load_covariates_csv(p, ["s1", "s2"])
    assert names == ["temp", "site"]
    np.testing.assert_array_equal(X, [[-1, 0], [2.5, 1]])
    with pytest.raises(ValidationError, match="2 covariate rows but the occurrence data has 3 samples"):
        load_covariates_csv(p, ["s1", "s2", "s3"])
    with pytest.raises(ValidationError, match="'s9'"):
        load_covariates_csv(p, ["s1", "s9"])
    bad = _write(tmp_path / "bad.csv", "sample,t\ns1,warm\n")
    with pytest.raises(ValidationError, match=r"\(row 1, col 1\)"):
        load_covariates_csv(bad)


def test_draw_table_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tables = {"alpha": rng.gamma(2, size=5), "pi": rng.random((5, 3)), "sigma": rng.random((5, 2, 2))}
    path = str(tmp_path / "d.csv")
    write_draw_table(path, tables)
    with open(path) as fh:
        assert fh.readline().strip() == "parameter:str,index:int,iteration:int,value:float"
    back = read_draw_table(path)
    np.testing.assert_array_equal(back["alpha"][:, 0], tables["alpha"])
    np.testing.assert_array_equal(back["pi"], tables["pi"])
    np.testing.assert_array_equal(back["sigma"], tables["sigma"].reshape(5, 4))


def test_run_config_validation_and_hash():
    with pytest.raises(ValidationError):
        RunConfig(method="bogus")
    with pytest.raises(ValidationError):
        RunConfig(iterations=10, burn_in=10)
    with pytest.raises(ValidationError):
        RunConfig(thin=0)
    with pytest.raises(ValidationError):
        RunConfig(P=1)
    with pytest.raises(ValidationError, match="unknown config keys"):
        RunConfig.from_mapping({"colour": "red"})
    with pytest.raises(ValidationError, match="cannot parse"):
        RunConfig.from_mapping({"iterations": "many"})
    a = RunConfig.from_mapping({"iterations": "300", "burn_in": "100", "alpha": "2.5"})
    assert a.iterations == 300 and a.alpha == 2.5
    assert a.hash("d1") == a.hash("d1") != a.hash("d2")
    assert a.hash() != RunConfig.from_mapping({"iterations": "300", "burn_in": "100", "alpha": "2.6"}).hash()


def test_load_config(tmp_path):
    p = _write(tmp_path / "c.cfg", "# settings\nmethod = ibp\nburn-in = 20  # short\n\niterations=50\n")
    assert load_config(p) == {"method": "ibp", "burn_in": "20", "iterations": "50"}
    with pytest.raises(ValidationError, match="line 1"):
        load_config(_write(tmp_path / "bad.cfg", "method ibp\n"))


def test_archive_row_count_and_conflict(tmp_path):
    arch = PosteriorArchive(str(tmp_path / "a"))
    man = {"config_hash": "h1", "n_kept": 3}
    with pytest.raises(ValueError, match="expected 3"):
        arch.write(man, {"alpha": np.ones(4)})
    arch.write(man, {"alpha": np.ones(3)}, {"mean": np.eye(2)})
    assert arch.exists() and arch.draws()["alpha"].shape == (3, 1)
    assert arch.summary()["mean"].shape == (1, 4)
    with pytest.raises(ArchiveConflict):
        arch.write({"config_hash": "h2", "n_kept": 3}, {"alpha": np.ones(3)})
    arch.write({"config_hash": "h2", "n_kept": 3}, {"alpha": np.ones(3)}, force=True)
    assert arch.manifest()["config_hash"] == "h2"


# -- command line ---------------------------------------------------------------

@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--method", "factor", "--alpha", "10", "--trunc", "60", "-n", "30",
                 "--seed", "7", "--out", str(d)]) == 0
    return d


def test_simulate_outputs(sim_dir):
    Y = load_occurrence_csv(str(sim_dir / "occurrence.csv"))
    assert (Y.n, Y.p) == (30, 60)
    truth = read_draw_table(str(sim_dir / "truth.csv"))
    assert {"beta", "pi", "sigma"} <= set(truth)
    info = json.loads((sim_dir / "simulation.json").read_text())
    assert info["pstar"] == int(Y.entries.any(axis=0).sum())


def test_simulate_is_deterministic(sim_dir, tmp_path):
    assert main(["simulate", "--method", "factor", "--alpha", "10", "--trunc", "60", "-n", "30",
                 "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("occurrence.csv", "truth.csv", "simulation.json"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


@pytest.mark.parametrize("method", ["ibp", "factor", "twostage-hier", "twostage-common", "flat-ablation"])
def test_fit_each_method_and_replay(sim_dir, tmp_path, method):
    data = str(sim_dir / "occurrence.csv")
    args = ["fit", "--method", method, "--data", data, "--trunc", "60", "--iters", "30", "--burnin", "10",
            "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("draws.csv", "summary.csv", "manifest.json"):
        pa, pb = tmp_path / "a" / name, tmp_path / "b" / name
        if pa.exists():
            assert pa.read_bytes() == pb.read_bytes(), name
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["n_kept"] == 20 and man["seed"] == 3 and len(man["config_hash"]) == 16
    draws = PosteriorArchive(str(tmp_path / "a")).draws()
    assert all(v.shape[0] == 20 for v in draws.values())


def test_fit_refuses_different_config(sim_dir, tmp_path):
    data = str(sim_dir / "occurrence.csv")
    base = ["fit", "--method", "ibp", "--data", data, "--trunc", "60", "--burnin", "10", "--out", str(tmp_path)]
    assert main(base + ["--iters", "30"]) == 0
    assert main(base + ["--iters", "30"]) == 0  # same hash: allowed
    assert main(base + ["--iters", "40"]) == 2
    assert main(base + ["--iters", "40", "--force"]) == 0


def test_fit_covariates_row_mismatch(sim_dir, tmp_path):
    cov = _write(tmp_path / "x.csv", "sample,x\ns1,0.5\ns2,1.0\n")
    rc = main(["fit", "--method", "twostage-cov", "--data", str(sim_dir / "occurrence.csv"),
               "--covariates", cov, "--trunc", "60", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert not (tmp_path / "o" / "manifest.json").exists()


def test_fit_covariate_model(sim_dir, tmp_path):
    Y = load_occurrence_csv(str(sim_dir / "occurrence.csv"))
    x = np.random.default_rng(0).standard_normal(Y.n)
    cov = _write(tmp_path / "x.csv", "sample,x\n" + "".join(f"{s},{float(v)!r}\n" for s, v in zip(Y.sample_ids, x)))
    out = tmp_path / "o"
    assert main(["fit", "--method", "twostage-cov", "--data", str(sim_dir / "occurrence.csv"),
                 "--covariates", cov, "--trunc", "60", "--iters", "16", "--burnin", "4", "--out", str(out)]) == 0
    assert "coef" in PosteriorArchive(str(out)).draws()


def test_exit_codes(tmp_path, sim_dir):
    assert main(["fit", "--method", "ibp", "--out", str(tmp_path)]) == 2  # no data
    assert main(["fit", "--method", "ibp", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    bad = _write(tmp_path / "bad.csv", "s,a\nx,3\n")
    assert main(["fit", "--data", bad, "--out", str(tmp_path / "o")]) == 2
    assert main(["fit", "--data", str(sim_dir / "occurrence.csv"), "--iters", "5", "--burnin", "9",
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["fit", "--data", str(sim_dir / "occurrence.csv"), "--trunc", "10",
                 "--out", str(tmp_path / "o")]) == 2  # P below the observed columns
    with pytest.raises(SystemExit) as err:
        main(["fit", "--bogus-flag"])
    assert err.value.code == 2


def test_numerical_failure_exit_code(sim_dir, tmp_path, monkeypatch):
    from mvpibp import runner
    from mvpibp.mcmc import NumericalFailure

    def boom(*a, **kw):
        raise NumericalFailure("non-finite alpha at iteration 3")

    monkeypatch.setattr(runner, "fit_run", boom)
    rc = main(["fit", "--method", "ibp", "--data", str(sim_dir / "occurrence.csv"), "--trunc", "60",
               "--out", str(tmp_path)])
    assert rc == 3


def test_config_file_precedence(sim_dir, tmp_path):
    cfg = _write(tmp_path / "run.cfg", f"method = ibp\niterations = 30\nburn_in = 10\nP = 60\nseed = 5\n"
                                       f"data = {sim_dir / 'occurrence.csv'}\n")
    assert main(["fit", "--config", cfg, "--iters", "40", "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["iterations"] == 40 and man["config"]["burn_in"] == 10
    assert man["config"]["method"] == "ibp" and man["seed"] == 5 and man["n_kept"] == 30


def test_predict(sim_dir, tmp_path):
    arch = tmp_path / "fit"
    assert main(["fit", "--method", "ibp", "--data", str(sim_dir / "occurrence.csv"), "--trunc", "60",
                 "--iters", "60", "--burnin", "10", "--out", str(arch)]) == 0
    out = tmp_path / "pred"
    assert main(["predict", "--archive", str(arch), "--n0", "20", "-m", "10", "--out", str(out)]) == 0
    fc = json.loads((out / "forecast.json").read_text())
    assert fc["n0"] == 20 and fc["m"] == 10 and len(fc["curve"]["mean"]) == 30
    assert np.all(np.diff(fc["curve"]["mean"]) >= 0)
    assert read_draw_table(str(out / "forecast.csv"))["delta"].shape == (50, 1)
    assert main(["predict", "--archive", str(tmp_path / "none"), "--out", str(out)]) == 2
    assert main(["predict", "--archive", str(arch), "--n0", "99", "--out", str(out)]) == 2


def test_theory_check_command(tmp_path, capsys):
    rc = main(["theory-check", "--alpha", "5", "--trunc", "2000", "--reps", "50", "--seed", "1",
               "--out", str(tmp_path)])
    assert rc == 0
    table = capsys.readouterr().out
    assert "PASS" in table or "FAIL" in table
    checks = json.loads((tmp_path / "theory_checks.json").read_text())["checks"]
    assert len(checks) >= 6
    assert main(["theory-check", "--reps", "1"]) == 2


def test_experiment_command_deterministic(tmp_path):
    args = ["experiment", "--smoke", "--reps", "1", "--iters", "30", "--burnin", "10", "--seed", "4"]
    cfg = _write(tmp_path / "e.cfg", "kinds = factor\nmethods = ibp, twostage-hier\ntwostage_T = 10\n"
                                     "twostage_burn = 2\n")
    for tag in ("a", "b"):
        assert main(args + ["--config", cfg, "--out", str(tmp_path / tag)]) == 0
    for name in ("summary.csv", "estimates.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    bad = _write(tmp_path / "bad.cfg", "flavour = mint\n")
    assert main(["experiment", "--smoke", "--config", bad, "--out", str(tmp_path / "c")]) == 2


def test_logs_go_to_stderr_only(sim_dir, tmp_path):
    env = dict(os.environ, PYTHONHASHSEED="0")
    proc = subprocess.run([sys.executable, "-m", "mvpibp.cli", "fit", "--method", "ibp", "--data",
                           str(sim_dir / "occurrence.csv"), "--trunc", "60", "--iters", "20", "--burnin", "5",
                           "--out", str(tmp_path)], capture_output=True, text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout == ""
    assert "level=INFO logger=mvpibp msg=" in proc.stderr


def test_feature_matrix_input_types():
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[0.5]]))
