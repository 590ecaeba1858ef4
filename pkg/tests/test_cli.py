import json
from pathlib import Path

import numpy as np
import pytest

from mglmm.cli import main


@pytest.fixture
def gaussian_inputs(tmp_path):
    rng = np.random.default_rng(42)
    n, q = 80, 6
    idx = rng.integers(0, q, n)
    x1 = rng.normal(size=n)
    y = 1.0 + 0.5 * x1 + rng.normal(0, 0.6, q)[idx] + rng.normal(0, 0.5, n)
    data_path = tmp_path / "data.csv"
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write("y,x1,cl\n")
        for yi, xi, ci in zip(y, x1, idx):
            fh.write(f"{float(yi)!r},{float(xi)!r},{int(ci)}\n")
    config = {
        "marginals": [{"response": "y", "family": "normal", "link": "identity", "covariates": ["x1"]}],
        "clusters": [{"name": "cl", "column": "cl"}],
        "random_dist": {"type": "gaussian"},
    }
    config_path = tmp_path / "model.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    return config_path, data_path


def study_config(tmp_path, kind="normality", **extra):
    config = {
        "kind": kind,
        "methods": ["condinf"],
        "q": 8,
        "cluster_size": 4,
        "replicates": 3,
        "const_grid": [1.0, 100.0],
        "q_grid": [4, 8],
        "seed": 11,
    }
    config.update(extra)
    path = tmp_path / f"study_{kind}.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


class TestFitCommand:
    def test_success_writes_all_outputs(self, gaussian_inputs, tmp_path):
        config, data = gaussian_inputs
        out = tmp_path / "out"
        code = main(["fit", str(config), str(data), "--out", str(out)])
        assert code == 0
        for name in ("estimates.csv", "random_components.csv", "covariance.csv", "manifest.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["converged"] is True
        assert manifest["command"] == "fit"
        header = (out / "estimates.csv").read_text().splitlines()[0]
        assert header == "marginal,parameter,value,std_error"

    def test_missing_column_exit_1(self, gaussian_inputs, tmp_path, capsys):
        config, data = gaussian_inputs
        bad = json.loads(Path(config).read_text())
        bad["marginals"][0]["covariates"] = ["ghost"]
        bad_path = tmp_path / "bad.json"
        bad_path.write_text(json.dumps(bad))
        out = tmp_path / "out_bad"
        code = main(["fit", str(bad_path), str(data), "--out", str(out)])
        assert code == 1
        assert not (out / "estimates.csv").exists()
        assert "ghost" in capsys.readouterr().err

    def test_nonconvergence_exit_2_outputs_written(self, gaussian_inputs, tmp_path):
        config, data = gaussian_inputs
        out = tmp_path / "out2"
        code = main(["fit", str(config), str(data), "--out", str(out), "--max-iter", "1"])
        assert code == 2
        assert (out / "estimates.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["converged"] is False

    def test_laplace_method(self, gaussian_inputs, tmp_path):
        config, data = gaussian_inputs
        out = tmp_path / "out3"
        code = main(["fit", str(config), str(data), "--method", "laplace", "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["method"] == "laplace"


class TestStudyCommand:
    def test_normality_outputs(self, tmp_path):
        config = study_config(tmp_path)
        out = tmp_path / "study_out"
        code = main(["study", str(config), "--out", str(out)])
        assert code == 0
        lines = (out / "normality.csv").read_text().splitlines()
        assert lines[0] == "parameter,marginal,const,method,qq_corr,n"
        rows = [l.split(",") for l in lines[1:]]
        assert {r[0] for r in rows} == {"beta1", "beta2"}
        assert {r[2] for r in rows} == {"1", "100"}
        assert (out / "qq_points.csv").exists()
        assert (out / "failures.csv").exists()

    def test_bias_outputs_cover_q_grid(self, tmp_path):
        import csv

        config = study_config(tmp_path, kind="bias")
        out = tmp_path / "bias_out"
        code = main(["study", str(config), "--out", str(out)])
        assert code == 0
        with open(out / "bias.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["q"] for r in rows} == {"4", "8"}
        assert any(r["parameter"].startswith("Sigma[") for r in rows)

    def test_byte_identical_rerun(self, tmp_path):
        config = study_config(tmp_path, kind="normality", const_grid=[1.0])
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        assert main(["study", str(config), "--out", str(out1), "--replicates", "10", "--seed", "7"]) == 0
        assert main(["study", str(config), "--out", str(out2), "--replicates", "10", "--seed", "7"]) == 0
        for name in ("estimates.csv", "normality.csv", "qq_points.csv", "failures.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        m1.pop("wall_seconds")
        m2.pop("wall_seconds")
        assert m1 == m2


class TestAsymptoticsCommand:
    def test_outputs(self, gaussian_inputs, tmp_path):
        config, data = gaussian_inputs
        out = tmp_path / "av_out"
        code = main(["asymptotics", str(config), str(data), "--out", str(out), "--mc", "15", "--seed", "3"])
        assert code == 0
        header = (out / "av_beta.csv").read_text().splitlines()[0]
        assert header == "marginal,row,col,av,mean_information_term,refit_variance_term"
        assert (out / "av_b.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mc_draws"] == 15
