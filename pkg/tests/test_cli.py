import json
import subprocess
import sys

import pytest

from mtlpkpd.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("simulate", "--n", 4, "--t-min", 60, "--t-max", 70, "--seed", 3, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fitted(cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert run("fit", "--data", cohort, "--k", 1, "--epochs", 20, "--out", out) == 0
    return out


class TestSimulate:
    def test_outputs(self, cohort):
        manifest = json.loads((cohort / "manifest.json").read_text())
        assert manifest["command"] == "simulate" and manifest["seed"] == 3
        assert len(manifest["config_hash"]) == 64 and "numpy" in manifest["versions"]
        assert len(json.loads((cohort / "cohort.json").read_text())["tasks"]) == 4
        assert (cohort / "truth.json").exists()

    def test_deterministic(self, cohort, tmp_path):
        assert run("simulate", "--n", 4, "--t-min", 60, "--t-max", 70, "--seed", 3, "--out", tmp_path) == 0
        for f in cohort.glob("task*"):
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()

    def test_zero_tasks_is_usage_error(self, tmp_path, capsys):
        assert run("simulate", "--n", 0, "--out", tmp_path) == 2
        assert "--n" in capsys.readouterr().err

    def test_env_default_directory(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MTLPKPD_DATA_DIR", str(tmp_path / "envdata"))
        assert run("simulate", "--n", 3, "--t-min", 30, "--t-max", 30) == 0
        assert (tmp_path / "envdata" / "cohort.json").exists()


class TestConfig:
    def test_config_values_and_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 3, "t_min": 30, "t_max": 30, "seed": 9}))
        assert run("simulate", "--config", cfg, "--seed", 1, "--out", tmp_path / "o") == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["n"] == 3 and manifest["seed"] == 1

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert run("simulate", "--config", cfg, "--out", tmp_path) == 2
        assert "bogus" in capsys.readouterr().err


class TestPipeline:
    def test_fit_outputs(self, fitted):
        assert {p.name for p in fitted.iterdir()} >= {"model.json", "codes.csv", "fit_report.json", "manifest.json"}
        assert len((fitted / "codes.csv").read_text().splitlines()) == 5

    @pytest.mark.parametrize("kind", ["cohort", "stl", "task-d"])
    def test_other_kinds(self, cohort, tmp_path, kind):
        assert run("fit", "--data", cohort, "--model-kind", kind, "--epochs", 10, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "model.json").read_text())["kind"] == kind

    def test_infer_then_predict(self, cohort, fitted, tmp_path):
        post = tmp_path / "post"
        assert run("infer", "--data", cohort, "--model", fitted / "model.json", "--task", "task0", "--t", 40,
                   "--samples", 40, "--warmup", 60, "--leapfrog", 4, "--out", post) == 0
        assert run("predict", "--data", cohort, "--model", fitted / "model.json", "--posterior",
                   post / "posterior.csv", "--task", "task0", "--t", 40, "--horizons", "5,20",
                   "--mode", "observation", "--out", tmp_path / "pred") == 0
        metrics = json.loads((tmp_path / "pred" / "metrics.json").read_text())["metrics"]
        assert set(metrics) == {"5", "20", "retrospective_rmse"}
        for r in ("5", "20"):
            pairs = [(a, b) for a, b in zip(metrics[r]["nll"], metrics[r]["nll_train_tau"]) if a is not None]
            assert pairs and all(a <= b + 1e-12 for a, b in pairs)
        lines = (tmp_path / "pred" / "predictions.csv").read_text().splitlines()
        assert lines[0] == "t,channel,horizon,mean,lo,hi,y_observed" and len(lines) == 1 + 20 * 3

    def test_unknown_task(self, cohort, fitted, tmp_path, capsys):
        code = run("infer", "--data", cohort, "--model", fitted / "model.json", "--task", "nobody", "--t", 40,
                   "--out", tmp_path)
        assert code == 1 and "nobody" in capsys.readouterr().err

    def test_missing_model_file(self, cohort, tmp_path):
        assert run("infer", "--data", cohort, "--model", tmp_path / "none.json", "--task", "task0", "--t", 40,
                   "--out", tmp_path) == 1

    def test_missing_data(self, tmp_path):
        assert run("fit", "--data", tmp_path / "nothing", "--out", tmp_path) == 1

    def test_bench(self, cohort, tmp_path):
        out = tmp_path / "bench"
        assert run("bench", "--data", cohort, "--models", "cohort,mtl-1", "--times", "10", "--horizons", "5",
                   "--folds", "0", "--epochs", 10, "--samples", 40, "--warmup", 150, "--leapfrog", 8,
                   "--out", out) == 0
        report = json.loads((out / "report.json").read_text())
        assert {r["model"] for r in report["records"]} == {"cohort", "mtl-1"}
        assert (out / "oracle.csv").exists() and (out / "figure_rmse.csv").exists()


def test_fit_basis(tmp_path):
    assert run("fit-basis", "--L", 2, "--out", tmp_path) == 0
    data = json.loads((tmp_path / "basis.json").read_text())
    assert len(data["theta"]) == 2 and data["max_abs_error"] < 0.2


def test_bad_domain(tmp_path):
    assert run("fit-basis", "--domain", "3,1", "--out", tmp_path) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mtlpkpd.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
