import json

import numpy as np
import pytest

from conftest import random_params, random_task, small_basis
from mtlpkpd.io import (FormatError, load_model, read_codes, read_cohort, read_posterior, read_task_csv,
                        save_model, write_codes, write_cohort, write_posterior, write_task_csv)
from mtlpkpd.mtl import MtlModel, ParamLayout, PosteriorSamples
from mtlpkpd.pdmodel import Task


@pytest.fixture
def task(rng):
    t = random_task(rng, random_params(rng, 2, 3), small_basis(3, rng), T=30, missing=0.2)
    t.covariates = {"age": 50.0}
    return t


class TestTaskCsv:
    def test_round_trip(self, task, tmp_path):
        write_task_csv(task, tmp_path / "a.csv")
        back = read_task_csv(tmp_path / "a.csv")
        assert back.id == task.id and back.dt == task.dt and back.covariates == {"age": 50.0}
        np.testing.assert_array_equal(back.u, task.u)
        np.testing.assert_array_equal(back.missing, task.missing)
        np.testing.assert_array_equal(back.y[task.observed], task.y[task.observed])

    def test_without_sidecar_or_masks(self, tmp_path):
        (tmp_path / "b.csv").write_text("t,u,y1\n0.5,1.0,3\n1.0,2.0,\n1.5,3.0,4\n")
        back = read_task_csv(tmp_path / "b.csv")
        assert back.id == "b" and back.dt == 0.5 and back.missing.tolist() == [[False], [True], [False]]

    def test_mask_hides_value(self, tmp_path):
        (tmp_path / "c.csv").write_text("t,u,y1,mask_y1\n1,1,3,1\n2,1,4,0\n")
        back = read_task_csv(tmp_path / "c.csv")
        assert back.missing[:, 0].tolist() == [True, False] and np.isnan(back.y[0, 0])

    @pytest.mark.parametrize("text,line", [("t,u,y\n1,2\n", 2), ("t,u,y\n1,1,1\n2,1,x\n", 3),
                                           ("t,u,y,mask_y\n1,1,1,2\n", 2), ("x,u,y\n1,1,1\n", 1)])
    def test_errors_name_line(self, tmp_path, text, line):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(FormatError, match=f"bad.csv:{line}"):
            read_task_csv(path)

    def test_empty(self, tmp_path):
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(FormatError):
            read_task_csv(tmp_path / "e.csv")


class TestCohortFiles:
    def test_round_trip(self, task, tmp_path):
        other = Task("other", task.u, task.y.copy(), missing=task.missing.copy())
        write_cohort([task, other], tmp_path / "d")
        back = read_cohort(tmp_path / "d")
        assert [t.id for t in back] == [task.id, "other"]

    def test_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_cohort(tmp_path / "nope")

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "cohort.json").write_text(json.dumps({"x": 1}))
        with pytest.raises(FormatError):
            read_cohort(tmp_path)


def test_model_round_trip(rng, tmp_path):
    layout = ParamLayout(2, 3)
    model = MtlModel(psi=rng.normal(size=(layout.p, 2)), offset=rng.normal(size=layout.p), basis=small_basis(3, rng),
                     tau=np.array([0.5, 2.0]), d=2, meta={"note": "x"})
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.psi, model.psi)
    np.testing.assert_array_equal(back.tau, model.tau)
    np.testing.assert_array_equal(back.basis.a, model.basis.a)
    assert back.meta == {"note": "x"}
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "none.json")


def test_codes_and_posterior(rng, tmp_path):
    Z = rng.normal(size=(3, 2))
    write_codes(["a", "b", "c"], Z, tmp_path / "z.csv")
    ids, back = read_codes(tmp_path / "z.csv")
    assert ids == ["a", "b", "c"]
    np.testing.assert_array_equal(back, Z)
    post = PosteriorSamples(rng.normal(size=(5, 2)), "mtl-z", alpha=rng.normal(size=(5, 3)),
                            diagnostics={"ess": np.array([1.0, 2.0])})
    write_posterior(post, tmp_path / "p.csv", tmp_path / "p.json")
    got = read_posterior(tmp_path / "p.csv", tmp_path / "p.json")
    np.testing.assert_array_equal(got.samples, post.samples)
    np.testing.assert_array_equal(got.alpha, post.alpha)
    assert got.diagnostics["ess"] == [1.0, 2.0]


def test_concentration_series_round_trip(tmp_path):
    from mtlpkpd.io import read_concentration_csv, write_concentration_csv
    from mtlpkpd.pkmodel import ConcentrationSeries

    series = ConcentrationSeries(0.25, np.array([0.0, 1.5, 2.25]))
    write_concentration_csv(series, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[:2] == ["t,c1", "0.25,0.0"]
    back = read_concentration_csv(tmp_path / "c.csv")
    assert back.dt == 0.25
    np.testing.assert_array_equal(back.values, series.values)
    (tmp_path / "bad.csv").write_text("t,c1\n0.25,1\n0.75,2\n")
    with pytest.raises(FormatError):
        read_concentration_csv(tmp_path / "bad.csv")
