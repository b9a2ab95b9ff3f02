import numpy as np
import pytest

from mtlpkpd.mtl import ParamLayout, decode
from mtlpkpd.pdmodel import simulate
from mtlpkpd.pkmodel import solve_pk
from mtlpkpd.synthetic import (CHANNELS, REGIMES, CohortSpec, dropout_mask, generate_cohort, make_infusion,
                               sample_loadings)


class TestInfusion:
    def test_regimes_without_jitter(self):
        a = make_infusion("high-low-high", 40.0, jitter=False)
        b = make_infusion("low-high-low", 40.0, jitter=False)
        assert a.breakpoints == (0.0, 13.0, 27.0) and a.rates == (10.0, 2.0, 10.0)
        assert b.rates == (2.0, 10.0, 2.0)

    def test_jitter_bounds_and_shared_levels(self):
        for seed in range(20):
            a = make_infusion("high-low-high", 50.0, seed=seed)
            b = make_infusion("low-high-low", 50.0, seed=seed)
            assert abs(a.breakpoints[1] - 13.0) <= 1.0 and abs(a.breakpoints[2] - 27.0) <= 1.0
            assert a.rates[0] == b.rates[1] and a.rates[1] == b.rates[0]

    def test_short_duration_drops_segments(self):
        s = make_infusion("high-low-high", 10.0, jitter=False)
        assert s.breakpoints == (0.0,) and s.duration == 10.0

    def test_unknown_regime(self):
        with pytest.raises(ValueError):
            make_infusion("flat", 10.0)


class TestCohort:
    spec = CohortSpec(n_tasks=6, T_range=(60, 80), seed=3)

    def test_shapes_and_truth(self):
        tasks, truth = generate_cohort(self.spec)
        layout = ParamLayout(3, 8)
        assert len(tasks) == 6 and truth.psi.shape == (layout.p, 2) and truth.Z.shape == (6, 2)
        for task in tasks:
            assert 60 <= task.T <= 80 and task.d == 3 and task.channels == list(CHANNELS)
            assert task.meta["regime"] in REGIMES

    def test_determinism(self):
        a, _ = generate_cohort(self.spec)
        b, _ = generate_cohort(CohortSpec(n_tasks=6, T_range=(60, 80), seed=3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.u, y.u)
            np.testing.assert_array_equal(np.nan_to_num(x.y), np.nan_to_num(y.y))

    def test_truth_reproduces_noiseless_curves(self):
        tasks, truth = generate_cohort(self.spec)
        model = truth.model()
        for i, task in enumerate(tasks):
            p = decode(model, truth.Z[i], truth.params[i].alpha)
            np.testing.assert_allclose(simulate(p, truth.basis, task.u).yhat, truth.yhat[i])
            u = solve_pk(truth.pk_rates[i], truth.schedules[i], task.dt).values[:task.T]
            np.testing.assert_allclose(u, task.u)

    def test_noise_level(self):
        tasks, truth = generate_cohort(CohortSpec(n_tasks=10, missing_fraction=0.0, seed=1))
        resid = np.concatenate([t.y - y for t, y in zip(tasks, truth.yhat)])
        np.testing.assert_allclose(resid.std(axis=0), [4.0, 3.0, 5.0], rtol=0.05)
        np.testing.assert_allclose(truth.tau, 1 / np.array([16.0, 9.0, 25.0]))

    def test_regime_split_default(self):
        _, truth = generate_cohort(CohortSpec(n_tasks=40, T_range=(20, 20)))
        assert truth.regimes.count("high-low-high") == 18

    def test_missing_fraction(self):
        tasks, _ = generate_cohort(CohortSpec(n_tasks=5, missing_fraction=0.2, seed=4))
        frac = np.mean([t.missing.mean() for t in tasks])
        assert 0.18 <= frac <= 0.3
        assert all(np.all(np.isnan(t.y[t.missing])) for t in tasks)

    def test_informative_covariates_track_codes(self):
        tasks, truth = generate_cohort(CohortSpec(n_tasks=40, T_range=(20, 20), covariates="informative", seed=5))
        age = np.array([t.covariates["age"] for t in tasks])
        assert np.corrcoef(age, truth.Z[:, 0])[0, 1] > 0.95

    def test_structured_loadings_support(self, rng):
        psi = sample_loadings(rng, CohortSpec())
        idx = ParamLayout(3, 8).index
        used = np.flatnonzero(np.abs(psi).sum(axis=1))
        assert set(used) <= set(idx["beta1"]) | set(idx["beta2"])

    def test_truth_json(self):
        _, truth = generate_cohort(self.spec)
        data = truth.to_json_dict()
        assert len(data["params"]) == 6 and data["meta"]["seed"] == 3

    @pytest.mark.parametrize("kwargs", [dict(n_tasks=0), dict(regime_split=(1, 1), n_tasks=3),
                                        dict(covariates="x"), dict(psi_support="x")])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            CohortSpec(**kwargs)


def test_dropout_blocks(rng):
    m = dropout_mask(rng, 200, 3, 0.1, 8.0)
    assert 0.1 <= m.mean() < 0.2
    assert not dropout_mask(rng, 50, 2, 0.0, 8.0).any()
