import warnings
from dataclasses import replace

import numpy as np
import pytest

from conftest import central_fd, max_rel_err, random_params, random_task, small_basis
from mtlpkpd.inference import (DIVERGENCE_THRESHOLD, CallableTarget, HmcConfig, InferenceTarget,
                               PreprocessFlags, SamplerError, effective_sample_size, infer, leapfrog,
                               log_posterior_and_grad, map_estimate, preprocess_prefix, sample_posterior,
                               split_rhat)
from mtlpkpd.learning import GaussianPrior
from mtlpkpd.mtl import MtlModel, ParamLayout
from mtlpkpd.pdmodel import Task, emission_without_alpha


def model_for(rng, d=2, L=3, k=3, alpha_mode="free-per-task", tau=0.3):
    basis = small_basis(L, rng)
    layout = ParamLayout(d, L, alpha_mode == "in-subspace")
    truth = random_params(rng, d, L)
    offset = layout.inverse_transform(layout.pack(truth) if alpha_mode == "in-subspace"
                                      else layout.pack(truth)[: layout.p])
    return MtlModel(psi=rng.normal(0, 0.3, (layout.p, k)), offset=offset, basis=basis, tau=tau, d=d,
                    alpha_mode=alpha_mode), truth


def gaussian_target(dim, scales=None):
    s = np.ones(dim) if scales is None else np.asarray(scales, float)
    return CallableTarget(lambda x: (-0.5 * float(np.sum((x / s) ** 2)), -x / s ** 2), dim)


class TestPreprocess:
    def task(self, T=100):
        return Task("p", np.ones(T), np.zeros((T, 2)))

    def test_discard_window_masks_everything(self):
        out = preprocess_prefix(self.task(), 16)
        assert out.T == 16 and not out.observed.any()

    def test_count_at_80(self):
        out = preprocess_prefix(self.task(), 80)
        rows = out.observed.any(axis=1)
        assert rows.sum() == 16
        assert np.flatnonzero(rows)[0] == 16 and np.all(np.diff(np.flatnonzero(rows)) == 4)

    def test_disabled_is_identity(self):
        task = self.task()
        out = preprocess_prefix(task, 60, PreprocessFlags(enabled=False))
        np.testing.assert_array_equal(out.missing, task.missing[:60])

    def test_inputs_kept(self):
        task = Task("p", np.arange(50.0), np.zeros(50))
        np.testing.assert_array_equal(preprocess_prefix(task, 40).u, np.arange(40.0))

    def test_state_path_unchanged(self, rng):
        model, truth = model_for(rng)
        task = random_task(rng, truth, model.basis, T=60)
        full = emission_without_alpha(truth, model.basis, task.u[:50])
        pre = preprocess_prefix(task, 50)
        np.testing.assert_array_equal(emission_without_alpha(truth, model.basis, pre.u), full)

    @pytest.mark.parametrize("t", [0, 101])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            preprocess_prefix(self.task(), t)


class TestLogPosterior:
    def test_masked_mtl_is_standard_normal(self, rng):
        model, _ = model_for(rng)
        task = Task("m", np.ones(20), np.zeros((20, 2)), missing=np.ones((20, 2), bool))
        target = InferenceTarget("mtl-z", model, task)
        z = rng.normal(size=3)
        value, grad = log_posterior_and_grad(target, z)
        # offsets integrate to one under their prior when nothing is observed
        assert value == pytest.approx(-1.5 * np.log(2 * np.pi) - 0.5 * z @ z, rel=1e-12)
        np.testing.assert_allclose(grad, -z)

    @pytest.mark.parametrize("variant", ["mtl-z", "cohort-alpha", "taskd-alpha", "stl-lambda"])
    def test_gradient(self, variant):
        rng = np.random.default_rng(11)
        mode = "in-subspace" if variant == "stl-lambda" else "free-per-task"
        model, truth = model_for(rng, alpha_mode=mode)
        task = random_task(rng, truth, model.basis, T=40)
        fixed = rng.normal(size=3) if variant == "taskd-alpha" else None
        target = InferenceTarget(variant, model, task, fixed_z=fixed)
        x = target.initial_point() + rng.normal(0, 0.2, target.dim)
        _, g = log_posterior_and_grad(target, x)
        fd = central_fd(lambda y: log_posterior_and_grad(target, y)[0], x)
        assert max_rel_err(g, fd) < 1e-5

    def test_non_finite_flagged(self):
        bad = CallableTarget(lambda x: (np.nan, np.zeros(1)), 1)
        value, grad = log_posterior_and_grad(bad, np.zeros(1))
        assert value == -np.inf and np.all(np.isnan(grad))

    def test_wrong_dimension(self, rng):
        model, truth = model_for(rng)
        target = InferenceTarget("mtl-z", model, random_task(rng, truth, model.basis, T=10))
        with pytest.raises(ValueError):
            target.log_density_and_grad(np.zeros(2))

    def test_stl_needs_offsets_in_vector(self, rng):
        model, truth = model_for(rng)
        with pytest.raises(ValueError):
            InferenceTarget("stl-lambda", model, random_task(rng, truth, model.basis, T=10))


class TestMap:
    def test_masked_mtl_map_is_zero(self, rng):
        model, _ = model_for(rng)
        task = Task("m", np.ones(10), np.zeros((10, 2)), missing=np.ones((10, 2), bool))
        np.testing.assert_allclose(map_estimate(InferenceTarget("mtl-z", model, task)), 0.0, atol=1e-10)

    def test_linear_gaussian_ridge(self, rng):
        # loadings only on the offsets: the emission is linear in z, so the MAP is a ridge solution
        model, truth = model_for(rng, k=2, alpha_mode="in-subspace")
        layout = model.layout
        psi = np.zeros((layout.p, 2))
        psi[layout.index["alpha"]] = rng.normal(0, 3.0, (2, 2))
        model.psi = psi
        task = random_task(rng, truth, model.basis, T=30)
        target = InferenceTarget("mtl-z", model, task)
        params = layout.unpack(layout.transform(model.offset))
        g = emission_without_alpha(params, model.basis, task.u) + params.alpha
        obs = task.observed
        n = obs.sum(axis=0)
        s = np.where(obs, task.y - g, 0.0).sum(axis=0)
        A = psi[layout.index["alpha"]]
        prec = np.eye(2) + model.tau * (A.T * n) @ A
        expected = np.linalg.solve(prec, model.tau * A.T @ s)
        np.testing.assert_allclose(map_estimate(target, gtol=1e-12), expected, rtol=1e-8, atol=1e-10)

    def test_map_not_worse_than_start(self, rng):
        model, truth = model_for(rng)
        target = InferenceTarget("mtl-z", model, random_task(rng, truth, model.basis, T=40))
        x = map_estimate(target)
        assert log_posterior_and_grad(target, x)[0] >= log_posterior_and_grad(target, np.zeros(3))[0]

    def test_restarts_find_the_dominant_mode(self):
        # narrow minor mode next to the zero start, dominant broad mode far away
        def logp(x):
            return float(np.logaddexp(np.log(0.05) - 0.5 * ((x[0] - 0.5) / 0.2) ** 2 - np.log(0.2),
                                      np.log(0.95) - 0.5 * ((x[0] + 2.5) / 0.5) ** 2 - np.log(0.5)))

        target = CallableTarget(lambda x: (logp(x), central_fd(logp, x)), 1, restart_scale=1.0)
        config = HmcConfig(chains=1, n_samples=200, warmup=100, n_leapfrog=8, seed=2)
        plain = sample_posterior(target, replace(config, map_restarts=0))
        multi = sample_posterior(target, config)
        assert plain.diagnostics["map"][0] == pytest.approx(0.5, abs=1e-3)
        assert multi.diagnostics["map"][0] == pytest.approx(-2.5, abs=1e-3)
        assert np.mean(multi.samples[:, 0]) < -1.5

    def test_alpha_map_is_analytic(self, rng):
        model, truth = model_for(rng)
        target = InferenceTarget("cohort-alpha", model, random_task(rng, truth, model.basis, T=40))
        mean, _ = target.analytic_alpha_posterior()
        np.testing.assert_allclose(map_estimate(target), mean)
        _, g = log_posterior_and_grad(target, mean)
        np.testing.assert_allclose(g, 0.0, atol=1e-8)


class TestAnalyticAlpha:
    def test_matches_numerical_integration(self, rng):
        model, truth = model_for(rng, d=1)
        task = random_task(rng, truth, model.basis, T=12)
        target = InferenceTarget("cohort-alpha", model, task)
        mean, sd = target.analytic_alpha_posterior()
        grid = np.linspace(mean[0] - 10 * sd[0], mean[0] + 10 * sd[0], 20001)
        logp = np.array([target.log_density_and_grad(np.array([a]))[0] for a in grid])
        w = np.exp(logp - logp.max())
        w /= w.sum()
        m = (w * grid).sum()
        assert m == pytest.approx(mean[0], abs=1e-6 * sd[0] + 1e-9)
        assert np.sqrt((w * (grid - m) ** 2).sum()) == pytest.approx(sd[0], rel=1e-5)


class TestHmc:
    def test_leapfrog_energy_error_is_second_order(self):
        target = gaussian_target(3, [1.0, 2.0, 0.5])
        q = np.array([1.0, -1.0, 0.3])
        p = np.array([0.2, 0.5, -1.0])
        inv = np.ones(3)
        errs = []
        for eps in (0.1, 0.05, 0.025):
            n = int(round(1.0 / eps))
            lp, g = target.log_density_and_grad(q)
            q1, p1, lp1, _ = leapfrog(target, q, p, g, eps, n, inv)
            errs.append(abs((lp - 0.5 * p @ p) - (lp1 - 0.5 * p1 @ p1)))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios > 3.0) & (ratios < 5.0))

    def test_standard_normal_moments(self):
        post = sample_posterior(gaussian_target(3), HmcConfig(n_samples=1000, warmup=300, n_leapfrog=16, seed=1))
        x = post.samples
        ess = np.asarray(post.diagnostics["ess"])
        assert np.all(np.abs(x.mean(axis=0)) < 4 / np.sqrt(ess))
        assert np.all(np.abs(x.var(axis=0) - 1) < 0.2)
        rates = [c["accept_rate"] for c in post.diagnostics["chains"]]
        assert all(0.6 <= r <= 0.95 for r in rates)
        assert np.all(np.asarray(post.diagnostics["rhat"]) < 1.05)

    def test_anisotropic_mass_adaptation(self):
        scales = np.array([0.01, 1.0, 30.0])
        post = sample_posterior(gaussian_target(3, scales), HmcConfig(n_samples=800, warmup=500, seed=2))
        sd = post.samples.std(axis=0)
        np.testing.assert_allclose(sd, scales, rtol=0.2)

    def test_reproducible(self):
        cfg = HmcConfig(n_samples=100, warmup=50, n_leapfrog=5, seed=7)
        a = sample_posterior(gaussian_target(2), cfg).samples
        b = sample_posterior(gaussian_target(2), cfg).samples
        np.testing.assert_array_equal(a, b)

    def test_divergent_sampler_raises(self):
        cfg = HmcConfig(n_samples=50, warmup=0, step_size=50.0, n_leapfrog=10, adapt_mass=False)
        with pytest.raises(SamplerError, match="step size"):
            sample_posterior(gaussian_target(2, [0.01, 0.01]), cfg)

    def test_time_budget_truncates(self):
        slow = gaussian_target(2)
        cfg = HmcConfig(n_samples=100_000, warmup=10, n_leapfrog=4, max_seconds=0.3)
        post = sample_posterior(slow, cfg)
        assert post.diagnostics["truncated"] and 1 <= post.M < 100_000

    def test_zero_dimensional_target(self):
        post = sample_posterior(CallableTarget(lambda x: (0.0, np.zeros(0)), 0), HmcConfig(n_samples=10))
        assert post.samples.shape == (10, 0)

    def test_hessian_mass(self):
        post = sample_posterior(gaussian_target(2, [0.1, 5.0]),
                                HmcConfig(n_samples=400, warmup=100, hessian_mass=True, adapt_mass=False))
        np.testing.assert_allclose(post.diagnostics["chains"][0]["inv_mass"], [0.01, 25.0], rtol=1e-3)
        np.testing.assert_allclose(post.samples.std(axis=0), [0.1, 5.0], rtol=0.25)


class TestDiagnostics:
    def test_iid_ess_near_n(self, rng):
        x = rng.normal(size=(2, 2000, 2))
        ess = effective_sample_size(x)
        assert np.all((ess > 3000) & (ess <= 4000))

    def test_ar1_ess(self, rng):
        rho, n = 0.8, 20000
        x = np.empty(n)
        x[0] = rng.normal()
        for t in range(1, n):
            x[t] = rho * x[t - 1] + np.sqrt(1 - rho ** 2) * rng.normal()
        ess = effective_sample_size(x[None, :, None])[0]
        assert ess == pytest.approx(n * (1 - rho) / (1 + rho), rel=0.2)

    def test_thinning_does_not_raise_total_ess(self, rng):
        rho, n = 0.5, 8000
        x = np.empty(n)
        x[0] = 0.0
        for t in range(1, n):
            x[t] = rho * x[t - 1] + rng.normal()
        full = effective_sample_size(x[None, :, None])[0]
        thin = effective_sample_size(x[None, ::2, None])[0]
        assert thin <= full * 1.05

    def test_rhat(self, rng):
        good = rng.normal(size=(2, 500, 1))
        assert split_rhat(good)[0] == pytest.approx(1.0, abs=0.02)
        bad = good + np.array([0.0, 3.0])[:, None, None]
        assert split_rhat(bad)[0] > 1.5


def test_infer_dispatches_on_model_kind(rng):
    model, truth = model_for(rng)
    task = random_task(rng, truth, model.basis, T=60)
    cfg = HmcConfig(n_samples=40, warmup=150, n_leapfrog=8)
    post = infer(model, task, 50, config=cfg)
    assert post.variant == "mtl-z" and post.alpha.shape == (40, 2)
    model.kind = "cohort"
    assert infer(model, task, 50, config=cfg).variant == "cohort-alpha"
