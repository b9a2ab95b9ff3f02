"""Per-task posterior inference from an observed prefix.

Four target variants share one sampler:

``mtl-z``
    latent code of an MTL model; free task offsets are integrated out
    analytically and drawn afterwards from their exact conditional.
``cohort-alpha`` / ``taskd-alpha``
    offsets only, with the rest of the parameters fixed (the posterior is
    Gaussian in this case).
``stl-lambda``
    the full unconstrained parameter vector under a wide Gaussian prior.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .learning import GaussianPrior
from .mtl import (MtlModel, PosteriorSamples, _alpha_logprior, collapsed_task_density, decode_unconstrained,
                  std_normal_logpdf, task_value_grad_v)
from .pdmodel import LOG_2PI, Task, emission_without_alpha

log = logging.getLogger(__name__)

VARIANTS = ("mtl-z", "cohort-alpha", "stl-lambda", "taskd-alpha")


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class PreprocessFlags:
    """Observation thinning for inference: keep every ``downsample``-th row after ``discard`` rows."""

    downsample: int = 4
    discard: int = 16
    enabled: bool = True

    def __post_init__(self):
        if self.downsample < 1 or self.discard < 0:
            raise ValueError("downsample must be >= 1 and discard >= 0")


def preprocess_prefix(task: Task, t: int, flags: PreprocessFlags | None = None) -> Task:
    """Prefix of ``task`` up to grid point ``t`` with the likelihood rows thinned.

    Inputs keep full resolution so the state path is unchanged; only the
    observation mask is modified.
    """
    flags = flags or PreprocessFlags()
    if not 1 <= t <= task.T:
        raise ValueError(f"t={t} outside the series (1..{task.T})")
    prefix = task.truncate(t)
    if not flags.enabled:
        return prefix
    idx = np.arange(t)
    keep = (idx >= flags.discard) & ((idx - flags.discard) % flags.downsample == 0)
    missing = prefix.missing | ~keep[:, None]
    return prefix.with_missing(missing)


def _alpha_stats(task: Task, g: np.ndarray):
    obs = task.observed
    r = np.where(obs, task.y - g, 0.0)
    return obs.sum(axis=0), r.sum(axis=0), (r ** 2).sum(axis=0)


@dataclass
class InferenceTarget:
    """Log posterior of one task's parameters given an already preprocessed prefix.

    For ``taskd-alpha`` the code is ``fixed_z``; for ``stl-lambda`` the model
    must have its offsets inside the parameter vector and ``prior`` is the
    wide Gaussian over that vector.
    """

    variant: str
    model: MtlModel
    task: Task
    fixed_z: np.ndarray | None = None
    prior: GaussianPrior | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.task.d != self.model.d:
            raise ValueError(f"task has {self.task.d} channels, model has {self.model.d}")
        if self.variant == "stl-lambda":
            if self.model.free_alpha:
                raise ValueError("stl-lambda needs a model with offsets inside the parameter vector")
            if self.prior is None:
                self.prior = GaussianPrior(self.model.p)
        if self.variant in ("cohort-alpha", "taskd-alpha"):
            if not self.model.free_alpha:
                raise ValueError(f"{self.variant} needs free per-task offsets")
            if self.variant == "cohort-alpha":
                z = np.zeros(self.model.k)
            else:
                if self.fixed_z is None:
                    raise ValueError("taskd-alpha needs fixed_z")
                z = np.asarray(self.fixed_z, float)
            self.fixed_z = z
            params = decode_unconstrained(self.model, self.model.unconstrained(z), np.zeros(self.model.d))
            g = emission_without_alpha(params, self.model.basis, self.task.u, self.model.lag)
            self._stats = _alpha_stats(self.task, g)

    @property
    def restart_scale(self) -> float | None:
        """Spread of extra MAP starts: the latent prior for ``mtl-z``, none otherwise."""
        return 1.0 if self.variant == "mtl-z" else None

    @property
    def dim(self) -> int:
        if self.variant == "mtl-z":
            return self.model.k
        if self.variant == "stl-lambda":
            return self.model.p
        return self.model.d

    def initial_point(self) -> np.ndarray:
        if self.variant == "mtl-z":
            return np.zeros(self.model.k)
        if self.variant == "stl-lambda":
            return self.model.offset.copy()
        n, s, _ = self._stats
        return np.where(n > 0, s / np.maximum(n, 1), 0.0)

    def log_density_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"point has shape {x.shape}, expected ({self.dim},)")
        model = self.model
        if self.variant == "mtl-z":
            v = model.unconstrained(x)
            if model.free_alpha:
                value, gv, _, _ = collapsed_task_density(model, v, self.task)
            else:
                value, gv, _ = task_value_grad_v(model, v, self.task)
            return value + std_normal_logpdf(x), model.psi.T @ gv - x
        if self.variant == "stl-lambda":
            value, gv, _ = task_value_grad_v(model, x, self.task)
            return value + self.prior.logpdf(x), gv + self.prior.grad(x)
        n, s, ss = self._stats
        tau = model.tau_vector()
        sd = model.alpha_prior_sd
        ll = float(np.sum(0.5 * n * (np.log(tau) - LOG_2PI) - 0.5 * tau * (ss - 2 * x * s + n * x ** 2)))
        grad = tau * (s - n * x) - x / sd ** 2
        return ll + _alpha_logprior(x, sd), grad

    def analytic_alpha_posterior(self):
        """Exact Gaussian posterior ``(mean, sd)`` of the offsets (alpha variants only)."""
        if self.variant not in ("cohort-alpha", "taskd-alpha"):
            raise ValueError("only available for the alpha variants")
        n, s, _ = self._stats
        prec = self.model.tau_vector() * n + 1.0 / self.model.alpha_prior_sd ** 2
        return self.model.tau_vector() * s / prec, 1.0 / np.sqrt(prec)


@dataclass
class CallableTarget:
    """Adapter turning a ``x -> (logp, grad)`` function into a sampler target."""

    fn: object
    dim: int
    x0: np.ndarray | None = None
    restart_scale: float | None = None

    def initial_point(self):
        return np.zeros(self.dim) if self.x0 is None else np.asarray(self.x0, float).copy()

    def log_density_and_grad(self, x):
        return self.fn(np.asarray(x, float))


def log_posterior_and_grad(target, point):
    """``(log posterior, gradient)``; non-finite values come back as ``(-inf, nan)``."""
    try:
        with np.errstate(all="ignore"):
            value, grad = target.log_density_and_grad(point)
    except (FloatingPointError, OverflowError):
        value, grad = -np.inf, None
    if not np.isfinite(value) or grad is None or not np.all(np.isfinite(grad)):
        return -np.inf, np.full(np.size(point), np.nan)
    return float(value), np.asarray(grad, float)


def map_estimate(target, x0=None, maxiter: int = 1000, gtol: float = 1e-6) -> np.ndarray:
    """Local maximiser of the log posterior (L-BFGS), started from ``x0`` or the target's default."""
    x0 = target.initial_point() if x0 is None else np.asarray(x0, float)
    if getattr(target, "variant", None) in ("cohort-alpha", "taskd-alpha"):
        return target.analytic_alpha_posterior()[0]
    if np.size(x0) == 0:
        return x0

    def fun(x):
        value, grad = log_posterior_and_grad(target, x)
        if not np.isfinite(value):
            return np.inf, np.zeros_like(x)
        return -value, -grad

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15})
    value0 = fun(x0)[0]
    x = res.x if res.fun <= value0 else x0
    gnorm = np.max(np.abs(fun(x)[1])) if np.size(x) else 0.0
    if gnorm > gtol * 1e3 and not res.success:
        warnings.warn(f"MAP search stopped early ({res.message}); max |grad| = {gnorm:.2e}")
    return x


def _best_map(target, config: HmcConfig) -> np.ndarray:
    # the latent posterior can be multimodal; a single start from zero often lands in a minor mode
    best = map_estimate(target)
    scale = getattr(target, "restart_scale", None)
    if scale is None or config.map_restarts == 0:
        return best
    rng = np.random.default_rng([config.seed, 7])
    best_value = log_posterior_and_grad(target, best)[0]
    for _ in range(config.map_restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x = map_estimate(target, scale * rng.normal(size=target.dim))
        value = log_posterior_and_grad(target, x)[0]
        if value > best_value:
            best, best_value = x, value
    return best


def hessian_diagonal(target, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference diagonal of the Hessian of the log posterior at ``x``."""
    x = np.asarray(x, float)
    out = np.empty(x.size)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h * max(1.0, abs(x[j]))
        gp = log_posterior_and_grad(target, x + e)[1][j]
        gm = log_posterior_and_grad(target, x - e)[1][j]
        out[j] = (gp - gm) / (2 * e[j])
    return out


@dataclass
class HmcConfig:
    """Plain HMC settings. ``n_samples`` is the total number of kept draws across chains.

    ``map_restarts`` extra MAP searches start from random points when the
    target has a ``restart_scale`` (the latent prior for ``mtl-z``); the best
    optimum seeds the chains.

    ``max_seconds`` caps wall-clock time per call; when hit, the draws kept
    so far are returned and ``diagnostics["truncated"]`` is set.
    """

    chains: int = 2
    n_samples: int = 3000
    thin: int = 2
    warmup: int = 1000
    n_leapfrog: int = 32
    step_size: float | None = None
    target_accept: float = 0.8
    step_jitter: float = 0.1
    adapt_mass: bool = True
    inv_mass: np.ndarray | None = None
    hessian_mass: bool = False
    max_divergence_rate: float = 0.2
    max_seconds: float | None = None
    map_restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.map_restarts < 0:
            raise ValueError("map_restarts must be non-negative")
        if self.chains < 1 or self.thin < 1 or self.n_samples < 1 or self.n_leapfrog < 1:
            raise ValueError("chains, thin, n_samples and n_leapfrog must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step size must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")


class DualAveraging:
    """Step-size adaptation towards a target acceptance probability."""

    def __init__(self, step, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step)

    def restart(self, step):
        self.mu = np.log(10.0 * step)
        self.hbar = 0.0
        self.log_bar = 0.0
        self.m = 0
        self.log_step = np.log(step)

    def update(self, accept_prob):
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(m) / self.gamma * self.hbar
        eta = m ** -self.kappa
        self.log_bar = eta * self.log_step + (1 - eta) * self.log_bar
        return float(np.exp(self.log_step))

    @property
    def final(self) -> float:
        return float(np.exp(self.log_bar))


DIVERGENCE_THRESHOLD = 1000.0


def leapfrog(target, q, p, grad, step, n_steps, inv_mass):
    """``n_steps`` leapfrog steps; returns ``(q, p, logp, grad)`` (logp is -inf on failure)."""
    q = q.copy()
    p = p + 0.5 * step * grad
    logp = -np.inf
    for i in range(n_steps):
        q = q + step * inv_mass * p
        logp, grad = log_posterior_and_grad(target, q)
        if not np.isfinite(logp):
            return q, p, -np.inf, grad
        if i < n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return q, p, logp, grad


def _kinetic(p, inv_mass):
    return 0.5 * float(np.sum(inv_mass * p * p))


def _initial_step(target, q, logp, grad, inv_mass, rng):
    step = 1.0
    p = rng.normal(size=q.size) / np.sqrt(inv_mass)
    h0 = logp - _kinetic(p, inv_mass)

    def accept(eps):
        _, p1, lp1, _ = leapfrog(target, q, p, grad, eps, 1, inv_mass)
        if not np.isfinite(lp1):
            return 0.0
        return float(np.exp(min(0.0, lp1 - _kinetic(p1, inv_mass) - h0)))

    direction = 1.0 if accept(step) > 0.5 else -1.0
    for _ in range(60):
        nxt = step * 2.0 ** direction
        if (direction > 0 and accept(nxt) < 0.5) or (direction < 0 and accept(nxt) > 0.5):
            return nxt if direction < 0 else step
        step = nxt
    return step


def _windows(warmup):
    """Slow-adaptation windows ``(start, end)`` in the usual fast/slow/fast layout."""
    if warmup < 20:
        return []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init, term = int(0.15 * warmup), int(0.1 * warmup)
        base = warmup - init - term
    out = []
    start, size = init, base
    end_slow = warmup - term
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        out.append((start, end))
        start, size = end, 2 * size
    return out


def _run_chain(target, q0, config: HmcConfig, rng, n_keep, deadline):
    dim = q0.size
    q = q0.copy()
    logp, grad = log_posterior_and_grad(target, q)
    if not np.isfinite(logp):
        raise SamplerError("initial point has non-finite log density")
    inv_mass = np.ones(dim) if config.inv_mass is None else np.asarray(config.inv_mass, float).copy()
    step = config.step_size or _initial_step(target, q, logp, grad, inv_mass, rng)
    adapt = DualAveraging(step, config.target_accept)
    windows = _windows(config.warmup) if config.adapt_mass else []
    window_draws = []
    kept, accepts, divergent = [], [], 0
    total = config.warmup + n_keep * config.thin
    truncated = False
    for it in range(total):
        if deadline is not None and time.perf_counter() > deadline:
            truncated = True
            break
        warm = it < config.warmup
        eps = step * (1.0 + config.step_jitter * rng.uniform(-1, 1))
        p = rng.normal(size=dim) / np.sqrt(inv_mass)
        h0 = logp - _kinetic(p, inv_mass)
        q1, p1, lp1, g1 = leapfrog(target, q, p, grad, eps, config.n_leapfrog, inv_mass)
        h1 = lp1 - _kinetic(p1, inv_mass) if np.isfinite(lp1) else -np.inf
        err = h0 - h1
        diverged = not np.isfinite(err) or err > DIVERGENCE_THRESHOLD
        acc = 0.0 if diverged else float(np.exp(min(0.0, -err)))
        if rng.uniform() < acc:
            q, logp, grad = q1, lp1, g1
        if warm:
            step = adapt.update(acc)
            for lo, hi in windows:
                if lo <= it < hi:
                    window_draws.append(q.copy())
                    if it == hi - 1:
                        X = np.asarray(window_draws)
                        n = len(X)
                        var = X.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
                        inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                        window_draws = []
                        step = _initial_step(target, q, logp, grad, inv_mass, rng)
                        adapt.restart(step)
            if it == config.warmup - 1:
                step = adapt.final
        else:
            accepts.append(acc)
            divergent += int(diverged)
            if (it - config.warmup) % config.thin == config.thin - 1:
                kept.append(q.copy())
    if not kept:
        kept.append(q.copy())
    return np.asarray(kept), {"step_size": float(step), "inv_mass": inv_mass.tolist(),
                              "accept_rate": float(np.mean(accepts)) if accepts else float("nan"),
                              "divergences": int(divergent), "iterations": len(accepts),
                              "truncated": truncated}


def _autocov(x):
    n = x.size
    x = x - x.mean()
    f = np.fft.rfft(x, n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n] / n
    return ac


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Multi-chain ESS per coordinate with Geyer's monotone initial sequence.

    ``chains`` has shape ``(C, n, dim)``. The estimate is capped at ``C n``.
    """
    chains = np.asarray(chains, float)
    C, n, dim = chains.shape
    out = np.empty(dim)
    for j in range(dim):
        x = chains[:, :, j]
        if n < 4:
            out[j] = C * n
            continue
        acov = np.asarray([_autocov(c) for c in x])
        chain_var = acov[:, 0] * n / (n - 1)
        W = chain_var.mean()
        var_plus = W * (n - 1) / n + (x.mean(axis=1).var(ddof=1) if C > 1 else 0.0)
        if var_plus <= 0:
            out[j] = C * n
            continue
        rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        pairs = []
        t = 0
        while t + 1 < n:
            s = rho[t] + rho[t + 1]
            if s < 0:
                break
            pairs.append(s)
            t += 2
        pairs = np.minimum.accumulate(np.asarray(pairs)) if pairs else np.array([1.0])
        tau = -1.0 + 2.0 * pairs.sum()
        out[j] = min(C * n / max(tau, 1e-12), C * n)
    return out


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction per coordinate; ``chains`` is ``(C, n, dim)``."""
    chains = np.asarray(chains, float)
    C, n, dim = chains.shape
    half = n // 2
    if half < 2:
        return np.full(dim, np.nan)
    parts = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, 1.0)


def sample_posterior(target, config: HmcConfig | None = None, x0=None) -> PosteriorSamples:
    """HMC draws from ``target`` started at its MAP (or ``x0``).

    Returns :class:`PosteriorSamples` with chains concatenated in order.
    For ``mtl-z`` targets with free offsets, offsets are drawn from their
    exact conditional given each latent draw.
    """
    config = config or HmcConfig()
    start = time.perf_counter()
    deadline = None if config.max_seconds is None else start + config.max_seconds
    dim = target.dim
    variant = getattr(target, "variant", "custom")
    per_chain = int(np.ceil(config.n_samples / config.chains))
    if dim == 0:
        draws = np.zeros((config.n_samples, 0))
        diag = {"ess": [], "rhat": [], "chains": []}
        return _finalise(target, draws, variant, diag, np.random.default_rng(config.seed))
    q0 = _best_map(target, config) if x0 is None else np.asarray(x0, float)
    if config.hessian_mass and config.inv_mass is None:
        h = -hessian_diagonal(target, q0)
        config = replace(config, inv_mass=np.where(h > 1e-8, 1.0 / np.maximum(h, 1e-8), 1.0))
    chains, infos = [], []
    for c in range(config.chains):
        rng = np.random.default_rng([config.seed, c])
        draws, info = _run_chain(target, q0, config, rng, per_chain, deadline)
        chains.append(draws)
        infos.append(info)
    n_min = min(len(c) for c in chains)
    stacked = np.asarray([c[:n_min] for c in chains])
    iterations = sum(i["iterations"] for i in infos)
    divergences = sum(i["divergences"] for i in infos)
    truncated = any(i["truncated"] for i in infos)
    if iterations and divergences / iterations > config.max_divergence_rate:
        raise SamplerError(f"{divergences} of {iterations} transitions diverged; "
                           "reduce the step size or raise the target acceptance")
    draws = np.concatenate(chains, axis=0)[:config.n_samples]
    diag = {
        "ess": effective_sample_size(stacked).tolist(),
        "rhat": split_rhat(stacked).tolist(),
        "chains": infos,
        "divergences": divergences,
        "truncated": truncated,
        "map": np.asarray(q0).tolist(),
        "seconds": time.perf_counter() - start,
    }
    return _finalise(target, draws, variant, diag, np.random.default_rng([config.seed, 99]))


def _finalise(target, draws, variant, diag, rng):
    alpha = None
    fixed_z = getattr(target, "fixed_z", None)
    if variant == "mtl-z" and target.model.free_alpha:
        alpha = np.empty((len(draws), target.model.d))
        for m, z in enumerate(draws):
            _, _, mean, prec = collapsed_task_density(target.model, target.model.unconstrained(z),
                                                      target.task, with_grad=False)
            alpha[m] = mean + rng.normal(size=mean.size) / np.sqrt(prec)
    return PosteriorSamples(samples=np.asarray(draws), variant=variant, alpha=alpha,
                            fixed_z=None if fixed_z is None else np.asarray(fixed_z), diagnostics=diag)


def infer(model: MtlModel, task: Task, t: int, variant: str | None = None, config: HmcConfig | None = None,
          flags: PreprocessFlags | None = None, fixed_z=None, prior: GaussianPrior | None = None):
    """Preprocess the prefix of ``task`` at ``t`` and sample the variant matching ``model.kind``."""
    if variant is None:
        variant = {"mtl": "mtl-z", "cohort": "cohort-alpha", "task-d": "taskd-alpha", "stl": "stl-lambda"}[model.kind]
    if variant == "taskd-alpha" and fixed_z is None:
        from .mtl import task_descriptor_codes
        fixed_z = task_descriptor_codes([task], model.covariate_standardization)[0][0]
    target = InferenceTarget(variant, model, preprocess_prefix(task, t, flags), fixed_z=fixed_z, prior=prior)
    return sample_posterior(target, config)
