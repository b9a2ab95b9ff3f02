"""Posterior-predictive forecasts and the forecast metrics.

The predictive distribution at each future step is an equal-weight
mixture over posterior draws of Gaussians centred on the simulated
trajectories. Intervals default to the noiseless signal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, ndtr

from .mtl import MtlModel, PosteriorSamples, decode_unconstrained
from .pdmodel import LOG_2PI, PdParams, Task, simulate

HORIZONS = (20, 40)
INTERVAL_MODES = ("function", "observation")


def posterior_params(model: MtlModel, posterior: PosteriorSamples) -> list[PdParams]:
    """Decode every posterior draw into PD parameters."""
    variant = posterior.variant
    out = []
    if variant == "mtl-z":
        for m, z in enumerate(posterior.samples):
            alpha = posterior.alpha[m] if model.free_alpha else None
            out.append(decode_unconstrained(model, model.unconstrained(z), alpha))
    elif variant in ("cohort-alpha", "taskd-alpha"):
        z = np.zeros(model.k) if posterior.fixed_z is None else posterior.fixed_z
        v = model.unconstrained(z)
        base = decode_unconstrained(model, v, np.zeros(model.d))
        for alpha in posterior.samples:
            out.append(replace(base, alpha=np.asarray(alpha, float)))
    elif variant == "stl-lambda":
        for v in posterior.samples:
            out.append(decode_unconstrained(model, np.asarray(v, float)))
    else:
        raise ValueError(f"cannot decode posterior variant {variant!r}")
    return out


def simulate_draws(model: MtlModel, posterior: PosteriorSamples, u) -> np.ndarray:
    """Noiseless trajectories ``(M, T, d)`` for every draw."""
    if posterior.M == 0:
        raise ValueError("posterior has no draws")
    return np.asarray([simulate(p, model.basis, u, lag=model.lag).yhat for p in posterior_params(model, posterior)])


def mixture_quantiles(means, sd, probs, n_grid: int = 4001) -> np.ndarray:
    """Quantiles of an equal-weight Gaussian mixture with common ``sd``, by CDF inversion on a grid."""
    means = np.asarray(means, float).ravel()
    probs = np.asarray(probs, float)
    if sd <= 0:
        return np.quantile(means, probs)
    lo, hi = means.min() - 8 * sd, means.max() + 8 * sd
    grid = np.linspace(lo, hi, n_grid)
    if means.size * n_grid <= 4_000_000:
        cdf = ndtr((grid[:, None] - means[None, :]) / sd).mean(axis=1)
    else:
        # bin the component means, then convolve with the common Gaussian CDF shape
        dx = grid[1] - grid[0]
        hist = np.bincount(np.clip(np.rint((means - lo) / dx).astype(int), 0, n_grid - 1),
                           minlength=n_grid) / means.size
        half = int(np.ceil(8 * sd / dx))
        offs = np.arange(-half, half + 1) * dx
        kernel = np.diff(ndtr(np.concatenate([[-np.inf], (offs[:-1] + offs[1:]) / 2, [np.inf]]) / sd))
        cdf = np.cumsum(np.convolve(hist, kernel, mode="same"))
    return np.interp(probs, cdf, grid)


@dataclass
class PredictiveSummary:
    """Forecast for rows ``t .. t+r-1`` (0-based), i.e. steps ``t+1 .. t+r``.

    ``draws`` holds the component means ``(M, r, d)``; ``retro`` the
    predictive mean over the prefix ``(t, d)``.
    """

    t: int
    r: int
    mean: np.ndarray
    lower: np.ndarray | None
    upper: np.ndarray | None
    draws: np.ndarray
    tau: np.ndarray
    level: float = 0.9
    mode: str = "function"
    retro: np.ndarray | None = None
    channels: list | None = None

    def head(self, r: int) -> "PredictiveSummary":
        """The first ``r`` steps of this forecast."""
        if r > self.r:
            raise ValueError(f"summary covers {self.r} steps, asked for {r}")
        cut = lambda a: None if a is None else a[:r] if a.ndim == 2 else a[:, :r]
        return replace(self, r=r, mean=self.mean[:r], lower=cut(self.lower), upper=cut(self.upper),
                       draws=self.draws[:, :r])

    def rows(self, task: Task | None = None):
        """Flat records ``(t, channel, horizon, mean, lo, hi, y_observed)``."""
        channels = self.channels or [f"y{j + 1}" for j in range(self.mean.shape[1])]
        out = []
        for h in range(self.r):
            for j, ch in enumerate(channels):
                y = np.nan
                if task is not None and not task.missing[self.t + h, j]:
                    y = float(task.y[self.t + h, j])
                out.append({"t": self.t, "channel": ch, "horizon": h + 1, "mean": float(self.mean[h, j]),
                            "lo": float(self.lower[h, j]) if self.lower is not None else np.nan,
                            "hi": float(self.upper[h, j]) if self.upper is not None else np.nan,
                            "y_observed": y})
        return out


def predict(model: MtlModel, posterior: PosteriorSamples, task: Task, t: int, r: int, level: float = 0.9,
            mode: str = "function", intervals: bool = True, n_grid: int = 4001) -> PredictiveSummary:
    """Monte Carlo posterior-predictive forecast ``r`` steps beyond the prefix of length ``t``."""
    if mode not in INTERVAL_MODES:
        raise ValueError(f"mode must be one of {INTERVAL_MODES}")
    if r < 1 or t < 0:
        raise ValueError("need t >= 0 and r >= 1")
    if t + r > task.T:
        raise ValueError(f"horizon t+r={t + r} exceeds the series length {task.T}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    traj = simulate_draws(model, posterior, task.u[:t + r])
    draws = traj[:, t:t + r]
    mean = draws.mean(axis=0)
    tau = model.tau_vector()
    lower = upper = None
    if intervals:
        probs = np.array([(1 - level) / 2, (1 + level) / 2])
        lower = np.empty_like(mean)
        upper = np.empty_like(mean)
        for h in range(r):
            for j in range(mean.shape[1]):
                col = draws[:, h, j]
                if mode == "function":
                    lo, hi = np.quantile(col, probs)
                else:
                    lo, hi = mixture_quantiles(col, 1.0 / np.sqrt(tau[j]), probs, n_grid)
                lower[h, j], upper[h, j] = lo, hi
    return PredictiveSummary(t=t, r=r, mean=mean, lower=lower, upper=upper, draws=draws, tau=tau, level=level,
                             mode=mode, retro=traj[:, :t].mean(axis=0), channels=list(task.channels))


def _window(task: Task, t: int, r: int):
    obs = task.observed[t:t + r]
    return task.y[t:t + r], obs


def rmse(summary: PredictiveSummary, task: Task, t: int | None = None, r: int | None = None) -> np.ndarray:
    """Per-channel RMSE of the predictive mean over observed entries of the window; NaN when none."""
    t = summary.t if t is None else t
    r = summary.r if r is None else r
    y, obs = _window(task, t, r)
    err = np.where(obs, y - summary.mean[:r], 0.0)
    n = obs.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, np.sqrt((err ** 2).sum(axis=0) / np.maximum(n, 1)), np.nan)


def _mixture_nll(log_tau, resid_ss, n, M):
    # resid_ss: (M,) residual sums of squares per component
    tau = np.exp(log_tau)
    comp = 0.5 * n * (log_tau - LOG_2PI) - 0.5 * tau * resid_ss
    return -(logsumexp(comp) - np.log(M))


def window_nll(summary: PredictiveSummary, task: Task, tau=None, r: int | None = None) -> np.ndarray:
    """Per-channel mixture NLL of the window observations at precision ``tau`` (default: the model's)."""
    r = summary.r if r is None else r
    y, obs = _window(task, summary.t, r)
    tau = summary.tau if tau is None else np.broadcast_to(np.asarray(tau, float), summary.tau.shape)
    out = np.full(y.shape[1], np.nan)
    for j in range(y.shape[1]):
        o = obs[:, j]
        if not o.any():
            continue
        ss = ((y[o, j][None, :] - summary.draws[:, :r][:, o, j]) ** 2).sum(axis=1)
        out[j] = _mixture_nll(np.log(tau[j]), ss, o.sum(), len(ss))
    return out


def nll_upper_bound(summary: PredictiveSummary, task: Task, t: int | None = None, r: int | None = None,
                    n_grid: int = 81) -> np.ndarray:
    """Per-channel window NLL minimised over a scalar precision.

    A log-spaced grid (covering every component's own optimum and the
    training precision) locates a bracket, and golden-section search
    refines inside it. The result never exceeds the NLL at the training
    precision. NaN for channels without observations.
    """
    if t is not None and t != summary.t:
        raise ValueError("t does not match the summary")
    r = summary.r if r is None else r
    y, obs = _window(task, summary.t, r)
    out = np.full(y.shape[1], np.nan)
    for j in range(y.shape[1]):
        o = obs[:, j]
        if not o.any():
            continue
        n = int(o.sum())
        ss = ((y[o, j][None, :] - summary.draws[:, :r][:, o, j]) ** 2).sum(axis=1)
        M = len(ss)
        f = lambda lt: _mixture_nll(lt, ss, n, M)
        train = np.log(summary.tau[j])
        own = np.log(n / np.maximum(ss, 1e-300))
        lo = min(own.min(), train) - 3.0
        hi = max(own.max(), train) + 3.0
        grid = np.linspace(lo, hi, n_grid)
        vals = np.array([f(g) for g in grid])
        i = int(np.argmin(vals))
        best = vals[i]
        if 0 < i < n_grid - 1:
            res = minimize_scalar(f, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                                  options={"xtol": 1e-10})
            if np.isfinite(res.fun):
                best = min(best, float(res.fun))
        out[j] = min(best, f(train))
    return out


def retrospective_fit(model: MtlModel, posterior: PosteriorSamples, task: Task, t: int, start: int = 16) -> np.ndarray:
    """Per-channel RMSE of the predictive mean against the observed prefix rows ``start .. t-1``.

    NaN where no observation falls in that range (e.g. ``t <= start``).
    """
    if t > task.T:
        raise ValueError("t exceeds the series length")
    d = task.d
    if t <= start:
        return np.full(d, np.nan)
    mean = simulate_draws(model, posterior, task.u[:t]).mean(axis=0)
    return _prefix_rmse(mean, task, t, start)


def _prefix_rmse(mean, task, t, start):
    obs = task.observed[start:t]
    err = np.where(obs, task.y[start:t] - mean[start:t], 0.0)
    n = obs.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, np.sqrt((err ** 2).sum(axis=0) / np.maximum(n, 1)), np.nan)


def retrospective_from_summary(summary: PredictiveSummary, task: Task, start: int = 16) -> np.ndarray:
    """Same as :func:`retrospective_fit` but reusing the trajectories already simulated by :func:`predict`."""
    if summary.t <= start:
        return np.full(task.d, np.nan)
    return _prefix_rmse(summary.retro, task, summary.t, start)
