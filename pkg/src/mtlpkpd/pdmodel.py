"""Deterministic PD state-space model with a sigmoid-basis emission.

Per channel ``j`` the effect site follows ``x_t = beta1 u_t + beta2 x_{t-1}``
and the noiseless emission is ``sum_r theta_r sigmoid(a_r (x_t + beta3 - b_r)) + alpha``.
Observations add Gaussian noise with precision ``tau``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, nnls
from scipy.signal import lfilter
from scipy.special import expit

from .pkmodel import ConcentrationSeries, InvalidParameterError

LOG_2PI = np.log(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when series lengths or channel counts disagree."""


@dataclass(frozen=True)
class BasisConfig:
    """Slopes ``a`` (all negative) and offsets ``b`` (strictly increasing) of the sigmoid basis."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        if a.size == 0 or a.shape != b.shape:
            raise InvalidParameterError("basis slopes and offsets must be non-empty and of equal length")
        if np.any(a >= 0):
            raise InvalidParameterError("basis slopes must be negative")
        if np.any(np.diff(b) <= 0):
            raise InvalidParameterError("basis offsets must be strictly increasing")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def L(self) -> int:
        return self.a.size

    def features(self, x: np.ndarray) -> np.ndarray:
        """``sigmoid(a_r (x - b_r))`` with a trailing basis axis."""
        x = np.asarray(x, dtype=float)
        return expit((x[..., None] - self.b) * self.a)

    def evaluate(self, x, theta) -> np.ndarray:
        return self.features(x) @ np.asarray(theta, dtype=float)

    def to_json_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "BasisConfig":
        return cls(np.asarray(data["a"], float), np.asarray(data["b"], float))


@dataclass
class PdParams:
    """Per-channel PD parameters; arrays have a leading channel axis of length ``d``.

    Also used as the container for gradients, so construction does not
    validate; call :meth:`validate` where the constraints matter.
    """

    beta1: np.ndarray
    beta2: np.ndarray
    beta3: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray

    @property
    def d(self) -> int:
        return len(self.beta1)

    @property
    def L(self) -> int:
        return self.theta.shape[1]

    def validate(self) -> "PdParams":
        if not np.all(self.beta1 > 0):
            raise InvalidParameterError("beta1 must be positive")
        if not np.all((self.beta2 > 0) & (self.beta2 < 1)):
            raise InvalidParameterError("beta2 must lie in (0, 1)")
        if not np.all(self.theta >= 0):
            raise InvalidParameterError("theta must be non-negative")
        for name in ("beta1", "beta2", "beta3", "theta", "alpha"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"{name} must be finite")
        return self

    def copy(self) -> "PdParams":
        return PdParams(*(np.array(getattr(self, f), dtype=float) for f in
                          ("beta1", "beta2", "beta3", "theta", "alpha")))

    def to_json_dict(self) -> dict:
        return {f: np.asarray(getattr(self, f)).tolist() for f in ("beta1", "beta2", "beta3", "theta", "alpha")}

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "PdParams":
        return cls(*(np.asarray(data[f], float) for f in ("beta1", "beta2", "beta3", "theta", "alpha")))


@dataclass
class Trajectory:
    x: np.ndarray
    yhat: np.ndarray


@dataclass
class Task:
    """One patient: input series ``u`` and ``(T, d)`` observations.

    ``missing`` is True where an observation is absent (artefact, dropout,
    or deliberately hidden); those entries never enter a likelihood.
    """

    id: str
    u: np.ndarray
    y: np.ndarray
    missing: np.ndarray | None = None
    dt: float = 0.25
    covariates: dict | None = None
    channels: Sequence[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != self.u.size:
            raise ShapeError(f"task {self.id}: u has {self.u.size} steps but y has {y.shape[0]}")
        if self.missing is None:
            missing = ~np.isfinite(y)
        else:
            missing = np.asarray(self.missing, dtype=bool).reshape(y.shape) | ~np.isfinite(y)
        self.y = y
        self.missing = missing
        if self.channels is None:
            self.channels = [f"y{j + 1}" for j in range(y.shape[1])]

    @property
    def T(self) -> int:
        return self.u.size

    @property
    def d(self) -> int:
        return self.y.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~self.missing

    def with_missing(self, missing: np.ndarray) -> "Task":
        return replace(self, missing=np.asarray(missing, dtype=bool))

    def truncate(self, t: int) -> "Task":
        return replace(self, u=self.u[:t], y=self.y[:t], missing=self.missing[:t])


def discretize_effect_site(k1e: float, ke0: float, dt: float = 1.0) -> tuple[float, float]:
    """Exact one-step coefficients of the effect-site ODE under a held input.

    Returns ``(beta1, beta2)`` with ``beta2 = exp(-ke0 dt)`` and
    ``beta1 = (k1e / ke0) (1 - beta2)``.
    """
    if not (k1e > 0 and ke0 > 0):
        raise InvalidParameterError("k1e and ke0 must be positive")
    beta2 = np.exp(-ke0 * dt)
    beta1 = k1e * dt * -np.expm1(-ke0 * dt) / (ke0 * dt)
    return float(beta1), float(beta2)


def _input(u: np.ndarray, lag: bool) -> np.ndarray:
    if lag:
        return np.concatenate([[0.0], u[:-1]])
    return u


def effect_site(beta1, beta2, u, x0=None, lag: bool = False) -> np.ndarray:
    """Run the effect-site recurrence for every channel; returns ``(T, d)``."""
    u_in = _input(np.asarray(u, float), lag)
    d = len(beta1)
    x = np.empty((u_in.size, d))
    for j in range(d):
        if x0 is None or x0[j] == 0.0:
            x[:, j] = lfilter([beta1[j]], [1.0, -beta2[j]], u_in)
        else:
            x[:, j] = lfilter([beta1[j]], [1.0, -beta2[j]], u_in, zi=[beta2[j] * x0[j]])[0]
    return x


def _forward(params: PdParams, basis: BasisConfig, u, x0, lag, rows=None):
    # with ``rows`` the emission (sig, yhat) is evaluated on those rows only
    x = effect_site(params.beta1, params.beta2, u, x0, lag)
    xs = x if rows is None else x[rows]
    # (T, d, L)
    sig = expit((xs[:, :, None] + params.beta3[None, :, None] - basis.b) * basis.a)
    yhat = np.einsum("tdl,dl->td", sig, params.theta) + params.alpha
    return x, sig, yhat


def observed_rows(task: "Task"):
    """Row indices carrying an observation, or None when restricting would not pay off."""
    any_obs = task.observed.any(axis=1)
    if any_obs.mean() > 0.7:
        return None
    return np.flatnonzero(any_obs)


def simulate(params: PdParams, basis: BasisConfig, u, x0=None, lag: bool = False) -> Trajectory:
    """Noiseless trajectory of the PD model.

    ``u`` may be a :class:`ConcentrationSeries` or a plain array. With
    ``lag=True`` the state at step ``t`` is driven by ``u_{t-1}`` (with
    ``u_0 = 0``) instead of ``u_t``.
    """
    if isinstance(u, ConcentrationSeries):
        u = u.values
    if params.theta.shape != (params.d, basis.L):
        raise ShapeError(f"theta has shape {params.theta.shape}, expected {(params.d, basis.L)}")
    x, _, yhat = _forward(params, basis, np.asarray(u, float), x0, lag)
    return Trajectory(x=x, yhat=yhat)


def _check_task(params: PdParams, task: Task):
    if task.d != params.d:
        raise ShapeError(f"task {task.id} has {task.d} channels, parameters have {params.d}")


def log_likelihood(params: PdParams, basis: BasisConfig, task: Task, tau, lag: bool = False) -> float:
    """Gaussian log-likelihood of the observed entries of ``task``."""
    _check_task(params, task)
    obs = task.observed
    if not obs.any():
        return 0.0
    _, _, yhat = _forward(params, basis, task.u, None, lag)
    tau = np.broadcast_to(np.asarray(tau, float), (task.d,))
    r = np.where(obs, task.y - yhat, 0.0)
    n = obs.sum(axis=0)
    return float(np.sum(0.5 * n * (np.log(tau) - LOG_2PI) - 0.5 * tau * (r ** 2).sum(axis=0)))


def grad_log_likelihood(params: PdParams, basis: BasisConfig, task: Task, tau, lag: bool = False,
                        with_tau: bool = False):
    """Log-likelihood and its exact gradient by a reverse sweep through the recurrence.

    Returns ``(value, grad)`` where ``grad`` is a :class:`PdParams` holding
    the partial derivatives; with ``with_tau`` a third element gives the
    derivative with respect to ``tau`` (per channel when ``tau`` is a vector).
    """
    _check_task(params, task)
    if not task.observed.any():
        d, L = params.d, basis.L
        zero = PdParams(np.zeros(d), np.zeros(d), np.zeros(d), np.zeros((d, L)), np.zeros(d))
        return (0.0, zero, np.zeros(np.shape(tau))) if with_tau else (0.0, zero)
    fwd = _forward(params, basis, task.u, None, lag)
    return _backward(params, basis, task, tau, lag, fwd, with_tau)


def _backward(params, basis, task, tau, lag, fwd, with_tau=False, rows=None):
    d = params.d
    obs = task.observed
    y = task.y
    if rows is not None:
        obs, y = obs[rows], y[rows]
    u_in = _input(task.u, lag)
    x, sig, yhat = fwd
    tau_v = np.broadcast_to(np.asarray(tau, float), (d,))
    r = np.where(obs, y - yhat, 0.0)
    n = obs.sum(axis=0)
    ss = (r ** 2).sum(axis=0)
    value = float(np.sum(0.5 * n * (np.log(tau_v) - LOG_2PI) - 0.5 * tau_v * ss))

    e = r * tau_v                                   # d ll / d yhat
    g_alpha = e.sum(axis=0)
    g_theta = np.einsum("td,tdl->dl", e, sig)
    dh = sig * (1.0 - sig) * basis.a                # d sigma / d (x + beta3)
    gx = np.einsum("td,tdl,dl->td", e, dh, params.theta)
    g_beta3 = gx.sum(axis=0)
    if rows is not None:
        full = np.zeros_like(x)
        full[rows] = gx
        gx = full
    # adjoint of x_t = beta1 u_t + beta2 x_{t-1}: lam_t = gx_t + beta2 lam_{t+1}
    lam = np.empty_like(gx)
    for j in range(d):
        lam[::-1, j] = lfilter([1.0], [1.0, -params.beta2[j]], gx[::-1, j])
    g_beta1 = u_in @ lam
    g_beta2 = np.einsum("td,td->d", lam[1:], x[:-1])
    grad = PdParams(g_beta1, g_beta2, g_beta3, g_theta, g_alpha)
    if with_tau:
        g_tau = 0.5 * n / tau_v - 0.5 * ss
        if np.ndim(tau) == 0:
            g_tau = float(g_tau.sum())
        return value, grad, g_tau
    return value, grad


def emission_without_alpha(params: PdParams, basis: BasisConfig, u, lag: bool = False) -> np.ndarray:
    """Noiseless emission with the offsets removed, ``(T, d)``."""
    zero_alpha = replace(params, alpha=np.zeros(params.d))
    return _forward(zero_alpha, basis, np.asarray(u, float), None, lag)[2]


# --------------------------------------------------------------------------
# basis fitting


def generalised_sigmoid(x, lower: float, upper: float, slope: float, shape: float):
    """``lower + (upper - lower) / (1 + exp(-slope x)) ** (1 / shape)``."""
    x = np.asarray(x, dtype=float)
    return lower + (upper - lower) * np.exp(-np.logaddexp(0.0, -slope * x) / shape)


def descending_generalised_sigmoid(lower=0.0, upper=1.0, slope=1.0, shape=1.0, centre=0.0):
    """Generalised sigmoid mirrored about ``centre`` so that it falls from ``upper`` to ``lower``."""
    return lambda x: generalised_sigmoid(centre - np.asarray(x, float), lower, upper, slope, shape)


@dataclass
class BasisFit:
    basis: BasisConfig
    theta: np.ndarray
    max_abs_error: float
    converged: bool
    message: str = ""


def _basis_design(x, a, b):
    return expit((x[:, None] - b) * a)


def fit_basis(target: Callable[[np.ndarray], np.ndarray], L: int = 8, domain=(-10.0, 10.0),
              n_grid: int = 2001, n_minimax: int = 30, init: BasisConfig | None = None) -> BasisFit:
    """Fit ``sum_r theta_r sigmoid(a_r (x - b_r))`` to ``target`` in the max-abs sense.

    A bounded least-squares fit (``a <= 0``, ``theta >= 0``) is followed by
    Lawson-style reweighting towards the minimax solution; the best
    iterate by max-abs error is kept. Offsets are returned sorted.
    """
    if L < 1:
        raise InvalidParameterError("basis size must be at least 1")
    lo, hi = map(float, domain)
    x = np.linspace(lo, hi, n_grid)
    y = np.asarray(target(x), dtype=float)
    width = hi - lo
    if init is None:
        a0 = np.full(L, -4.0 * L / width)
        b0 = lo + (np.arange(L) + 0.5) * width / L
    else:
        a0, b0 = init.a.copy(), init.b.copy()
    th0, _ = nnls(_basis_design(x, a0, b0), y)
    th0 = np.maximum(th0, 1e-3 * max(np.abs(y).max(), 1e-12))
    p0 = np.concatenate([a0, b0, th0])
    a_cap = -1e-8
    # offsets stay inside the domain so no basis function degenerates into a constant there
    lower = np.concatenate([np.full(L, -np.inf), np.full(L, lo), np.zeros(L)])
    upper = np.concatenate([np.full(L, a_cap), np.full(L, hi), np.full(L, np.inf)])
    p0[:L] = np.minimum(p0[:L], a_cap * 2)

    def residual(p, w):
        a, b, th = p[:L], p[L:2 * L], p[2 * L:]
        return w * (_basis_design(x, a, b) @ th - y)

    def jac(p, w):
        a, b, th = p[:L], p[L:2 * L], p[2 * L:]
        S = _basis_design(x, a, b)
        dS = S * (1 - S)
        diff = x[:, None] - b
        J = np.hstack([dS * diff * th, -dS * a * th, S])
        return w[:, None] * J

    w = np.ones_like(x)
    best = None
    converged = False
    message = ""
    p = p0
    for it in range(n_minimax + 1):
        sol = least_squares(residual, p, jac=jac, bounds=(lower, upper), args=(w,),
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000 if it == 0 else 300)
        p = sol.x
        # with (a, b) fixed the weights are an NNLS problem; exact zeros survive
        th, _ = nnls(_basis_design(x, p[:L], p[L:2 * L]) * w[:, None], w * y)
        p = np.concatenate([p[:2 * L], th])
        err = np.abs(residual(p, np.ones_like(x)))
        max_err = float(err.max())
        converged = converged or bool(sol.success)
        if best is None or max_err < best[0]:
            best = (max_err, p.copy())
            message = sol.message
        if max_err < 1e-12:
            break
        w = w * (err / err.max() + 1e-3)
        w = w / w.mean()
    max_err, p = best
    a, b, th = p[:L], p[L:2 * L], p[2 * L:]
    order = np.argsort(b)
    a, b, th = a[order], b[order], th[order]
    # canonical strict ordering even if two offsets collapsed
    for r in range(1, L):
        if b[r] <= b[r - 1]:
            b[r] = np.nextafter(b[r - 1], np.inf) + 1e-9 * max(1.0, abs(b[r - 1]))
    if not converged:
        warnings.warn(f"basis fit did not converge: {message}; returning best iterate")
    return BasisFit(BasisConfig(a, b), th, max_err, converged, str(message))


DEFAULT_BASIS_DOMAIN = (-1.0, 7.0)

# fit_basis(default_basis_target(), 8, DEFAULT_BASIS_DOMAIN, n_grid=801, n_minimax=10);
# max-abs error 2.57e-6. Frozen so that every model shares the same basis.
_FROZEN_L8 = BasisConfig(
    a=np.array([-1.180041099918237, -1.4632099651394397, -1.7037213502890103, -1.8760232083537387,
                -1.980817732132179, -2.0503500130697554, -2.0809737213344346, -2.118207467526178]),
    b=np.array([-0.4130358759091852, 0.7717115601211822, 1.6016846685709054, 2.2998725865485454,
                2.951649867842437, 3.6264093244234274, 4.399517942961084, 5.392137107865629]),
)


def default_basis_target(domain=DEFAULT_BASIS_DOMAIN):
    """Broad asymmetric descending generalised sigmoid whose transition spans ``domain``."""
    lo, hi = domain
    return descending_generalised_sigmoid(0.0, 1.0, slope=8.0 / (hi - lo), shape=0.5, centre=0.5 * (lo + hi))


_BASIS_CACHE: dict = {}


def default_basis(L: int = 8, domain=DEFAULT_BASIS_DOMAIN) -> BasisConfig:
    """The shared basis: :func:`default_basis_target` fitted with ``L`` functions.

    Keeping every basis function active over typical effect-site
    concentrations matters more here than the exact target shape.
    """
    lo, hi = map(float, domain)
    if L == 8 and (lo, hi) == DEFAULT_BASIS_DOMAIN:
        return _FROZEN_L8
    key = (L, lo, hi)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = fit_basis(default_basis_target((lo, hi)), L, (lo, hi), n_grid=801, n_minimax=10).basis
    return _BASIS_CACHE[key]
