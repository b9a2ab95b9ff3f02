"""Low-rank multi-task model over PD parameters.

Each task has a latent code ``z ~ N(0, I)``; its unconstrained parameter
vector is ``v = offset + Psi z`` and the PD parameters are the elementwise
transform ``f(v)`` unpacked channel by channel. ``offset`` is zero in the
plain formulation and is learned as a shared population centre by default.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from .pdmodel import (LOG_2PI, BasisConfig, PdParams, ShapeError, Task, _backward, _forward, observed_rows)

SOFTPLUS, SIGMOID, IDENTITY = "softplus", "sigmoid", "identity"
ALPHA_MODES = ("free-per-task", "in-subspace")
MODEL_KINDS = ("mtl", "cohort", "task-d", "stl")
_TINY = np.finfo(float).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class ParamLayout:
    """Position of every PD parameter inside the vector ``lambda``.

    Per channel the block is ``(beta1, beta2, beta3, theta_1..theta_L[, alpha])``
    and channel blocks are concatenated.
    """

    d: int
    L: int
    alpha_in_lambda: bool = False

    @property
    def block(self) -> int:
        return 3 + self.L + int(self.alpha_in_lambda)

    @property
    def p(self) -> int:
        return self.d * self.block

    @cached_property
    def index(self) -> dict:
        base = np.arange(self.d) * self.block
        idx = {
            "beta1": base,
            "beta2": base + 1,
            "beta3": base + 2,
            "theta": base[:, None] + 3 + np.arange(self.L)[None, :],
        }
        if self.alpha_in_lambda:
            idx["alpha"] = base + 3 + self.L
        return idx

    @cached_property
    def kinds(self) -> np.ndarray:
        kinds = np.full(self.p, IDENTITY, dtype=object)
        kinds[self.index["beta1"]] = SOFTPLUS
        kinds[self.index["theta"].ravel()] = SOFTPLUS
        kinds[self.index["beta2"]] = SIGMOID
        return kinds

    @cached_property
    def _masks(self):
        return self.kinds == SOFTPLUS, self.kinds == SIGMOID

    def names(self) -> list[str]:
        out = []
        for j in range(self.d):
            out += [f"beta1[{j}]", f"beta2[{j}]", f"beta3[{j}]"] + [f"theta[{j},{r}]" for r in range(self.L)]
            if self.alpha_in_lambda:
                out.append(f"alpha[{j}]")
        return out

    def to_json_dict(self) -> dict:
        return {"d": self.d, "L": self.L, "alpha_in_lambda": self.alpha_in_lambda,
                "order": ["beta1", "beta2", "beta3", "theta[1..L]"] + (["alpha"] if self.alpha_in_lambda else []),
                "transforms": list(self.kinds)}

    # transforms -----------------------------------------------------------

    def transform(self, v: np.ndarray) -> np.ndarray:
        sp, sg = self._masks
        out = np.array(v, dtype=float)
        # clamp so saturation in floating point cannot reach the closed boundaries
        out[sp] = np.maximum(softplus(out[sp]), _TINY)
        out[sg] = np.clip(expit(out[sg]), _TINY, _BELOW_ONE)
        return out

    def transform_deriv(self, v: np.ndarray) -> np.ndarray:
        sp, sg = self._masks
        out = np.ones(len(v))
        out[sp] = expit(v[sp])
        s = expit(v[sg])
        out[sg] = s * (1.0 - s)
        return out

    def inverse_transform(self, lam: np.ndarray) -> np.ndarray:
        sp, sg = self._masks
        out = np.array(lam, dtype=float)
        out[sp] = softplus_inv(out[sp])
        out[sg] = logit(out[sg])
        return out

    # packing --------------------------------------------------------------

    def unpack(self, lam: np.ndarray, alpha=None) -> PdParams:
        if lam.shape != (self.p,):
            raise ShapeError(f"lambda has shape {lam.shape}, expected ({self.p},)")
        idx = self.index
        if self.alpha_in_lambda:
            alpha = lam[idx["alpha"]]
        elif alpha is None:
            raise ShapeError("offsets alpha must be supplied when they are not part of lambda")
        return PdParams(lam[idx["beta1"]], lam[idx["beta2"]], lam[idx["beta3"]], lam[idx["theta"]],
                        np.asarray(alpha, dtype=float))

    def pack(self, params: PdParams) -> np.ndarray:
        """Inverse of :meth:`unpack`; also maps a gradient container onto ``lambda`` coordinates."""
        idx = self.index
        lam = np.empty(self.p)
        lam[idx["beta1"]] = params.beta1
        lam[idx["beta2"]] = params.beta2
        lam[idx["beta3"]] = params.beta3
        lam[idx["theta"]] = params.theta
        if self.alpha_in_lambda:
            lam[idx["alpha"]] = params.alpha
        return lam


@lru_cache(maxsize=64)
def _layout(d: int, L: int, alpha_in_lambda: bool) -> ParamLayout:
    return ParamLayout(d, L, alpha_in_lambda)


@dataclass
class MtlModel:
    """Everything shared across tasks.

    ``kind`` records which benchmark model this is: ``mtl`` (latent codes
    inferred), ``cohort`` (``k = 0``, only offsets per task), ``task-d``
    (codes fixed to standardised covariates), or ``stl`` (no sharing; the
    per-task ``v`` is sampled directly under a wide Gaussian prior).
    """

    psi: np.ndarray
    offset: np.ndarray
    basis: BasisConfig
    tau: float | np.ndarray
    d: int
    alpha_mode: str = "free-per-task"
    kind: str = "mtl"
    alpha_prior_sd: float = 100.0
    lag: bool = False
    covariate_standardization: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")
        psi = np.asarray(self.psi, dtype=float)
        self.psi = np.zeros((self.layout.p, 0)) if psi.size == 0 else psi.reshape(self.layout.p, -1)
        self.offset = np.asarray(self.offset, dtype=float).reshape(self.layout.p)
        if not (np.all(np.isfinite(self.psi)) and np.all(np.isfinite(self.offset))):
            raise ValueError("loading matrix and offset must be finite")

    @property
    def L(self) -> int:
        return self.basis.L

    @property
    def layout(self) -> ParamLayout:
        return _layout(self.d, self.basis.L, self.alpha_mode == "in-subspace")

    @property
    def p(self) -> int:
        return self.layout.p

    @property
    def k(self) -> int:
        return self.psi.shape[1]

    @property
    def free_alpha(self) -> bool:
        return self.alpha_mode == "free-per-task"

    def tau_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.tau, float), (self.d,)).copy()

    def unconstrained(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).ravel()
        if z.size != self.k:
            raise ShapeError(f"latent code has {z.size} entries, model has k={self.k}")
        return self.offset + self.psi @ z


@dataclass
class PosteriorSamples:
    """Equal-weight draws from a per-task posterior.

    ``samples`` holds the sampled coordinates (latent code, offsets, or the
    full unconstrained vector depending on ``variant``); ``alpha`` holds the
    offsets drawn alongside a latent code when they were integrated out.
    """

    samples: np.ndarray
    variant: str
    alpha: np.ndarray | None = None
    fixed_z: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.samples.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)


def decode_unconstrained(model: MtlModel, v: np.ndarray, alpha=None) -> PdParams:
    layout = model.layout
    return layout.unpack(layout.transform(v), alpha)


def decode(model: MtlModel, z, alpha=None) -> PdParams:
    """PD parameters of one task from its latent code (and offsets when they are free)."""
    if model.free_alpha and alpha is None:
        raise ShapeError("alpha must be supplied when alpha_mode is free-per-task")
    if not model.free_alpha and alpha is not None:
        raise ShapeError("alpha must not be supplied when it lives in the subspace")
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.size != model.d:
            raise ShapeError(f"alpha has {alpha.size} entries, expected {model.d}")
    return decode_unconstrained(model, model.unconstrained(z), alpha)


def std_normal_logpdf(z) -> float:
    z = np.asarray(z, dtype=float)
    return float(-0.5 * z.size * LOG_2PI - 0.5 * z @ z)


def _alpha_logprior(alpha, sd) -> float:
    alpha = np.asarray(alpha, float)
    return float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * (alpha / sd) ** 2))


def task_value_grad_v(model: MtlModel, v: np.ndarray, task: Task, alpha=None, with_tau=False):
    """Log-likelihood of one task and its gradient w.r.t. the unconstrained vector ``v``.

    Returns ``(value, grad_v, grad_alpha[, grad_tau])``; ``grad_alpha`` is
    None when the offsets live inside ``v``.
    """
    params = decode_unconstrained(model, v, alpha)
    if task.d != model.d:
        raise ShapeError(f"task {task.id} has {task.d} channels, model has {model.d}")
    if not task.observed.any():
        zeros = np.zeros(model.p)
        ga = np.zeros(model.d) if model.free_alpha else None
        out = (0.0, zeros, ga)
        return out + (np.zeros(np.shape(model.tau)),) if with_tau else out
    rows = observed_rows(task)
    fwd = _forward(params, model.basis, task.u, None, model.lag, rows)
    res = _backward(params, model.basis, task, model.tau, model.lag, fwd, with_tau, rows)
    value, g = res[0], res[1]
    gv = model.layout.pack(g) * model.layout.transform_deriv(v)
    ga = g.alpha if model.free_alpha else None
    out = (value, gv, ga)
    return out + (res[2],) if with_tau else out


def joint_log_density(model: MtlModel, Z, alphas, tasks: Sequence[Task], alpha_prior: bool = False) -> float:
    """``sum_i [log p(y_i | z_i) + log N(z_i; 0, I)]`` (plus the offset prior when requested)."""
    Z = np.asarray(Z, dtype=float).reshape(len(tasks), model.k)
    total = 0.0
    for i, task in enumerate(tasks):
        alpha = alphas[i] if model.free_alpha else None
        value = task_value_grad_v(model, model.unconstrained(Z[i]), task, alpha)[0]
        total += value + std_normal_logpdf(Z[i])
        if alpha_prior and model.free_alpha:
            total += _alpha_logprior(alpha, model.alpha_prior_sd)
    return float(total)


@dataclass
class JointGrad:
    value: float
    Z: np.ndarray
    psi: np.ndarray
    offset: np.ndarray
    alphas: np.ndarray | None
    tau: float | np.ndarray | None = None


def grad_joint(model: MtlModel, Z, alphas, tasks: Sequence[Task], alpha_prior: bool = False,
               with_tau: bool = False) -> JointGrad:
    """Joint log density and its gradient w.r.t. codes, loadings, offset vector and task offsets."""
    N = len(tasks)
    Z = np.asarray(Z, dtype=float).reshape(N, model.k)
    gZ = np.empty_like(Z)
    gpsi = np.zeros_like(model.psi)
    goff = np.zeros(model.p)
    galpha = np.zeros((N, model.d)) if model.free_alpha else None
    gtau = 0.0 if np.ndim(model.tau) == 0 else np.zeros(model.d)
    total = 0.0
    for i, task in enumerate(tasks):
        alpha = alphas[i] if model.free_alpha else None
        v = model.unconstrained(Z[i])
        value, gv, ga, gt = task_value_grad_v(model, v, task, alpha, with_tau=True)
        total += value + std_normal_logpdf(Z[i])
        gZ[i] = model.psi.T @ gv - Z[i]
        gpsi += np.outer(gv, Z[i])
        goff += gv
        gtau = gtau + gt
        if model.free_alpha:
            galpha[i] = ga
            if alpha_prior:
                total += _alpha_logprior(alpha, model.alpha_prior_sd)
                galpha[i] -= np.asarray(alpha) / model.alpha_prior_sd ** 2
    return JointGrad(total, gZ, gpsi, goff, galpha, gtau if with_tau else None)


def collapsed_task_density(model: MtlModel, v: np.ndarray, task: Task, with_grad: bool = True):
    """Log density of one task with its free offsets integrated out.

    The offsets enter linearly with a Gaussian prior, so the integral is
    exact. Returns ``(value, grad_v, alpha_mean, alpha_precision)`` where
    the gradient follows from the envelope theorem at the conditional mode.
    """
    if not model.free_alpha:
        raise ValueError("offsets can only be integrated out when they are free per task")
    d = model.d
    zero = np.zeros(d)
    params = decode_unconstrained(model, v, zero)
    obs = task.observed
    tau = model.tau_vector()
    s2 = model.alpha_prior_sd ** 2
    n = obs.sum(axis=0)
    prec = tau * n + 1.0 / s2
    if not obs.any():
        return 0.0, np.zeros(model.p), zero, prec
    rows = observed_rows(task)
    x, sig, g = _forward(params, model.basis, task.u, None, model.lag, rows)
    obs_r, y_r = (obs, task.y) if rows is None else (obs[rows], task.y[rows])
    resid_sum = np.where(obs_r, y_r - g, 0.0).sum(axis=0)
    alpha = tau * resid_sum / prec
    params.alpha = alpha
    fwd = (x, sig, g + alpha)
    if with_grad:
        ll, gp = _backward(params, model.basis, task, model.tau, model.lag, fwd, rows=rows)
        gv = model.layout.pack(gp) * model.layout.transform_deriv(v)
    else:
        r = np.where(obs_r, y_r - fwd[2], 0.0)
        ll = float(np.sum(0.5 * n * (np.log(tau) - LOG_2PI) - 0.5 * tau * (r ** 2).sum(axis=0)))
        gv = None
    value = ll + _alpha_logprior(alpha, model.alpha_prior_sd) + float(np.sum(0.5 * (LOG_2PI - np.log(prec))))
    return value, gv, alpha, prec


COVARIATE_FIELDS = ("age", "gender", "height", "weight", "bmi")


def task_descriptor_codes(tasks: Sequence[Task], standardization: Mapping | None = None,
                          fields: Sequence[str] | None = None):
    """Standardised covariate vectors used as fixed latent codes.

    Statistics (population convention) come from ``tasks`` unless a stored
    ``standardization`` is passed, which is how held-out tasks are coded.
    Returns ``(Z, standardization)``.
    """
    if standardization is not None:
        fields = list(standardization["fields"])
    elif fields is None:
        first = tasks[0].covariates or {}
        fields = [f for f in COVARIATE_FIELDS if f in first] or sorted(first)
    if not fields:
        raise ValueError("no covariate fields available")
    rows = []
    for task in tasks:
        cov = task.covariates or {}
        row = []
        for name in fields:
            if name not in cov or cov[name] is None:
                raise KeyError(f"task {task.id} is missing covariate '{name}'")
            row.append(float(cov[name]))
        rows.append(row)
    X = np.asarray(rows, dtype=float)
    if standardization is None:
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if flat.any():
            warnings.warn(f"covariates with zero variance mapped to 0: {[f for f, c in zip(fields, flat) if c]}")
        standardization = {"fields": list(fields), "mean": mean.tolist(), "sd": np.where(flat, 0.0, sd).tolist()}
    mean = np.asarray(standardization["mean"], float)
    sd = np.asarray(standardization["sd"], float)
    safe = np.where(sd > 0, sd, 1.0)
    Z = np.where(sd > 0, (X - mean) / safe, 0.0)
    return Z, standardization
