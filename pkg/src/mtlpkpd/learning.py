"""Offline training: joint MAP of codes and loadings, and the baseline models.

All fits share one engine. Per epoch the free task offsets and the noise
precision are set to their exact conditional optima, then one Adam step is
taken on the remaining shared quantities (and the codes, when inferred).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize, nnls
from scipy.signal import lfilter
from scipy.special import expit

from .mtl import (MtlModel, ParamLayout, _alpha_logprior, collapsed_task_density, std_normal_logpdf,
                  task_descriptor_codes)
from .pdmodel import LOG_2PI, BasisConfig, Task, _backward, _forward, default_basis

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Raised when optimisation diverges; carries the objective trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class TrainConfig:
    """Optimiser settings.

    ``early_stop_patience`` counts held-out evaluations, which happen every
    ``eval_every`` epochs. ``fixed_tau`` freezes the noise precision.
    """

    k: int = 2
    lr: float = 1e-2
    lr_decay: float = 0.5
    plateau_patience: int = 50
    min_lr: float = 1e-4
    max_epochs: int = 2000
    rescale_every: int = 10
    eval_every: int = 10
    early_stop_patience: int = 20
    holdout: int = 2
    seed: int = 0
    learn_offset: bool = True
    init_from_cohort: bool = True
    cohort_epochs: int = 500
    fixed_tau: float | None = None
    per_channel_tau: bool = False
    tau_max: float = 1e10
    alpha_mode: str = "free-per-task"
    alpha_prior_sd: float = 100.0
    psi_init_scale: float = 0.1
    psi_prior_sd: float | None = None
    rel_tol: float = 1e-9
    lag: bool = False

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        for name in ("max_epochs", "rescale_every", "eval_every", "early_stop_patience", "plateau_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class FitReport:
    objective: float
    objective_trace: list = field(default_factory=list)
    epochs: int = 0
    rescale_events: list = field(default_factory=list)
    grad_norm_trace: list = field(default_factory=list)
    holdout_trace: list = field(default_factory=list)
    holdout_ids: list = field(default_factory=list)
    stopped_early: bool = False
    tau: list = field(default_factory=list)
    bic: float | None = None
    alphas: np.ndarray | None = None
    task_ids: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out = asdict(self)
        out["alphas"] = None if self.alphas is None else np.asarray(self.alphas).tolist()
        return out


class Adam:
    """Adam for gradient *ascent* on a dict of arrays."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1 ** self.t)
            vhat = self.v[name] / (1 - self.b2 ** self.t)
            params[name] = params[name] + self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def rescale_columns(self, name: str, factor: np.ndarray):
        """Keep moments consistent after a column-wise change of variables ``x -> x * factor``."""
        if name in self.m:
            self.m[name] = self.m[name] * factor
            self.v[name] = self.v[name] * factor ** 2


def rescale(Z, Psi):
    """Normalise each latent column of ``Z`` to unit RMS, compensating in ``Psi``.

    ``Psi' z'_i == Psi z_i`` for every task, so decoded parameters are
    unchanged. All-zero columns are left alone. Returns ``(Z', Psi', s)``.
    """
    Z = np.asarray(Z, dtype=float)
    Psi = np.asarray(Psi, dtype=float)
    s = np.sqrt(np.mean(Z ** 2, axis=0)) if Z.size else np.ones(Z.shape[1])
    zero = ~(s > 0)
    if zero.any():
        warnings.warn(f"latent columns {np.flatnonzero(zero).tolist()} are all zero; not rescaled")
        s = np.where(zero, 1.0, s)
    return Z / s, Psi * s, s


@dataclass(frozen=True)
class GaussianPrior:
    """Independent zero-mean Gaussian prior on every unconstrained coordinate."""

    p: int
    sd: float = 100.0

    def logpdf(self, v) -> float:
        v = np.asarray(v, float)
        return float(-self.p * (np.log(self.sd) + 0.5 * LOG_2PI) - 0.5 * np.sum(v ** 2) / self.sd ** 2)

    def grad(self, v) -> np.ndarray:
        return -np.asarray(v, float) / self.sd ** 2

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.p,) if size is None else (size, self.p)
        return rng.normal(0.0, self.sd, size=shape)


def stl_prior(d: int = 3, L: int = 8, sd: float = 100.0) -> GaussianPrior:
    """Wide prior over the full per-task unconstrained vector (offsets included)."""
    return GaussianPrior(ParamLayout(d, L, alpha_in_lambda=True).p, sd)


# --------------------------------------------------------------------------
# engine


def _task_profile(model: MtlModel, v: np.ndarray, task: Task):
    """Data term at the conditionally optimal offsets, with gradient w.r.t. ``v``.

    Returns ``(ll, grad_v, alpha, ss, n)`` with per-channel residual sums of
    squares ``ss`` and observation counts ``n``.
    """
    layout = model.layout
    obs = task.observed
    n = obs.sum(axis=0)
    d = model.d
    if model.free_alpha:
        params = layout.unpack(layout.transform(v), np.zeros(d))
    else:
        params = layout.unpack(layout.transform(v))
    if not obs.any():
        return 0.0, np.zeros(model.p), (params.alpha if not model.free_alpha else np.zeros(d)), np.zeros(d), n
    x, sig, yhat = _forward(params, model.basis, task.u, None, model.lag)
    if model.free_alpha:
        tau = model.tau_vector()
        prec = tau * n + 1.0 / model.alpha_prior_sd ** 2
        alpha = tau * np.where(obs, task.y - yhat, 0.0).sum(axis=0) / prec
        params.alpha = alpha
        yhat = yhat + alpha
    ll, g = _backward(params, model.basis, task, model.tau, model.lag, (x, sig, yhat))
    gv = layout.pack(g) * layout.transform_deriv(v)
    r = np.where(obs, task.y - yhat, 0.0)
    return ll, gv, params.alpha, (r ** 2).sum(axis=0), n


def _update_tau(model: MtlModel, ss, n, config: TrainConfig):
    if config.fixed_tau is not None:
        return
    if config.per_channel_tau:
        tau = np.where(ss > 0, n / np.maximum(ss, 1e-300), config.tau_max)
        model.tau = np.clip(tau, 1e-12, config.tau_max)
    else:
        tot = ss.sum()
        model.tau = float(min(n.sum() / tot, config.tau_max)) if tot > 0 else config.tau_max


def _evaluate(model, Z, tasks, psi_prior_sd=None):
    """Profile objective over tasks, plus gradients and offsets."""
    N = len(tasks)
    total = 0.0
    gZ = np.zeros_like(Z)
    gpsi = np.zeros_like(model.psi)
    goff = np.zeros(model.p)
    alphas = np.zeros((N, model.d))
    ss = np.zeros(model.d)
    n = np.zeros(model.d)
    for i, task in enumerate(tasks):
        v = model.unconstrained(Z[i])
        ll, gv, alpha, ssi, ni = _task_profile(model, v, task)
        total += ll + std_normal_logpdf(Z[i])
        if model.free_alpha:
            total += _alpha_logprior(alpha, model.alpha_prior_sd)
        alphas[i] = alpha
        gZ[i] = model.psi.T @ gv - Z[i]
        if model.k:
            gpsi += np.outer(gv, Z[i])
        goff += gv
        ss += ssi
        n += ni
    if psi_prior_sd is not None and model.k:
        total += float(-0.5 * np.sum(model.psi ** 2) / psi_prior_sd ** 2
                       - model.psi.size * (np.log(psi_prior_sd) + 0.5 * LOG_2PI))
        gpsi -= model.psi / psi_prior_sd ** 2
    return total, gZ, gpsi, goff, alphas, ss, n


def _map_code(model: MtlModel, task: Task, z0: np.ndarray, maxiter: int = 50) -> np.ndarray:
    if model.k == 0:
        return z0

    def fun(z):
        v = model.unconstrained(z)
        if model.free_alpha:
            val, gv, _, _ = collapsed_task_density(model, v, task)
        else:
            val, gv = _task_profile(model, v, task)[:2]
        return -(val + std_normal_logpdf(z)), -(model.psi.T @ gv - z)

    res = minimize(fun, z0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    return res.x


def retrospective_rmse(model: MtlModel, z, task: Task) -> float:
    """Mean over channels of the RMSE of the MAP fit (offsets at their conditional optimum)."""
    v = model.unconstrained(z)
    layout = model.layout
    d = model.d
    params = layout.unpack(layout.transform(v), np.zeros(d) if model.free_alpha else None)
    x, sig, yhat = _forward(params, model.basis, task.u, None, model.lag)
    obs = task.observed
    if model.free_alpha:
        n = obs.sum(axis=0)
        prec = model.tau_vector() * n + 1.0 / model.alpha_prior_sd ** 2
        yhat = yhat + model.tau_vector() * np.where(obs, task.y - yhat, 0.0).sum(axis=0) / prec
    r = np.where(obs, task.y - yhat, 0.0)
    n = np.maximum(obs.sum(axis=0), 1)
    return float(np.mean(np.sqrt((r ** 2).sum(axis=0) / n)))


def _ascend(model: MtlModel, Z: np.ndarray, tasks: Sequence[Task], config: TrainConfig,
            learn_codes: bool, learn_psi: bool, learn_offset: bool,
            holdout: Sequence[Task] = (), max_epochs: int | None = None):
    """Run the optimiser in place on ``model`` and ``Z``; returns a :class:`FitReport`."""
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    opt = Adam(lr=config.lr)
    report = FitReport(objective=-np.inf, holdout_ids=[t.id for t in holdout])
    state = {"Z": Z, "psi": model.psi, "offset": model.offset}
    best_obj, since_best = -np.inf, 0
    best_hold, since_hold, snapshot = np.inf, 0, None
    hold_codes = [np.zeros(model.k) for _ in holdout]
    alphas = None
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        model.psi, model.offset = state["psi"], state["offset"]
        obj, gZ, gpsi, goff, alphas, ss, n = _evaluate(model, state["Z"], tasks, config.psi_prior_sd)
        if not np.isfinite(obj):
            raise FitError(f"objective became non-finite at epoch {epoch}", report.objective_trace)
        report.objective_trace.append(float(obj))
        grads = {}
        if learn_codes and model.k:
            grads["Z"] = gZ
        if learn_psi and model.k:
            grads["psi"] = gpsi
        if learn_offset:
            grads["offset"] = goff
        report.grad_norm_trace.append(float(np.sqrt(sum(np.sum(g ** 2) for g in grads.values()))))
        if not np.isfinite(best_obj) or obj > best_obj + config.rel_tol * abs(best_obj):
            best_obj, since_best = obj, 0
        else:
            since_best += 1
            if since_best >= config.plateau_patience:
                opt.lr *= config.lr_decay
                since_best = 0
                if opt.lr < config.min_lr:
                    break
        if grads:
            opt.step(state, grads)
        model.psi, model.offset = state["psi"], state["offset"]
        _update_tau(model, ss, n, config)
        if learn_codes and model.k and epoch % config.rescale_every == 0:
            state["Z"], state["psi"], s = rescale(state["Z"], state["psi"])
            opt.rescale_columns("Z", 1.0 / s)
            opt.rescale_columns("psi", s)
            model.psi = state["psi"]
            report.rescale_events.append(epoch)
        if holdout and epoch % config.eval_every == 0:
            hold_codes = [_map_code(model, t, z) for t, z in zip(holdout, hold_codes)]
            score = float(np.mean([retrospective_rmse(model, z, t) for t, z in zip(holdout, hold_codes)]))
            report.holdout_trace.append(score)
            if score < best_hold:
                best_hold, since_hold = score, 0
                snapshot = (state["Z"].copy(), state["psi"].copy(), state["offset"].copy(),
                            np.copy(model.tau), epoch)
            else:
                since_hold += 1
                if since_hold >= config.early_stop_patience:
                    report.stopped_early = True
                    break
    if snapshot is not None and report.stopped_early:
        state["Z"], state["psi"], state["offset"], tau, _ = snapshot
        model.tau = tau if np.ndim(tau) else float(tau)
    model.psi, model.offset = state["psi"], state["offset"]
    if learn_codes and model.k:
        state["Z"], model.psi, s = rescale(state["Z"], model.psi)
        report.rescale_events.append(epoch)
    obj, _, _, _, alphas, _, _ = _evaluate(model, state["Z"], tasks, config.psi_prior_sd)
    if not np.isfinite(obj):
        raise FitError(f"objective became non-finite after epoch {epoch}", report.objective_trace)
    report.objective = float(obj)
    report.epochs = epoch
    report.alphas = alphas
    report.tau = np.atleast_1d(model.tau).tolist()
    Z[...] = state["Z"]
    return report


def _sorted(tasks):
    order = sorted(range(len(tasks)), key=lambda i: tasks[i].id)
    return order, [tasks[i] for i in order]


def _check_tasks(tasks):
    if len(tasks) == 0:
        raise ValueError("at least one task is required")
    d = tasks[0].d
    for t in tasks:
        if t.d != d:
            raise ValueError(f"task {t.id} has {t.d} channels, expected {d}")
    return d


def _split_holdout(tasks, config: TrainConfig):
    if config.holdout <= 0 or len(tasks) < config.holdout + 4:
        return list(tasks), []
    rng = np.random.default_rng(config.seed)
    pick = set(rng.choice(len(tasks), size=config.holdout, replace=False).tolist())
    train = [t for i, t in enumerate(tasks) if i not in pick]
    hold = [t for i, t in enumerate(tasks) if i in pick]
    return train, hold


def initial_centre(tasks: Sequence[Task], basis: BasisConfig, lag: bool = False):
    """Data-driven starting point for the shared parameters.

    Per channel, a small grid over effect-site decay and gain is scored by
    the non-negative least-squares emission fit with free task offsets; the
    best grid point gives ``(beta1, beta2, beta3=0, theta)``. Returns the
    unconstrained vector (offsets excluded) and the noise precision.
    """
    d, L = tasks[0].d, basis.L
    layout = ParamLayout(d, L)
    lam = np.zeros(layout.p)
    idx = layout.index
    total_ss, total_n = 0.0, 0
    for j in range(d):
        best = None
        for decay in (0.8, 0.9, 0.95, 0.98):
            for gain in (0.5, 1.0, 2.0, 4.0):
                beta1 = gain * (1.0 - decay)
                rows, targets = [], []
                for task in tasks:
                    obs = task.observed[:, j]
                    if obs.sum() < 2:
                        continue
                    u = np.concatenate([[0.0], task.u[:-1]]) if lag else task.u
                    x = lfilter([beta1], [1.0, -decay], u)
                    F = expit((x[:, None] - basis.b) * basis.a)[obs]
                    yj = task.y[obs, j]
                    rows.append(F - F.mean(axis=0))
                    targets.append(yj - yj.mean())
                if not rows:
                    continue
                A = np.vstack(rows)
                b = np.concatenate(targets)
                theta, resid = nnls(A, b)
                if best is None or resid < best[0]:
                    best = (resid, beta1, decay, theta)
        if best is None:
            best = (0.0, 0.2, 0.9, np.ones(L))
        resid, beta1, decay, theta = best
        scale = max(float(theta.max()), 1.0)
        lam[idx["beta1"][j]] = beta1
        lam[idx["beta2"][j]] = decay
        lam[idx["theta"][j]] = np.maximum(theta, 1e-2 * scale / L)
        total_ss += resid ** 2
        total_n += int(sum(t.observed[:, j].sum() for t in tasks))
    tau = total_n / total_ss if total_ss > 0 else 1e6
    return layout.inverse_transform(lam), float(tau)


def _base_model(tasks, config: TrainConfig, basis, k, kind):
    d = _check_tasks(tasks)
    basis = basis if basis is not None else default_basis()
    layout = ParamLayout(d, basis.L, config.alpha_mode == "in-subspace")
    return MtlModel(psi=np.zeros((layout.p, k)), offset=np.zeros(layout.p), basis=basis,
                    tau=1.0, d=d, alpha_mode=config.alpha_mode, kind=kind,
                    alpha_prior_sd=config.alpha_prior_sd, lag=config.lag)


def _seed_centre(model: MtlModel, tasks, config: TrainConfig):
    centre, tau = initial_centre(tasks, model.basis, model.lag)
    if model.free_alpha:
        model.offset = centre
    else:
        layout = model.layout
        full = np.zeros(layout.p)
        free = ParamLayout(model.d, model.L)
        full[np.setdiff1d(np.arange(layout.p), layout.index["alpha"])] = centre[np.arange(free.p)]
        full[layout.index["alpha"]] = np.mean([np.nanmean(np.where(t.observed, t.y, np.nan), axis=0)
                                                for t in tasks], axis=0)
        model.offset = full
    model.tau = config.fixed_tau if config.fixed_tau is not None else (
        np.full(model.d, tau) if config.per_channel_tau else tau)


def fit_cohort(tasks: Sequence[Task], config: TrainConfig | None = None, basis: BasisConfig | None = None,
               on_fit: Callable | None = None):
    """One shared parameter set for all tasks with free per-task offsets.

    Returns ``(model, report)``; ``model`` has ``k = 0`` and ``kind="cohort"``.
    """
    config = config or TrainConfig()
    if len(tasks) == 0:
        raise ValueError("cohort fit needs at least one task")
    if on_fit is not None:
        on_fit([t.id for t in tasks])
    order, stasks = _sorted(tasks)
    model = _base_model(stasks, config, basis, 0, "cohort")
    _seed_centre(model, stasks, config)
    Z = np.zeros((len(stasks), 0))
    cfg = replace(config, max_epochs=config.cohort_epochs)
    report = _ascend(model, Z, stasks, cfg, learn_codes=False, learn_psi=False, learn_offset=True)
    _finish(report, stasks, order, model)
    return model, report


def _finish(report, stasks, order, model):
    inv = np.argsort(order)
    report.alphas = report.alphas[inv]
    report.task_ids = [stasks[i].id for i in inv]
    n_obs = sum(int(t.observed.sum()) for t in stasks)
    n_par = model.p * model.k + model.p + len(stasks) * (model.d if model.free_alpha else 0) + np.size(model.tau)
    data_term = report.objective
    report.bic = float(-2.0 * data_term + n_par * np.log(max(n_obs, 1)))


def fit_mtl(tasks: Sequence[Task], config: TrainConfig | None = None, basis: BasisConfig | None = None,
            on_fit: Callable | None = None, init: MtlModel | None = None):
    """Joint MAP of latent codes and loading matrix.

    Returns ``(model, Z, report)`` with ``Z`` in the order of ``tasks``.
    Two tasks (``config.holdout``) are withheld for early stopping when the
    cohort is large enough; their codes are not part of ``Z`` and they
    are given their MAP code under the final model. ``init`` may carry a
    cohort model already fitted on the same tasks; its shared parameters
    and precision seed the run.
    """
    config = config or TrainConfig()
    if len(tasks) < 2:
        raise ValueError("multi-task fitting needs at least two tasks")
    if on_fit is not None:
        on_fit([t.id for t in tasks])
    order, stasks = _sorted(tasks)
    train, hold = _split_holdout(stasks, config)
    model = _base_model(train, config, basis if init is None else init.basis, config.k, "mtl")
    if init is not None and config.learn_offset:
        model.offset = init.offset.copy()
        model.tau = init.tau
    elif config.init_from_cohort and config.learn_offset:
        cohort, _ = fit_cohort(train, replace(config, k=0), model.basis)
        model.offset = cohort.offset.copy()
        model.tau = cohort.tau
    else:
        _seed_centre(model, train, config)
        if not config.learn_offset:
            model.offset = np.zeros(model.p)
    rng = np.random.default_rng(config.seed)
    model.psi = rng.normal(0.0, config.psi_init_scale, size=(model.p, config.k))
    Z = np.zeros((len(train), config.k))
    report = _ascend(model, Z, train, config, learn_codes=True, learn_psi=True,
                     learn_offset=config.learn_offset, holdout=hold)
    # hand back codes for every input task; held-out ones get their MAP code
    by_id = {t.id: z for t, z in zip(train, Z)}
    for t in hold:
        by_id[t.id] = _map_code(model, t, np.zeros(model.k), maxiter=200)
    Z_out = np.asarray([by_id[t.id] for t in tasks]).reshape(len(tasks), config.k)
    train_ids = [t.id for t in train]
    alpha_by_id = dict(zip(train_ids, report.alphas))
    report.alphas = np.asarray([alpha_by_id.get(t.id, np.full(model.d, np.nan)) for t in tasks])
    report.task_ids = [t.id for t in tasks]
    n_obs = sum(int(t.observed.sum()) for t in train)
    n_par = model.p * model.k + model.p * config.learn_offset + len(train) * (config.k + model.d) + np.size(model.tau)
    report.bic = float(-2.0 * report.objective + n_par * np.log(max(n_obs, 1)))
    model.meta["train_ids"] = train_ids
    return model, Z_out, report


def fit_task_descriptor(tasks: Sequence[Task], config: TrainConfig | None = None,
                        basis: BasisConfig | None = None, on_fit: Callable | None = None,
                        fields: Sequence[str] | None = None, init: MtlModel | None = None):
    """Loading matrix fitted with codes frozen to standardised covariates.

    ``k`` is taken from the covariate dimension; ``init`` as in :func:`fit_mtl`.
    Returns ``(model, Z, report)``.
    """
    config = config or TrainConfig()
    if on_fit is not None:
        on_fit([t.id for t in tasks])
    order, stasks = _sorted(tasks)
    Zs, standardization = task_descriptor_codes(stasks, fields=fields)
    k = Zs.shape[1]
    cfg = replace(config, k=k)
    model = _base_model(stasks, cfg, basis if init is None else init.basis, k, "task-d")
    if init is not None:
        model.offset = init.offset.copy()
        model.tau = init.tau
    elif cfg.init_from_cohort:
        cohort, _ = fit_cohort(stasks, replace(cfg, k=0), model.basis)
        model.offset = cohort.offset.copy()
        model.tau = cohort.tau
    else:
        _seed_centre(model, stasks, cfg)
    model.covariate_standardization = standardization
    rng = np.random.default_rng(cfg.seed)
    model.psi = rng.normal(0.0, cfg.psi_init_scale, size=(model.p, k))
    report = _ascend(model, Zs, stasks, cfg, learn_codes=False, learn_psi=True, learn_offset=cfg.learn_offset)
    _finish(report, stasks, order, model)
    inv = np.argsort(order)
    return model, Zs[inv], report


def stl_model(reference: MtlModel, tasks: Sequence[Task] | None = None) -> MtlModel:
    """Single-task model sharing only the basis, noise precision and transforms of ``reference``.

    With ``tasks`` the prior centre (used as the sampler start) is the
    reference offset plus the mean observed level of each channel.
    """
    layout = ParamLayout(reference.d, reference.L, alpha_in_lambda=True)
    offset = np.zeros(layout.p)
    if tasks is not None and reference.k == 0:
        free = np.setdiff1d(np.arange(layout.p), layout.index["alpha"])
        offset[free] = reference.offset
        offset[layout.index["alpha"]] = np.mean(
            [np.nanmean(np.where(t.observed, t.y, np.nan), axis=0) for t in tasks], axis=0)
    return MtlModel(psi=np.zeros((layout.p, 0)), offset=offset, basis=reference.basis,
                    tau=reference.tau, d=reference.d, alpha_mode="in-subspace", kind="stl",
                    alpha_prior_sd=reference.alpha_prior_sd, lag=reference.lag)
