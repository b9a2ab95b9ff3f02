"""Leave-one-out benchmark: train on N-1 tasks, forecast the held-out one over time."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from .inference import HmcConfig, InferenceTarget, PreprocessFlags, SamplerError, preprocess_prefix, sample_posterior
from .learning import (TrainConfig, fit_cohort, fit_mtl, fit_task_descriptor, initial_centre,
                       stl_model)
from .mtl import MtlModel, ParamLayout, decode_unconstrained, task_descriptor_codes, task_value_grad_v
from .pdmodel import Task, simulate
from .prediction import nll_upper_bound, predict, retrospective_from_summary, rmse, window_nll

log = logging.getLogger(__name__)

DEFAULT_TIMES = tuple(float(m) for m in range(6, 35, 2))


def parse_model_name(name: str):
    """``"mtl-5" -> ("mtl", 5)``; other names map to ``(name, None)``."""
    if name.startswith("mtl-"):
        k = int(name[4:])
        if k < 1:
            raise ValueError("mtl-k needs k >= 1")
        return "mtl", k
    if name in ("cohort", "stl", "task-d"):
        return name, None
    raise ValueError(f"unknown model {name!r}; use cohort, stl, task-d or mtl-<k>")


@dataclass
class BenchConfig:
    """Benchmark settings; ``eval_times`` are in minutes.

    A cell whose sampler fails on divergences is rerun once with
    ``target_accept=retry_accept`` (``None`` disables the retry).
    """

    models: tuple = ("cohort", "mtl-2", "stl", "task-d")
    eval_times: tuple = DEFAULT_TIMES
    horizons: tuple = (20, 40)
    hmc: HmcConfig = field(default_factory=HmcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: PreprocessFlags = field(default_factory=PreprocessFlags)
    oracle: bool = True
    stl_budget_factor: float = 10.0
    retry_accept: float | None = 0.95
    retro_start: int = 16
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.models or not self.eval_times or not self.horizons:
            raise ValueError("models, evaluation times and horizons must be non-empty")
        for name in self.models:
            parse_model_name(name)


def wilcoxon_signed_rank(a, b, alternative: str = "two-sided") -> float:
    """Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped and ties get average ranks. With at most
    25 non-zero differences the null distribution is enumerated exactly
    (on doubled ranks, so ties stay exact); beyond that the normal
    approximation with tie correction is used. ``alternative="greater"``
    tests whether ``a`` tends to exceed ``b``. All-zero differences give 1.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError("alternative must be two-sided, greater or less")
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[np.isfinite(d)]
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    order = np.argsort(np.abs(d), kind="mergesort")
    absd = np.abs(d)[order]
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and absd[j + 1] == absd[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    r = np.empty(n)
    r[order] = ranks
    w_plus = float(r[d > 0].sum())
    if n <= 25:
        doubled = np.rint(2 * r).astype(int)
        total = int(doubled.sum())
        counts = np.zeros(total + 1)
        counts[0] = 1.0
        for v in doubled:
            counts[v:] = counts[v:] + counts[:total + 1 - v].copy()
        probs = counts / counts.sum()
        k = int(round(2 * w_plus))
        upper = probs[k:].sum()
        lower = probs[:k + 1].sum()
        if alternative == "greater":
            p = upper
        elif alternative == "less":
            p = lower
        else:
            p = 2 * min(upper, lower)
        return float(min(p, 1.0))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (w_plus - mean) / np.sqrt(var)
    if alternative == "greater":
        return float(1.0 - ndtr(z))
    if alternative == "less":
        return float(ndtr(z))
    return float(min(1.0, 2 * (1.0 - ndtr(abs(z)))))


# --------------------------------------------------------------------------
# training per fold


@dataclass
class FoldModels:
    models: dict
    fit_seconds: dict


def _train_fold(train: Sequence[Task], config: BenchConfig, fit_hook: Callable | None):
    models, seconds = {}, {}
    cohort = None
    if config.train.init_from_cohort or any(parse_model_name(m)[0] in ("cohort", "stl") for m in config.models):
        t0 = time.perf_counter()
        cohort, _ = fit_cohort(train, replace(config.train, k=0), on_fit=fit_hook)
        seconds["cohort"] = time.perf_counter() - t0
        if "cohort" in config.models:
            models["cohort"] = cohort
    for name in config.models:
        kind, k = parse_model_name(name)
        t0 = time.perf_counter()
        if kind == "mtl":
            models[name] = fit_mtl(train, replace(config.train, k=k), on_fit=fit_hook, init=cohort)[0]
        elif kind == "task-d":
            models[name] = fit_task_descriptor(train, config.train, on_fit=fit_hook, init=cohort)[0]
        elif kind == "stl":
            models[name] = stl_model(cohort, train)
        else:
            continue
        seconds[name] = seconds.get(name, 0.0) + time.perf_counter() - t0
    return FoldModels(models, seconds)


def _variant(model: MtlModel) -> str:
    return {"mtl": "mtl-z", "cohort": "cohort-alpha", "task-d": "taskd-alpha", "stl": "stl-lambda"}[model.kind]


def _cell_seed(seed, fold, model_index, t):
    return int(np.random.SeedSequence([seed, fold, model_index, t]).generate_state(1)[0])


def _run_fold(fold: int, tasks: Sequence[Task], config: BenchConfig, fit_hook=None):
    test = tasks[fold]
    train = [t for i, t in enumerate(tasks) if i != fold]
    trained = _train_fold(train, config, fit_hook)
    records, retro, errors = [], [], []
    rmax = max(config.horizons)
    mtl_seconds: dict = {}
    # MTL-type models first so the STL budget is known
    order = sorted(config.models, key=lambda m: parse_model_name(m)[0] == "stl")
    for t_min in config.eval_times:
        t = int(round(t_min / test.dt))
        if t < 1 or t >= test.T:
            continue
        for name in order:
            model = trained.models[name]
            mi = config.models.index(name)
            hmc = replace(config.hmc, seed=_cell_seed(config.seed, fold, mi, t))
            if model.kind == "stl" and config.stl_budget_factor and mtl_seconds.get(t):
                hmc = replace(hmc, max_seconds=config.stl_budget_factor * max(mtl_seconds[t]))
            try:
                fixed_z = None
                if model.kind == "task-d":
                    fixed_z = task_descriptor_codes([test], model.covariate_standardization)[0][0]
                target = InferenceTarget(_variant(model), model, preprocess_prefix(test, t, config.flags),
                                         fixed_z=fixed_z)
                t0 = time.perf_counter()
                retried = False
                try:
                    post = sample_posterior(target, hmc)
                except SamplerError:
                    if config.retry_accept is None:
                        raise
                    # one retry with a smaller adapted step
                    retried = True
                    post = sample_posterior(target, replace(hmc, target_accept=config.retry_accept))
                if model.kind == "mtl":
                    mtl_seconds.setdefault(t, []).append(time.perf_counter() - t0)
                r_avail = min(rmax, test.T - t)
                summary = predict(model, post, test, t, r_avail, intervals=False)
                retro.append({"model": name, "task": test.id, "fold": fold, "t": t, "t_min": t_min,
                              "rmse": retrospective_from_summary(summary, test, config.retro_start).tolist(),
                              "ess_min": float(np.min(post.diagnostics["ess"])) if post.diagnostics.get("ess") else None,
                              "truncated": bool(post.diagnostics.get("truncated", False)), "retried": retried,
                              "seconds": float(post.diagnostics.get("seconds", 0.0))})
                for r in config.horizons:
                    if r > r_avail:
                        continue
                    head = summary.head(r)
                    records.append({"model": name, "task": test.id, "fold": fold, "t": t, "t_min": t_min,
                                    "horizon": r, "rmse": rmse(head, test).tolist(),
                                    "nll": nll_upper_bound(head, test).tolist(),
                                    "nll_train_tau": window_nll(head, test).tolist()})
            except Exception as exc:  # a failed cell is recorded, the sweep continues
                log.warning("fold %d model %s t=%d failed: %s", fold, name, t, exc)
                errors.append({"model": name, "task": test.id, "fold": fold, "t": t, "error": repr(exc)})
    return records, retro, errors, {k: float(v) for k, v in trained.fit_seconds.items()}


# --------------------------------------------------------------------------
# oracle floor


def oracle_fit(task: Task, basis, lag: bool = False, starts: Sequence[np.ndarray] = (), maxiter: int = 3000):
    """Best-fitting per-task parameters on the full series (flat prior, fixed unit precision).

    Returns the unconstrained vector with offsets included. Several starts
    are tried: a data-driven one plus any in ``starts``.
    """
    layout = ParamLayout(task.d, basis.L, alpha_in_lambda=True)
    model = MtlModel(psi=np.zeros((layout.p, 0)), offset=np.zeros(layout.p), basis=basis, tau=1.0, d=task.d,
                     alpha_mode="in-subspace", kind="stl", lag=lag)
    centre, _ = initial_centre([task], basis, lag)
    x0 = np.zeros(layout.p)
    free = np.setdiff1d(np.arange(layout.p), layout.index["alpha"])
    x0[free] = centre
    params = decode_unconstrained(model, x0)
    g = simulate(params, basis, task.u, lag=lag).yhat - params.alpha
    obs = task.observed
    x0[layout.index["alpha"]] = [np.mean(task.y[obs[:, j], j] - g[obs[:, j], j]) if obs[:, j].any() else 0.0
                                 for j in range(task.d)]
    candidates = [x0] + [np.asarray(s, float) for s in starts]

    def fun(v):
        value, gv, _ = task_value_grad_v(model, v, task)
        return -value, -gv

    best = None
    for start in candidates:
        res = minimize(fun, start, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
        if best is None or res.fun < best.fun:
            best = res
    return best.x, model


def _full_vector(model: MtlModel, z, alpha):
    """Unconstrained vector with offsets appended, for seeding the oracle from a trained model."""
    v = model.unconstrained(z)
    layout = ParamLayout(model.d, model.L, alpha_in_lambda=True)
    out = np.zeros(layout.p)
    out[np.setdiff1d(np.arange(layout.p), layout.index["alpha"])] = v
    out[layout.index["alpha"]] = alpha
    return out


def run_oracle(tasks: Sequence[Task], config: BenchConfig, basis=None, seeds: dict | None = None):
    """Floor RMSE per (task, t, horizon): forecast error of the per-task best fit on the full series."""
    from .pdmodel import default_basis
    basis = basis or default_basis()
    records = []
    for task in tasks:
        starts = (seeds or {}).get(task.id, ())
        v, model = oracle_fit(task, basis, config.train.lag, starts)
        yhat = simulate(decode_unconstrained(model, v), basis, task.u, lag=config.train.lag).yhat
        for t_min in config.eval_times:
            t = int(round(t_min / task.dt))
            for r in config.horizons:
                if t < 1 or t + r > task.T:
                    continue
                obs = task.observed[t:t + r]
                err = np.where(obs, task.y[t:t + r] - yhat[t:t + r], 0.0)
                n = obs.sum(axis=0)
                with np.errstate(invalid="ignore", divide="ignore"):
                    val = np.where(n > 0, np.sqrt((err ** 2).sum(axis=0) / np.maximum(n, 1)), np.nan)
                records.append({"model": "oracle", "task": task.id, "t": t, "t_min": t_min, "horizon": r,
                                "rmse": val.tolist()})
    return records


# --------------------------------------------------------------------------
# report


@dataclass
class BenchReport:
    records: list
    retro: list
    oracle: list
    errors: list
    channels: list
    config: dict = field(default_factory=dict)
    fit_seconds: list = field(default_factory=list)
    seen_ids: list = field(default_factory=list)

    def models(self) -> list:
        """Models with at least one record, in configured order."""
        present = {rec["model"] for rec in self.records}
        order = list(self.config.get("models", ())) + sorted(present)
        return [m for i, m in enumerate(order) if m in present and m not in order[:i]]

    def table(self, metric: str = "rmse", include_oracle: bool = True):
        """Per-task values keyed by ``(model, t, horizon, channel)`` -> ``{task: value}``."""
        out: dict = {}
        rows = self.records + (self.oracle if include_oracle and metric == "rmse" else [])
        for rec in rows:
            for j, value in enumerate(rec[metric]):
                key = (rec["model"], rec["t"], rec["horizon"], self.channels[j])
                if value is not None and np.isfinite(value):
                    out.setdefault(key, {})[rec["task"]] = float(value)
        return out

    def aggregates(self, metric: str = "rmse") -> list:
        """Mean and median over tasks for every (model, t, horizon, channel), with counts."""
        out = []
        for (model, t, r, ch), vals in sorted(self.table(metric).items(), key=lambda kv: str(kv[0])):
            arr = np.array(list(vals.values()))
            out.append({"model": model, "t": t, "horizon": r, "channel": ch, "metric": metric,
                        "mean": float(arr.mean()), "median": float(np.median(arr)), "count": int(arr.size)})
        return out

    def task_scores(self, model: str, horizon: int, times: Sequence[int] | None = None,
                    metric: str = "rmse") -> dict:
        """Per-task mean of ``metric`` over the given steps ``times`` and all channels."""
        acc: dict = {}
        rows = self.records + (self.oracle if metric == "rmse" else [])
        for rec in rows:
            if rec["model"] != model or rec["horizon"] != horizon:
                continue
            if times is not None and rec["t"] not in times:
                continue
            vals = [v for v in rec[metric] if v is not None and np.isfinite(v)]
            acc.setdefault(rec["task"], []).extend(vals)
        return {task: float(np.mean(v)) for task, v in acc.items() if v}

    def retro_scores(self, model: str, t: int) -> dict:
        out = {}
        for rec in self.retro:
            if rec["model"] == model and rec["t"] == t:
                vals = [v for v in rec["rmse"] if v is not None and np.isfinite(v)]
                if vals:
                    out[rec["task"]] = float(np.mean(vals))
        return out

    def pvalues(self, metric: str = "rmse") -> list:
        """Two-sided signed-rank p-values for every model pair per (t, horizon, channel); no correction."""
        table = self.table(metric, include_oracle=False)
        models = self.models()
        out = []
        keys = sorted({(t, r, ch) for (_, t, r, ch) in table})
        for t, r, ch in keys:
            for i, a in enumerate(models):
                for b in models[i + 1:]:
                    va, vb = table.get((a, t, r, ch), {}), table.get((b, t, r, ch), {})
                    common = sorted(set(va) & set(vb))
                    if len(common) < 5:
                        continue
                    p = wilcoxon_signed_rank([va[k] for k in common], [vb[k] for k in common])
                    out.append({"a": a, "b": b, "t": t, "horizon": r, "channel": ch, "metric": metric,
                                "n": len(common), "p": p})
        return out

    def figure_rows(self, horizon: int = 20) -> list:
        """Time against channel-averaged mean RMSE per model."""
        out = []
        for agg in self.aggregates("rmse"):
            if agg["horizon"] == horizon:
                out.append(agg)
        rows: dict = {}
        for agg in out:
            rows.setdefault((agg["model"], agg["t"]), []).append(agg["mean"])
        return [{"model": m, "t": t, "mean_rmse": float(np.mean(v))} for (m, t), v in sorted(rows.items(), key=str)]

    def to_json_dict(self) -> dict:
        return {"records": self.records, "retro": self.retro, "oracle": self.oracle, "errors": self.errors,
                "channels": self.channels, "config": self.config, "fit_seconds": self.fit_seconds,
                "aggregates": self.aggregates("rmse") + self.aggregates("nll"), "pvalues": self.pvalues()}

    def write_csv(self, path, oracle: bool = False):
        """Flat per-channel rows of the model records, or of the oracle floor with ``oracle=True``."""
        fields = ["model", "task", "t", "t_min", "horizon", "channel", "rmse", "nll", "nll_train_tau"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for rec in (self.oracle if oracle else self.records):
                for j, ch in enumerate(self.channels):
                    writer.writerow({"model": rec["model"], "task": rec["task"], "t": rec["t"],
                                     "t_min": rec["t_min"], "horizon": rec["horizon"], "channel": ch,
                                     "rmse": rec["rmse"][j],
                                     "nll": rec.get("nll", [""] * len(self.channels))[j],
                                     "nll_train_tau": rec.get("nll_train_tau", [""] * len(self.channels))[j]})


def run_loo(tasks: Sequence[Task], config: BenchConfig | None = None, fit_hook: Callable | None = None,
            folds: Sequence[int] | None = None) -> BenchReport:
    """Leave-one-out sweep. ``fit_hook`` receives the task ids passed to every training call."""
    config = config or BenchConfig()
    if len(tasks) < 3:
        raise ValueError("leave-one-out needs at least 3 tasks")
    folds = list(range(len(tasks))) if folds is None else list(folds)
    seen = []

    def hook(ids):
        seen.append(list(ids))
        if fit_hook is not None:
            fit_hook(ids)

    results = []
    if config.jobs > 1 and fit_hook is None:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(_run_fold, f, tasks, config, None) for f in folds]
            results = [f.result() for f in futures]
    else:
        for f in folds:
            log.info("fold %d/%d (%s)", f + 1, len(tasks), tasks[f].id)
            results.append(_run_fold(f, tasks, config, hook))
    records, retro, errors, seconds = [], [], [], []
    for rec, ret, err, sec in results:
        records += rec
        retro += ret
        errors += err
        seconds.append(sec)
    oracle = run_oracle([tasks[f] for f in folds], config) if config.oracle else []
    cfg = asdict(config)
    cfg["hmc"]["inv_mass"] = None
    return BenchReport(records=records, retro=retro, oracle=oracle, errors=errors,
                       channels=list(tasks[0].channels), config=cfg, fit_seconds=seconds, seen_ids=seen)
