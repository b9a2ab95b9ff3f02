"""Synthetic cohorts drawn from the generative model, with known ground truth.

Numbers here (dose levels, PK rate ranges, channel scales, noise levels)
are placeholders chosen to give curves of a plausible shape; they carry no
clinical claim.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mtl import MtlModel, ParamLayout, decode
from .pdmodel import BasisConfig, Task, default_basis, simulate
from .pkmodel import InfusionSchedule, PkRates, solve_pk

REGIMES = ("high-low-high", "low-high-low")
CHANNELS = ("BPsys", "BPdia", "BIS")

# Marsh-like nominal rates (1/min) and central volume for a 70 kg adult (L).
NOMINAL_PK = PkRates(k10=0.119, k12=0.112, k21=0.055, k13=0.042, k31=0.0033, v1=16.0)


def make_infusion(regime: str, duration: float, seed=None, jitter: bool = True, high: float = 10.0,
                  low: float = 2.0, changepoints=(13.0, 27.0), changepoint_jitter: float = 1.0,
                  level_jitter: float = 0.2) -> InfusionSchedule:
    """Three-segment infusion (mg/min) following one of the two regimes.

    With ``jitter`` the changepoints move uniformly by up to
    ``changepoint_jitter`` minutes and the two levels get independent
    lognormal factors of log-sd ``level_jitter``. The random draws do not
    depend on the regime, so both regimes with one seed share the levels.
    Segments starting after ``duration`` are dropped.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    cps = np.asarray(changepoints, dtype=float)
    if jitter:
        cps = cps + rng.uniform(-changepoint_jitter, changepoint_jitter, size=cps.size)
        hi = high * np.exp(rng.normal(0.0, level_jitter))
        lo = low * np.exp(rng.normal(0.0, level_jitter))
    else:
        hi, lo = high, low
    levels = (hi, lo, hi) if regime == "high-low-high" else (lo, hi, lo)
    breakpoints = [0.0, *cps]
    keep = [i for i, b in enumerate(breakpoints) if b < duration]
    return InfusionSchedule(tuple(breakpoints[i] for i in keep), tuple(levels[i] for i in keep), duration)


@dataclass
class CohortSpec:
    """Configuration of a synthetic cohort.

    ``centre`` is the population centre in unconstrained parameter space;
    when omitted it is built from ``gain``, ``decay``, ``amplitude``.
    ``covariates`` is ``"noise"`` (independent of the latent codes) or
    ``"informative"`` (linear in the latent codes plus small noise).

    ``psi_support="structured"`` draws the true loadings only on the
    per-channel effect-site gain and decay; ``"dense"`` fills every entry.
    The emission weights can be traded against each other almost freely,
    so loadings on them are not recoverable coordinate-wise.
    """

    n_tasks: int = 40
    k_true: int = 2
    d: int = 3
    L: int = 8
    T_range: tuple = (108, 200)
    dt: float = 0.25
    noise_sd: tuple = (4.0, 3.0, 5.0)
    regime_split: tuple | None = None
    psi_scale: float = 0.5
    psi_support: str = "structured"
    seed: int = 0
    missing_fraction: float = 0.05
    missing_block_mean: float = 8.0
    covariates: str = "noise"
    gain: float = 0.2
    decay: float = 0.9
    amplitude: tuple = (40.0, 25.0, 50.0)
    alpha_mean: tuple = (95.0, 55.0, 45.0)
    alpha_sd: tuple = (8.0, 5.0, 5.0)
    pk_jitter: float = 0.2
    high_rate: float = 10.0
    low_rate: float = 2.0
    centre: np.ndarray | None = None
    basis: BasisConfig | None = None

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be at least 1")
        if self.regime_split is None:
            first = round(self.n_tasks * 18 / 40)
            self.regime_split = (first, self.n_tasks - first)
        if sum(self.regime_split) != self.n_tasks:
            raise ValueError("regime_split must sum to n_tasks")
        if len(self.noise_sd) != self.d:
            self.noise_sd = tuple(np.resize(np.asarray(self.noise_sd, float), self.d))
        for name in ("amplitude", "alpha_mean", "alpha_sd"):
            value = getattr(self, name)
            if len(value) != self.d:
                setattr(self, name, tuple(np.resize(np.asarray(value, float), self.d)))
        if self.covariates not in ("noise", "informative"):
            raise ValueError("covariates must be 'noise' or 'informative'")
        if self.psi_support not in ("structured", "dense"):
            raise ValueError("psi_support must be 'structured' or 'dense'")

    def resolved_basis(self) -> BasisConfig:
        return self.basis if self.basis is not None else default_basis(self.L)

    def resolved_centre(self) -> np.ndarray:
        layout = ParamLayout(self.d, self.L)
        if self.centre is not None:
            return np.asarray(self.centre, dtype=float)
        lam = np.zeros(layout.p)
        idx = layout.index
        lam[idx["beta1"]] = self.gain
        lam[idx["beta2"]] = self.decay
        lam[idx["beta3"]] = 0.0
        lam[idx["theta"]] = np.asarray(self.amplitude)[:, None] / self.L
        return layout.inverse_transform(lam)


@dataclass
class GroundTruth:
    psi: np.ndarray
    offset: np.ndarray
    Z: np.ndarray
    params: list
    yhat: list
    pk_rates: list
    schedules: list
    regimes: list
    tau: np.ndarray
    basis: BasisConfig
    meta: dict = field(default_factory=dict)

    def model(self) -> MtlModel:
        """The generating model, usable directly for inference."""
        return MtlModel(psi=self.psi, offset=self.offset, basis=self.basis, tau=self.tau,
                        d=self.psi.shape[0] // (3 + self.basis.L))

    def to_json_dict(self) -> dict:
        return {
            "psi": self.psi.tolist(), "offset": self.offset.tolist(), "Z": self.Z.tolist(),
            "params": [p.to_json_dict() for p in self.params],
            "pk_rates": [r.as_dict() for r in self.pk_rates],
            "schedules": [s.to_json_dict() for s in self.schedules],
            "regimes": list(self.regimes), "tau": self.tau.tolist(),
            "basis": self.basis.to_json_dict(), "meta": self.meta,
        }


def sample_loadings(rng: np.random.Generator, spec: CohortSpec) -> np.ndarray:
    """True loading matrix ``(p, k_true)`` following ``spec.psi_support``."""
    layout = ParamLayout(spec.d, spec.L)
    if spec.psi_support == "dense":
        return rng.normal(0.0, spec.psi_scale, size=(layout.p, spec.k_true))
    idx = layout.index
    directions = []
    for j in range(spec.d):
        for name in ("beta1", "beta2"):
            e = np.zeros(layout.p)
            e[idx[name][j]] = 1.0
            directions.append(e)
    D = np.asarray(directions).T
    return D @ rng.normal(0.0, spec.psi_scale, size=(D.shape[1], spec.k_true))


def sample_pk_rates(rng: np.random.Generator, jitter: float = 0.2, nominal: PkRates = NOMINAL_PK) -> PkRates:
    f = np.exp(rng.normal(0.0, jitter, size=6))
    n = nominal
    return PkRates(n.k10 * f[0], n.k12 * f[1], n.k21 * f[2], n.k13 * f[3], n.k31 * f[4], n.v1 * f[5])


def dropout_mask(rng: np.random.Generator, T: int, d: int, fraction: float, block_mean: float) -> np.ndarray:
    """Missingness made of geometric-length blocks covering about ``fraction`` of entries."""
    missing = np.zeros((T, d), dtype=bool)
    target = int(round(fraction * T * d))
    guard = 0
    while missing.sum() < target and guard < 10 * T * d:
        guard += 1
        j = rng.integers(d)
        length = rng.geometric(1.0 / block_mean)
        start = rng.integers(T)
        missing[start:start + length, j] = True
    return missing


def _covariates(rng, z, mode):
    if mode == "informative":
        zz = np.resize(z, 3) if z.size else np.zeros(3)
        age = 55.0 + 12.0 * zz[0] + rng.normal(0.0, 1.0)
        weight = 75.0 + 12.0 * zz[1] + rng.normal(0.0, 1.0)
        height = 170.0 + 8.0 * zz[2] + rng.normal(0.0, 1.0)
    else:
        age = rng.normal(55.0, 12.0)
        weight = rng.normal(75.0, 12.0)
        height = rng.normal(170.0, 8.0)
    gender = float(rng.integers(2))
    return {"age": float(age), "gender": gender, "height": float(height), "weight": float(weight),
            "bmi": float(weight / (height / 100.0) ** 2)}


def generate_cohort(spec: CohortSpec):
    """Draw tasks from the generative model; returns ``(tasks, GroundTruth)``."""
    rng = np.random.default_rng(spec.seed)
    basis = spec.resolved_basis()
    layout = ParamLayout(spec.d, basis.L)
    offset = spec.resolved_centre()
    psi = sample_loadings(rng, spec)
    tau = 1.0 / np.maximum(np.asarray(spec.noise_sd, float), 1e-6) ** 2
    model = MtlModel(psi=psi, offset=offset, basis=basis, tau=tau, d=spec.d)
    regimes = [REGIMES[0]] * spec.regime_split[0] + [REGIMES[1]] * spec.regime_split[1]
    regimes = [regimes[i] for i in rng.permutation(spec.n_tasks)]
    width = len(str(spec.n_tasks - 1))
    tasks, Z, params, yhats, rates, schedules = [], [], [], [], [], []
    for i in range(spec.n_tasks):
        task_rng = np.random.default_rng([spec.seed, i])
        T = int(task_rng.integers(spec.T_range[0], spec.T_range[1] + 1))
        schedule = make_infusion(regimes[i], T * spec.dt, seed=task_rng, high=spec.high_rate, low=spec.low_rate)
        pk = sample_pk_rates(task_rng, spec.pk_jitter)
        u = solve_pk(pk, schedule, spec.dt).values[:T]
        alpha = task_rng.normal(spec.alpha_mean, spec.alpha_sd)
        for attempt in range(100):
            z = task_rng.normal(size=spec.k_true)
            p = decode(model, z, alpha)
            yhat = simulate(p, basis, u).yhat
            if np.all(np.isfinite(yhat)):
                break
            warnings.warn(f"task {i}: non-finite trajectory, resampling latent code")
        else:
            raise RuntimeError(f"task {i}: could not draw a finite trajectory")
        noise = task_rng.normal(size=yhat.shape) * np.asarray(spec.noise_sd)
        y = yhat + noise
        missing = (dropout_mask(task_rng, T, spec.d, spec.missing_fraction, spec.missing_block_mean)
                   if spec.missing_fraction > 0 else np.zeros((T, spec.d), dtype=bool))
        channels = list(CHANNELS[:spec.d]) if spec.d <= len(CHANNELS) else None
        task = Task(id=f"task{i:0{width}d}", u=u, y=np.where(missing, np.nan, y), missing=missing, dt=spec.dt,
                    covariates=_covariates(task_rng, z, spec.covariates), channels=channels,
                    meta={"regime": regimes[i]})
        tasks.append(task)
        Z.append(z)
        params.append(p)
        yhats.append(yhat)
        rates.append(pk)
        schedules.append(schedule)
    truth = GroundTruth(psi=psi, offset=offset, Z=np.asarray(Z).reshape(spec.n_tasks, spec.k_true),
                        params=params, yhat=yhats, pk_rates=rates, schedules=schedules, regimes=regimes,
                        tau=tau, basis=basis, meta={"psi_scale": spec.psi_scale, "psi_support": spec.psi_support,
                                           "seed": spec.seed})
    return tasks, truth
