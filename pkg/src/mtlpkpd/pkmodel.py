"""Three-compartment mammillary PK model driven by a piecewise-constant infusion.

The central compartment concentration produced here is the input series
``u`` of the PD model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import expm


class InvalidParameterError(ValueError):
    """Raised when model parameters violate their constraints."""


class NumericError(ArithmeticError):
    """Raised when a solver produces non-finite values."""


@dataclass(frozen=True)
class PkRates:
    """Rate constants (1/min) and central volume (L)."""

    k10: float
    k12: float
    k21: float
    k13: float
    k31: float
    v1: float = 1.0

    def __post_init__(self):
        for name in ("k10", "k12", "k21", "k13", "k31"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidParameterError(f"{name} must be a finite non-negative rate, got {value}")
        if not np.isfinite(self.v1) or self.v1 <= 0:
            raise InvalidParameterError(f"v1 must be positive, got {self.v1}")

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("k10", "k12", "k21", "k13", "k31", "v1")}


def personalised_rates(covariates: Mapping[str, float],
                       constructor: Callable[[Mapping[str, float]], Mapping[str, float]]) -> PkRates:
    """Build validated rates from covariates with a user-supplied formula.

    No covariate formula ships with the package; ``constructor`` maps a
    covariate mapping to the keyword arguments of :class:`PkRates`.
    """
    return PkRates(**constructor(covariates))


@dataclass(frozen=True)
class InfusionSchedule:
    """Piecewise-constant infusion; ``rates[i]`` holds on ``[breakpoints[i], breakpoints[i+1])``."""

    breakpoints: tuple
    rates: tuple
    duration: float

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        rates = np.asarray(self.rates, dtype=float)
        if bp.ndim != 1 or bp.size == 0 or bp.size != rates.size:
            raise InvalidParameterError("breakpoints and rates must be non-empty and of equal length")
        if bp[0] != 0.0:
            raise InvalidParameterError("breakpoints must start at 0")
        if np.any(np.diff(bp) <= 0):
            raise InvalidParameterError("breakpoints must be strictly increasing")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise InvalidParameterError("infusion rates must be finite and non-negative")
        if not self.duration > bp[-1]:
            raise InvalidParameterError("duration must exceed the last breakpoint")
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in bp))
        object.__setattr__(self, "rates", tuple(float(r) for r in rates))
        object.__setattr__(self, "duration", float(self.duration))

    def rate_at(self, t: float) -> float:
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        return self.rates[max(idx, 0)]

    def total_dose(self, until: float | None = None) -> float:
        """Integral of the infusion rate over ``[0, until]`` (defaults to the whole schedule)."""
        end = self.duration if until is None else min(until, self.duration)
        edges = list(self.breakpoints) + [self.duration]
        dose = 0.0
        for lo, hi, rate in zip(edges[:-1], edges[1:], self.rates):
            if lo >= end:
                break
            dose += rate * (min(hi, end) - lo)
        return dose

    def to_json_dict(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "rates": list(self.rates), "duration": self.duration}

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "InfusionSchedule":
        return cls(tuple(data["breakpoints"]), tuple(data["rates"]), float(data["duration"]))


@dataclass(frozen=True)
class ConcentrationSeries:
    """Central concentration sampled at ``dt, 2 dt, ..., n dt``."""

    dt: float
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, len(self.values) + 1)

    def __len__(self):
        return len(self.values)


def build_rate_matrix(rates: PkRates) -> np.ndarray:
    """Rate matrix of the mammillary model: central <-> 2, central <-> 3, elimination from central."""
    r = rates
    return np.array([
        [-(r.k10 + r.k12 + r.k13), r.k21, r.k31],
        [r.k12, -r.k21, 0.0],
        [r.k13, 0.0, -r.k31],
    ])


def _step_operators(A: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    # expm of the input-augmented system gives e^{Ah} and int_0^h e^{As} ds e1
    # in one shot, which stays exact when A is singular.
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A * h
    M[0, n] = h
    E = expm(M)
    return E[:n, :n], E[:n, n]


def solve_pk(rates: PkRates, schedule: InfusionSchedule, dt: float,
             c0: np.ndarray | None = None, return_all: bool = False):
    """Exact solution of the PK ODE on a uniform grid.

    Parameters
    ----------
    rates : PkRates
    schedule : InfusionSchedule
        Infusion in mg/min; it enters the central compartment divided by ``v1``.
    dt : float
        Grid spacing in minutes.
    c0 : array, optional
        Initial concentrations (defaults to zero).
    return_all : bool
        Also return the full ``(n, 3)`` compartment trajectory.

    Returns
    -------
    ConcentrationSeries, or ``(ConcentrationSeries, ndarray)`` with ``return_all``.
    """
    if not dt > 0:
        raise InvalidParameterError("dt must be positive")
    n = int(np.floor(schedule.duration / dt + 1e-9))
    if n < 1:
        raise InvalidParameterError("schedule duration must be at least dt")
    A = build_rate_matrix(rates)
    E_full, F_full = _step_operators(A, dt)
    c = np.zeros(3) if c0 is None else np.asarray(c0, dtype=float).copy()
    edges = np.asarray(schedule.breakpoints)
    out = np.empty((n, 3))
    cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def ops(h):
        if abs(h - dt) < 1e-12:
            return E_full, F_full
        key = round(h, 12)
        if key not in cache:
            cache[key] = _step_operators(A, h)
        return cache[key]

    for i in range(n):
        t0, t1 = i * dt, (i + 1) * dt
        inner = edges[(edges > t0 + 1e-12) & (edges < t1 - 1e-12)]
        cuts = [t0, *inner, t1]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            E, F = ops(hi - lo)
            c = E @ c + F * (schedule.rate_at(lo) / rates.v1)
        out[i] = c
    if not np.all(np.isfinite(out)):
        raise NumericError("PK solution is not finite; check the rate constants")
    # exact arithmetic is non-negative (Metzler A); clip round-off
    out = np.maximum(out, 0.0)
    series = ConcentrationSeries(dt=dt, values=out[:, 0].copy())
    if return_all:
        return series, out
    return series


def steady_state(rates: PkRates, infusion_rate: float) -> np.ndarray:
    """Equilibrium concentrations under a constant infusion (requires k10 > 0)."""
    A = build_rate_matrix(rates)
    e1 = np.array([1.0, 0.0, 0.0])
    return -np.linalg.solve(A, e1 * infusion_rate / rates.v1)
