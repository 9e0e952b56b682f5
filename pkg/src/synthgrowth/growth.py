"""Parametric growth families (EG, GLG, GRG) and a count-data panel simulator.

The simulator integrates the growth equation forward one day at a time: the
expected increment on day t is evaluated at the cumulative count reached at the
end of day t-1, a count is drawn around it, and the draw is added to the
cumulative series. That is exactly the discrete model the estimator in
:mod:`synthgrowth.gam` fits, which makes simulated panels an exact oracle.

Randomness comes from numpy's Philox4x32-10 counter-based generator, so a seed
reproduces the same panel on every platform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import GrowthDomainError, SimulationDivergedError, ValidationError
from .gam import GrowthCoefficients
from .panel import Panel, RegionSeries, write_panel_csv

__all__ = [
    "Family",
    "ParametricGrowthSpec",
    "SimulatedPanel",
    "Response",
    "mean_increment",
    "simulate_panel",
    "make_rng",
]

_MAX_MEAN = 1e12


class Family(str, enum.Enum):
    EG = "EG"
    GLG = "GLG"
    GRG = "GRG"


@dataclass(frozen=True)
class ParametricGrowthSpec:
    family: Family
    rho: float
    p: float
    x0: float = 1.0
    k: float | None = None
    a: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.rho > 0:
            raise GrowthDomainError(f"rho must be positive, got {self.rho}")
        if not 0 <= self.p <= 1:
            raise GrowthDomainError(f"p must lie in [0, 1], got {self.p}")
        if not self.x0 > 0:
            raise GrowthDomainError(f"x0 must be positive, got {self.x0}")
        if self.family in (Family.GLG, Family.GRG):
            if self.k is None or not self.k > self.x0:
                raise GrowthDomainError("saturating families need k > x0")
        if self.family is Family.GRG and (self.a is None or not self.a > 0):
            raise GrowthDomainError("GRG needs a > 0")


def mean_increment(spec: ParametricGrowthSpec, x) -> np.ndarray | float:
    """Expected daily increment ``rho * x**p * g(x)``.

    ``g`` is 1 for EG, ``1 - x/k`` for GLG and ``1 - (x/k)**a`` for GRG; the
    power ``x**p`` appears once.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0):
        raise GrowthDomainError("cumulative count must be nonnegative")
    if spec.family is Family.EG:
        g = np.ones_like(xa)
    else:
        if np.any(xa > spec.k):
            raise GrowthDomainError(f"x exceeds the final size k={spec.k}")
        ratio = xa / spec.k
        g = 1.0 - ratio if spec.family is Family.GLG else 1.0 - ratio**spec.a
    out = spec.rho * np.power(xa, spec.p) * g
    return float(out) if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class Response:
    """Count distribution for simulated increments; ``theta=None`` means Poisson."""

    theta: float | None = None

    @property
    def name(self) -> str:
        return "poisson" if self.theta is None else "negbin"

    def draw(self, rng: np.random.Generator, mean: float) -> float:
        if mean <= 0:
            return 0.0
        if self.theta is None:
            return float(rng.poisson(mean))
        lam = rng.gamma(self.theta, mean / self.theta)
        return float(rng.poisson(lam))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class SimulatedPanel:
    panel: Panel
    truth: GrowthCoefficients
    seed: int
    means: Mapping[str, np.ndarray]

    def to_csv(self, path) -> None:
        write_panel_csv(self.panel, Path(path))


def simulate_panel(
    specs: Mapping[str, ParametricGrowthSpec],
    dii: GrowthCoefficients,
    horizon: int,
    response: Response | None = None,
    seed: int = 0,
    *,
    treated_id: str | None = None,
    intervention_day: int | None = None,
    start_date="2020-09-01",
    tests_per_case: float = 10.0,
    base_tests: float = 200.0,
) -> SimulatedPanel:
    """Simulate cumulative cases for each region under the growth-rate model.

    Day ``t`` (1-based) has log growth rate ``alpha + beta*Int_t + gamma*Reg_i
    + delta*Int_t*Reg_i`` with ``Int_t = 1`` for ``t >= intervention_day``; the
    exponent on cumulative cases is ``dii.p``. Each region's spec contributes its
    family, starting size ``x0`` and saturation parameters; its ``rho`` and ``p``
    are replaced by the values implied by ``dii``. Cumulative counts of the
    saturating families are capped at ``k``.

    Tests are simulated too (Poisson around ``base_tests + tests_per_case *
    mean``) so the panel has the full ingestion schema.
    """
    response = response or Response()
    if horizon < 10:
        raise ValidationError("horizon must be at least 10 days")
    intervention_day = horizon // 2 if intervention_day is None else intervention_day
    if not 1 <= intervention_day < horizon:
        raise ValidationError("intervention day must fall inside the horizon")
    if not 0 <= dii.p <= 1:
        raise ValidationError(f"injected p must lie in [0, 1], got {dii.p}")
    if len(dii.xi):
        raise ValidationError("the simulator does not generate control covariates; pass xi=()")
    region_ids = list(specs)
    treated_id = treated_id or region_ids[0]
    if treated_id not in specs:
        raise ValidationError(f"treated region {treated_id!r} has no spec")

    rng = make_rng(seed)
    start = np.datetime64(start_date, "D")
    dates = start + np.arange(horizon)
    regions, means = [], {}
    for rid in region_ids:
        spec = specs[rid]
        reg = 1.0 if rid == treated_id else 0.0
        cases = np.empty(horizon)
        tests = np.empty(horizon)
        mu = np.zeros(horizon)
        cases[0] = spec.x0
        tests[0] = spec.x0 * tests_per_case
        for t in range(1, horizon):
            post = 1.0 if t >= intervention_day else 0.0
            log_rho = dii.alpha + dii.beta * post + dii.gamma * reg + dii.delta * post * reg
            x_prev = cases[t - 1] if spec.k is None else min(cases[t - 1], spec.k)
            with np.errstate(over="ignore"):
                rho = float(np.exp(log_rho))
            if not np.isfinite(rho):
                raise SimulationDivergedError(f"growth rate overflowed on day {t}", day=t, region=rid)
            m = mean_increment(replace(spec, rho=rho, p=dii.p), x_prev)
            if not np.isfinite(m) or m > _MAX_MEAN:
                raise SimulationDivergedError(
                    f"region {rid!r}: expected increment overflowed on day {t} ({dates[t]})",
                    day=t,
                    region=rid,
                )
            mu[t] = m
            cases[t] = cases[t - 1] + response.draw(rng, m)
            tests[t] = tests[t - 1] + float(rng.poisson(base_tests + tests_per_case * m))
        regions.append(RegionSeries(rid, dates, cases, tests))
        means[rid] = mu
    panel = Panel(tuple(regions), treated_id=treated_id, intervention_date=dates[intervention_day])
    return SimulatedPanel(panel=panel, truth=dii, seed=seed, means=means)
