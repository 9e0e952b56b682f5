"""Placebo studies over donor regions and counterfactual projections of averted cases."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StudyError, SynthGrowthError, ValidationError
from .gam import LOG_X_COLUMN, NEGBIN, FitResult, ModelFrame, build_frame, fit
from .inference import growth_change
from .panel import Panel, derive
from .synth import SynthResult, synthesize

__all__ = [
    "ModelSpec",
    "PlaceboEntry",
    "PlaceboResult",
    "placebo_study",
    "CounterfactualProjection",
    "project_counterfactual",
]

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    family: str = NEGBIN
    with_controls: bool = True
    smooth: bool = True
    q: int = 10
    lambda_bounds: tuple[float, float] = (-8.0, 8.0)


@dataclass
class PlaceboEntry:
    region_id: str
    delta: float = float("nan")
    se: float = float("nan")
    delta_rho_treated: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class PlaceboResult:
    treated_id: str
    treated_delta: float
    entries: list[PlaceboEntry]
    empirical_ci95: tuple[float, float]
    rank: int  # 1 = most negative among treated + successful placebos
    gaps: dict[str, list[float]] = field(default_factory=dict)
    gap_dates: list[str] = field(default_factory=list)

    @property
    def placebo_deltas(self) -> np.ndarray:
        return np.array([e.delta for e in self.entries if e.ok])

    @property
    def treated_outside(self) -> bool:
        lo, hi = self.empirical_ci95
        return not (lo <= self.treated_delta <= hi)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["region_id", "delta", "se", "delta_rho_treated", "error"])
            for e in self.entries:
                wr.writerow([e.region_id, repr(e.delta), repr(e.se), repr(e.delta_rho_treated), e.error or ""])

    def summary(self) -> dict:
        return {
            "treated_id": self.treated_id,
            "treated_delta": self.treated_delta,
            "empirical_ci95": list(self.empirical_ci95),
            "rank": self.rank,
            "n_placebos": int(sum(e.ok for e in self.entries)),
            "n_failed": int(sum(not e.ok for e in self.entries)),
            "failures": {e.region_id: e.error for e in self.entries if not e.ok},
            "treated_outside_interval": self.treated_outside,
        }

    def to_json(self) -> str:
        out = self.summary()
        out["gaps"] = {"dates": self.gap_dates, "series": self.gaps}
        return json.dumps(out, indent=2, sort_keys=True)


def _gap(panel: Panel, region_id: str, synth: SynthResult) -> np.ndarray:
    own = derive(panel.subset([region_id]))[region_id].new_cases
    syn = np.diff(synth.synthetic.cumulative_cases)
    return own - syn


def _fit_region(panel: Panel, region_id: str, donors: list[str], spec: ModelSpec, seed: int):
    synth = synthesize(panel, region_id, donors, seed=seed)
    frame = build_frame(panel, synth, spec.with_controls, treated_id=region_id)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fit(frame, spec.family, spec.smooth, q=spec.q, lambda_bounds=spec.lambda_bounds)
    return synth, res


def _placebo_worker(args):
    panel, region_id, donors, spec, seed = args
    try:
        synth, res = _fit_region(panel, region_id, donors, spec, seed)
    except (SynthGrowthError, np.linalg.LinAlgError, ValueError) as exc:
        return PlaceboEntry(region_id, error=f"{type(exc).__name__}: {exc}"), None
    g = growth_change(res)
    entry = PlaceboEntry(region_id, res.coef("Int:Reg"), res.se("Int:Reg"), g.delta_rho_treated)
    return entry, _gap(panel, region_id, synth).tolist()


def placebo_study(
    panel: Panel,
    spec: ModelSpec = ModelSpec(),
    *,
    treated_id: str | None = None,
    treated_fit: FitResult | None = None,
    treated_synth: SynthResult | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> PlaceboResult:
    """Refit the model with each untreated region as pseudo-treated.

    The donor pool of pseudo-treated region ``r`` is every region except ``r``
    and the real treated region. Failed placebo fits are recorded with their
    reason; the study fails only when more than half of them fail.
    """
    treated_id = treated_id or panel.treated_id
    if treated_id is None:
        raise ValidationError("no treated region")
    if len(panel.regions) < 3:
        raise ValidationError("placebo study needs at least three regions")
    others = [r for r in panel.region_ids if r != treated_id]

    if treated_fit is None or treated_synth is None:
        treated_synth, treated_fit = _fit_region(panel, treated_id, others, spec, seed)
    treated_delta = treated_fit.coef("Int:Reg")

    tasks = [(panel, r, [d for d in others if d != r], spec, seed) for r in others]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_placebo_worker, tasks))
    else:
        outcomes = [_placebo_worker(t) for t in tasks]

    entries = [o[0] for o in outcomes]
    failed = sum(not e.ok for e in entries)
    if failed * 2 > len(entries):
        raise StudyError(
            f"{failed} of {len(entries)} placebo fits failed",
            failures={e.region_id: e.error for e in entries if not e.ok},
        )
    deltas = np.array([e.delta for e in entries if e.ok])
    if deltas.size < 2:
        raise StudyError("fewer than two successful placebo fits")
    lo, hi = np.percentile(deltas, [2.5, 97.5])
    rank = 1 + int(np.sum(deltas < treated_delta))
    gaps = {treated_id: _gap(panel, treated_id, treated_synth).tolist()}
    for e, (_, g) in zip(entries, outcomes):
        if g is not None:
            gaps[e.region_id] = g
    for e in entries:
        if not e.ok:
            LOGGER.warning("placebo fit for %s failed: %s", e.region_id, e.error)
    return PlaceboResult(
        treated_id=treated_id,
        treated_delta=treated_delta,
        entries=entries,
        empirical_ci95=(float(lo), float(hi)),
        rank=rank,
        gaps=gaps,
        gap_dates=[str(d) for d in panel.dates[1:]],
    )


# --------------------------------------------------------------------------
# Counterfactual projection
# --------------------------------------------------------------------------


@dataclass
class CounterfactualProjection:
    dates: np.ndarray
    observed_daily: np.ndarray
    actual_fitted_daily: np.ndarray
    counterfactual_daily: np.ndarray
    cumulative_averted: np.ndarray
    horizons: list[dict]
    extrapolated: bool = False

    @property
    def cumulative_fitted(self) -> np.ndarray:
        return np.cumsum(self.actual_fitted_daily)

    @property
    def cumulative_counterfactual(self) -> np.ndarray:
        return np.cumsum(self.counterfactual_daily)

    def at(self, horizon: int) -> dict:
        for h in self.horizons:
            if h["days"] == horizon:
                return h
        raise KeyError(horizon)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["day", "date", "observed", "fitted", "counterfactual", "cumulative_averted"])
            for k in range(self.dates.size):
                wr.writerow(
                    [k + 1, str(self.dates[k]), repr(float(self.observed_daily[k])),
                     repr(float(self.actual_fitted_daily[k])), repr(float(self.counterfactual_daily[k])),
                     repr(float(self.cumulative_averted[k]))]
                )

    def to_json(self) -> str:
        return json.dumps({"horizons": self.horizons, "extrapolated": self.extrapolated}, indent=2, sort_keys=True)


def _recursive_path(fit: FitResult, rows: ModelFrame, x0: float, delta_on: bool) -> tuple[np.ndarray, np.ndarray]:
    n = len(rows)
    y = np.empty(n)
    xs = np.empty(n)
    x = x0
    Xp = rows.parametric_design(delta_on=delta_on)
    npar = fit.n_param
    for k in range(n):
        xs[k] = x
        row = Xp[k].copy()
        row[LOG_X_COLUMN] = np.log(x)
        eta = row @ fit.beta[:npar]
        if fit.smooth is not None:
            eta += float(fit.smooth.basis.design([x])[0] @ fit.smooth.eta)
        y[k] = np.exp(eta)
        x = x + y[k]
    return y, xs


def project_counterfactual(fit: FitResult, frame: ModelFrame, horizons: Sequence[int]) -> CounterfactualProjection:
    """Project the treated region forward from the intervention with and without ``delta``.

    Both paths start from the observed cumulative count on the eve of the
    intervention and feed their own predicted increments back into cumulative
    cases. The counterfactual keeps every coefficient (including the common
    post-period shift), the smooth and the observed controls, and sets only the
    interaction to zero. Percent reductions use the counterfactual's additional
    cases since the intervention as the denominator.
    """
    mask = (frame.reg_i == 1) & (frame.int_t == 1)
    rows = frame.rows(mask)
    order = np.argsort(rows.dates, kind="stable")
    rows = rows.rows(order)
    n = len(rows)
    horizons = sorted({int(h) for h in horizons})
    if not horizons or horizons[0] < 1 or horizons[-1] > n:
        raise ValidationError(f"horizons must lie in 1..{n} (post-period length)")
    x0 = float(rows.x[0])
    fitted, x_fit = _recursive_path(fit, rows, x0, True)
    cf, x_cf = _recursive_path(fit, rows, x0, False)
    extrapolated = False
    if fit.smooth is not None:
        out = fit.smooth.basis.out_of_support(np.concatenate([x_fit, x_cf]))
        if np.any(out):
            extrapolated = True
            warnings.warn(
                "projected cumulative cases leave the smooth's knot range; h(x) is continued linearly",
                RuntimeWarning,
                stacklevel=2,
            )
    averted = np.cumsum(cf - fitted)
    cum_cf = np.cumsum(cf)
    cum_fit = np.cumsum(fitted)
    table = [
        {
            "days": h,
            "date": str(rows.dates[h - 1]),
            "averted": float(averted[h - 1]),
            "counterfactual_additional": float(cum_cf[h - 1]),
            "fitted_additional": float(cum_fit[h - 1]),
            "percent_reduction": float(100.0 * averted[h - 1] / cum_cf[h - 1]),
        }
        for h in horizons
    ]
    return CounterfactualProjection(
        dates=rows.dates,
        observed_daily=rows.y,
        actual_fitted_daily=fitted,
        counterfactual_daily=cf,
        cumulative_averted=averted,
        horizons=table,
        extrapolated=extrapolated,
    )
