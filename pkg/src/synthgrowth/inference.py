"""Relative growth-rate changes with delta-method errors, and the coefficient summary table."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InferenceError, ValidationError
from .gam import FitResult

__all__ = ["GrowthChange", "growth_change", "stars", "coefficient_table", "CoefficientTable", "Z95"]

Z95 = 1.96
STAR_LEVEL = 0.01


@dataclass(frozen=True)
class GrowthChange:
    """Relative change in the growth rate after the intervention.

    ``delta_rho_treated = exp(beta + delta) - 1`` and ``delta_rho_control =
    exp(beta) - 1``. ``se_treated_literal`` drops the factor 2 on the
    covariance term, for comparison with published numbers that used it.
    """

    delta_rho_treated: float
    delta_rho_control: float
    se_treated: float
    se_control: float
    ci95_treated: tuple[float, float]
    ci95_control: tuple[float, float]
    se_treated_literal: float

    def to_dict(self) -> dict:
        return asdict(self)


def growth_change(fit: FitResult, literal: bool = False) -> GrowthChange:
    """Point estimates, delta-method standard errors and normal 95% intervals.

    With ``literal=True`` the treated-region interval is built from
    ``se_treated_literal`` instead of the textbook variance.
    """
    try:
        b, d = fit.coef("Int"), fit.coef("Int:Reg")
        vb, vd, cbd = fit.cov("Int", "Int"), fit.cov("Int:Reg", "Int:Reg"), fit.cov("Int", "Int:Reg")
    except (KeyError, IndexError) as exc:
        raise InferenceError(f"missing coefficient or covariance entry: {exc}") from exc
    if not all(np.isfinite([b, d, vb, vd, cbd])):
        raise InferenceError("covariance entries for (Int, Int:Reg) are not finite")
    e0, e1 = math.exp(b), math.exp(b + d)
    se0 = e0 * math.sqrt(max(vb, 0.0))
    se1 = e1 * math.sqrt(max(vb + vd + 2.0 * cbd, 0.0))
    se1_lit = e1 * math.sqrt(max(vb + vd + cbd, 0.0))
    d1, d0 = e1 - 1.0, e0 - 1.0
    s1 = se1_lit if literal else se1
    return GrowthChange(
        delta_rho_treated=d1,
        delta_rho_control=d0,
        se_treated=se1,
        se_control=se0,
        ci95_treated=(d1 - Z95 * s1, d1 + Z95 * s1),
        ci95_control=(d0 - Z95 * se0, d0 + Z95 * se0),
        se_treated_literal=se1_lit,
    )


def stars(p_value: float) -> str:
    return "*" if p_value < STAR_LEVEL else ""


PARAM_ROWS = (("Int", "Int"), ("Reg", "Reg"), ("Int:Reg", "Int x Reg"), ("p", "p"))


@dataclass
class CoefficientTable:
    columns: list[str]
    rows: list[tuple[str, list[str]]]
    records: list[dict]

    def to_text(self) -> str:
        body = [r for r in self.rows if not r[0].startswith("[")]
        label_w = max(len(r[0]) for r in body)
        widths = [max(len(c), *(len(r[1][j]) for r in body)) for j, c in enumerate(self.columns)]
        lines = [" " * label_w + "  " + "  ".join(c.rjust(w) for c, w in zip(self.columns, widths))]
        lines.append("-" * len(lines[0]))
        for label, cells in self.rows:
            if label.startswith("["):
                lines.append(label)
                continue
            lines.append(label.ljust(label_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, widths)))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "models": self.records}, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["row", *self.columns])
            for label, cells in self.rows:
                if not label.startswith("["):
                    wr.writerow([label, *cells])


def coefficient_table(fits: Sequence[FitResult]) -> CoefficientTable:
    """Coefficient (SE) per model, smooth chi-square, growth changes and fit metrics.

    Stars mark p < 0.01. Models keep the order given.
    """
    if not fits:
        raise ValidationError("coefficient table needs at least one fit")
    columns = [f"{f.kind} {f.label}" for f in fits]
    rows: list[tuple[str, list[str]]] = [("[Parameter estimate (SE)]", [])]
    records = [{"model": c, "kind": f.kind, "label": f.label, "family": f.family} for c, f in zip(columns, fits)]
    for name, label in PARAM_ROWS:
        cells = []
        for f, rec in zip(fits, records):
            est, se, pv = f.coef(name), f.se(name), f.p_value(name)
            cells.append(f"{est:.3f} ({se:.3f}){stars(pv)}")
            rec.setdefault("coefficients", {})[name] = {"estimate": est, "se": se, "p_value": pv}
        rows.append((label, cells))
    if any(f.smooth is not None for f in fits):
        rows.append(("[Chi-square statistic (approx df)]", []))
        cells = []
        for f, rec in zip(fits, records):
            t = f.smooth_chisq
            if t is None:
                cells.append("")
                continue
            cells.append(f"{t.chisq:.1f} ({t.df}){stars(t.p_value)}")
            rec["smooth_test"] = {"chisq": t.chisq, "df": t.df, "p_value": t.p_value, "edf": t.edf}
        rows.append(("h(x)", cells))
    rows.append(("[Estimated growth change x 100% (SE)]", []))
    treated, control = [], []
    for f, rec in zip(fits, records):
        g = growth_change(f)
        treated.append(f"{100 * g.delta_rho_treated:.2f} ({100 * g.se_treated:.2f})")
        control.append(f"{100 * g.delta_rho_control:.2f} ({100 * g.se_control:.2f})")
        rec["growth_change"] = g.to_dict()
    rows.append(("Treated", treated))
    rows.append(("Synth Control", control))
    rows.append(("[Goodness-of-fit metrics]", []))
    for key, label, fmt in (
        ("adj_r2", "Adjusted-R2 (%)", "{:.1f}"),
        ("dev_explained", "Dev. Explained (%)", "{:.1f}"),
        ("aic", "AIC", "{:.1f}"),
        ("bic", "BIC", "{:.1f}"),
    ):
        cells = []
        for f, rec in zip(fits, records):
            v = getattr(f, key)
            cells.append(fmt.format(v))
            rec.setdefault("metrics", {})[key] = v
        rows.append((label, cells))
    for f, rec in zip(fits, records):
        rec["theta_nb"] = f.theta_nb
    return CoefficientTable(columns, rows, records)
