"""Growth-rate count regression with an optional penalized smooth of cumulative cases.

Model for the expected number of new cases on row ``i`` (region block, day t):

    log E[y_i] = alpha + beta*Int + gamma*Reg + delta*Int*Reg + xi'z + p*log(x) + h(x)

where ``x`` is cumulative cases at the end of the previous day. ``h`` is a
thin-plate smooth (``smooth=True``, SPG) or absent (EG). Responses are Poisson
or negative binomial with a log link; the likelihood uses the log-gamma form so
non-integer responses (weighted synthetic counts) are handled continuously.

Fitting is penalized Newton (observed-information IRLS). The smoothing
parameter maximizes a Laplace approximation to the marginal likelihood; the
negative-binomial size ``theta`` is profiled in an outer one-dimensional search.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special, stats

from .errors import (
    ConvergenceError,
    FrameError,
    MetricsError,
    RankDeficiencyError,
    ValidationError,
)
from .panel import Panel, RegionSeries, day_of_week, monotonize
from .smooth import DEFAULT_Q, SmoothBasis, build_basis

__all__ = [
    "POISSON",
    "NEGBIN",
    "GrowthCoefficients",
    "ModelFrame",
    "SmoothTerm",
    "SmoothTest",
    "FitResult",
    "build_frame",
    "frame_from_series",
    "fit",
    "model_metrics",
    "smooth_test",
    "loglik",
    "score",
    "deviance",
    "model_label",
]

LOGGER = logging.getLogger(__name__)

POISSON = "poisson"
NEGBIN = "negbin"
FAMILIES = (POISSON, NEGBIN)

DOW_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
BASE_NAMES = ("(Intercept)", "Int", "Reg", "Int:Reg", "p")
LOG_X_COLUMN = BASE_NAMES.index("p")
LAMBDA_BOUNDS = (-8.0, 8.0)
THETA_BOUNDS = (-3.0, 10.0)
_ETA_MAX = 700.0


def model_label(family: str, with_controls: bool) -> str:
    base = "Pois" if family == POISSON else "NBin"
    return f"{base} + Ctrl" if with_controls else base


def control_names() -> list[str]:
    dows = [f"dow_{d}" for d in DOW_NAMES[1:]]
    return ["dtests", *dows, *[f"dtests:{d}" for d in dows]]


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GrowthCoefficients:
    alpha: float
    beta: float
    gamma: float
    delta: float
    p: float
    xi: tuple[float, ...] = ()

    @property
    def p_in_range(self) -> bool:
        return 0.0 <= self.p <= 1.0

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "delta": self.delta,
            "p": self.p,
            "xi": list(self.xi),
        }


@dataclass(eq=False)
class ModelFrame:
    """Stacked treated and synthetic rows.

    ``x`` is the cumulative count at the end of the previous day and ``y`` the
    increment on ``dates``. ``controls`` (present only when ``with_controls``)
    holds the day-over-day change in new tests, six weekday indicators
    (Monday is the reference) and their interactions with the test change.
    """

    region: np.ndarray
    dates: np.ndarray
    y: np.ndarray
    x: np.ndarray
    int_t: np.ndarray
    reg_i: np.ndarray
    controls: np.ndarray
    control_names: list[str]
    with_controls: bool
    intervention_date: np.datetime64
    new_tests: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.y.size
        for name in ("region", "dates", "x", "int_t", "reg_i"):
            if getattr(self, name).shape != (n,):
                raise FrameError(f"frame column {name!r} has the wrong length")
        if self.controls.shape != (n, len(self.control_names)):
            raise FrameError("control matrix does not match its names")
        if n == 0:
            raise FrameError("model frame is empty")
        if np.any(self.x <= 0):
            raise FrameError("cumulative cases must be positive on every row")
        if np.any(self.y < 0) or not np.all(np.isfinite(self.y)):
            raise FrameError("responses must be finite and nonnegative")

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def log_x(self) -> np.ndarray:
        return np.log(self.x)

    @property
    def int_x_reg(self) -> np.ndarray:
        return self.int_t * self.reg_i

    @property
    def parametric_names(self) -> list[str]:
        return [*BASE_NAMES, *self.control_names]

    def parametric_design(self, x=None, delta_on: bool = True) -> np.ndarray:
        x = self.x if x is None else np.asarray(x, dtype=float)
        inter = self.int_t * self.reg_i if delta_on else np.zeros_like(self.int_t)
        return np.column_stack([np.ones_like(x), self.int_t, self.reg_i, inter, np.log(x), self.controls])

    def rows(self, mask) -> "ModelFrame":
        mask = np.asarray(mask)
        return ModelFrame(
            region=self.region[mask],
            dates=self.dates[mask],
            y=self.y[mask],
            x=self.x[mask],
            int_t=self.int_t[mask],
            reg_i=self.reg_i[mask],
            controls=self.controls[mask],
            control_names=list(self.control_names),
            with_controls=self.with_controls,
            intervention_date=self.intervention_date,
            new_tests=None if self.new_tests is None else self.new_tests[mask],
        )


def _block_rows(series: RegionSeries, reg: float, intervention, with_controls: bool):
    cases = monotonize(series.cumulative_cases)
    tests = monotonize(series.cumulative_tests)
    new_cases = np.diff(cases)
    new_tests = np.diff(tests)
    dtests = np.diff(new_tests)
    # Row k covers dates[k+2]; it needs new_tests on the previous day for dtests.
    dates = series.dates[2:]
    y = new_cases[1:]
    x = cases[1:-1]
    nt = new_tests[1:]
    keep = x >= 1.0
    if not np.any(keep):
        raise FrameError(f"{series.region_id!r} never reaches one cumulative case")
    first = int(np.argmax(keep))
    sl = slice(first, None)
    dates, y, x, nt, dtests = dates[sl], y[sl], x[sl], nt[sl], dtests[sl]
    int_t = (dates >= intervention).astype(float)
    reg_i = np.full(dates.size, reg)
    if with_controls:
        dow = day_of_week(dates)
        D = np.column_stack([(dow == k).astype(float) for k in range(1, 7)])
        controls = np.column_stack([dtests, D, D * dtests[:, None]])
    else:
        controls = np.zeros((dates.size, 0))
    return dates, y, x, int_t, reg_i, controls, nt


def frame_from_series(
    treated: RegionSeries,
    control: RegionSeries,
    intervention_date,
    with_controls: bool,
) -> ModelFrame:
    """Stack a treated block (``Reg = 1``) on top of a control block (``Reg = 0``)."""
    if not np.array_equal(treated.dates, control.dates):
        raise FrameError("treated and control series are not aligned on the same dates")
    if len(treated) < 4:
        raise FrameError("need at least four dates per region")
    intervention = np.datetime64(intervention_date, "D")
    blocks = [
        ("treated", _block_rows(treated, 1.0, intervention, with_controls)),
        ("synthetic", _block_rows(control, 0.0, intervention, with_controls)),
    ]
    region = np.concatenate([np.full(b[0].size, name) for name, b in blocks])
    parts = list(zip(*[b for _, b in blocks]))
    return ModelFrame(
        region=region,
        dates=np.concatenate(parts[0]),
        y=np.concatenate(parts[1]),
        x=np.concatenate(parts[2]),
        int_t=np.concatenate(parts[3]),
        reg_i=np.concatenate(parts[4]),
        controls=np.vstack(parts[5]),
        control_names=control_names() if with_controls else [],
        with_controls=with_controls,
        intervention_date=intervention,
        new_tests=np.concatenate(parts[6]),
    )


def build_frame(panel: Panel, synth, with_controls: bool, treated_id: str | None = None) -> ModelFrame:
    """Model frame from the treated region and its synthetic control (``SynthResult``)."""
    treated_id = treated_id or synth.treated_id or panel.treated_id
    if synth.synthetic is None:
        raise FrameError("synthetic control carries no synthetic series")
    if not np.array_equal(synth.synthetic.dates, panel.dates):
        raise FrameError("synthetic series dates do not match the panel")
    if panel.intervention_date is None:
        raise FrameError("panel has no intervention date")
    return frame_from_series(panel[treated_id], synth.synthetic, panel.intervention_date, with_controls)


# --------------------------------------------------------------------------
# Likelihood pieces
# --------------------------------------------------------------------------


def _check_family(family: str, theta):
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}")
    if family == NEGBIN and not (theta is not None and theta > 0):
        raise ValidationError("negative binomial needs theta > 0")


def _loglik_terms(y, mu, family, theta):
    if family == POISSON:
        return special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)
    return (
        special.gammaln(y + theta)
        - special.gammaln(theta)
        - special.gammaln(y + 1.0)
        + special.xlogy(y, mu)
        - y * np.log(theta + mu)
        + theta * (np.log(theta) - np.log(theta + mu))
    )


def _deriv_eta(y, mu, family, theta):
    """First derivative of the log-likelihood wrt the linear predictor and observed weight."""
    if family == POISSON:
        return y - mu, mu
    ratio = theta / (theta + mu)
    u = (y - mu) * ratio
    w = mu * ratio * (y + theta) / (theta + mu)
    return u, w


def loglik(beta, X, y, family: str = POISSON, theta: float | None = None) -> float:
    _check_family(family, theta)
    eta = np.clip(np.asarray(X) @ np.asarray(beta), -_ETA_MAX, _ETA_MAX)
    return float(np.sum(_loglik_terms(np.asarray(y, float), np.exp(eta), family, theta)))


def score(beta, X, y, family: str = POISSON, theta: float | None = None) -> np.ndarray:
    """Gradient of :func:`loglik` with respect to ``beta``."""
    _check_family(family, theta)
    X = np.asarray(X)
    eta = np.clip(X @ np.asarray(beta), -_ETA_MAX, _ETA_MAX)
    u, _ = _deriv_eta(np.asarray(y, float), np.exp(eta), family, theta)
    return X.T @ u


def deviance(y, mu, family: str = POISSON, theta: float | None = None) -> float:
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    if family == POISSON:
        d = special.xlogy(y, y / mu) - (y - mu)
    else:
        d = special.xlogy(y, y / mu) - (y + theta) * np.log((y + theta) / (mu + theta))
    return float(2.0 * np.sum(d))


# --------------------------------------------------------------------------
# Penalized Newton
# --------------------------------------------------------------------------


@dataclass
class _Pirls:
    beta: np.ndarray
    mu: np.ndarray
    w: np.ndarray
    iterations: int
    pen_ll: float
    ll: float


class _Problem:
    """Scaled design, response and penalty pattern shared by all inner fits."""

    def __init__(self, X, y, names, S_embedded, family, max_iter=200):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.names = list(names)
        self.family = family
        self.max_iter = max_iter
        scale = np.sqrt(np.mean(self.X**2, axis=0))
        scale[~(scale > 0)] = 1.0
        self.col_scale = scale
        self.Xs = self.X / scale
        self.S = S_embedded  # penalty on the original coefficient scale, or None
        self.Ss = None if S_embedded is None else S_embedded / np.outer(scale, scale)
        self._last = None

    def penalty(self, lam: float):
        if self.Ss is None or lam == 0:
            return np.zeros((self.Xs.shape[1],) * 2)
        return lam * self.Ss

    def _init_beta(self, P, theta):
        y = self.y
        mu0 = y + 0.1 * max(y.mean(), 1.0)
        eta0 = np.log(mu0)
        _, w0 = _deriv_eta(mu0, mu0, self.family, theta)
        A = self.Xs.T @ (self.Xs * w0[:, None]) + P
        return linalg.solve(A, self.Xs.T @ (w0 * eta0), assume_a="sym")

    def run(self, lam: float, theta, beta0=None) -> _Pirls:
        P = self.penalty(lam)
        Xs, y, fam = self.Xs, self.y, self.family
        if beta0 is None:
            beta0 = self._last if self._last is not None else self._init_beta(P, theta)
        b = np.array(beta0, dtype=float)

        def pen_ll(bv):
            eta = np.clip(Xs @ bv, -_ETA_MAX, _ETA_MAX)
            mu = np.exp(eta)
            return float(np.sum(_loglik_terms(y, mu, fam, theta))) - 0.5 * bv @ P @ bv, mu

        cur, mu = pen_ll(b)
        trace = []
        for it in range(1, self.max_iter + 1):
            u, w = _deriv_eta(y, mu, fam, theta)
            grad = Xs.T @ u - P @ b
            A = Xs.T @ (Xs * w[:, None]) + P
            try:
                step = linalg.solve(A, grad, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                step = np.linalg.lstsq(A, grad, rcond=None)[0]
            t = 1.0
            for _ in range(60):
                cand = b + t * step
                new, mu_new = pen_ll(cand)
                if np.isfinite(new) and new >= cur - 1e-12 * abs(cur):
                    break
                t *= 0.5
            else:
                raise ConvergenceError(
                    "penalized Newton could not increase the objective",
                    trace=trace[-10:],
                    iteration=it,
                )
            b, mu, prev, cur = cand, mu_new, cur, new
            trace.append(cur)
            if np.max(np.abs(t * step)) <= 1e-11 * (1.0 + np.max(np.abs(b))) or (
                abs(cur - prev) <= 1e-15 * abs(cur) and np.max(np.abs(grad)) < 1e-8
            ):
                break
        else:
            raise ConvergenceError(
                f"penalized Newton did not converge in {self.max_iter} iterations",
                trace=trace[-10:],
            )
        if not np.all(np.isfinite(b)):
            raise ConvergenceError("penalized Newton diverged", trace=trace[-10:])
        _, w = _deriv_eta(y, mu, fam, theta)
        self._last = b
        ll = float(np.sum(_loglik_terms(y, mu, fam, theta)))
        return _Pirls(b, mu, w, it, cur, ll)

    def hessian(self, w):
        return self.Xs.T @ (self.Xs * w[:, None])

    def check_rank(self, n_param: int):
        Xp = self.Xs[:, :n_param]
        _, R, piv = linalg.qr(Xp, mode="economic", pivoting=True)
        d = np.abs(np.diag(R))
        tol = d[0] * max(Xp.shape) * np.finfo(float).eps * 1e3
        rank = int(np.sum(d > tol))
        if rank < n_param:
            bad = int(piv[rank])
            raise RankDeficiencyError(
                f"design column {self.names[bad]!r} is linearly dependent on the others",
                column=self.names[bad],
            )

    def check_weights(self, w, n_param: int):
        info = np.einsum("ij,i,ij->j", self.Xs[:, :n_param], w, self.Xs[:, :n_param])
        ref = np.sum(w) + 1e-300
        for j in range(n_param):
            if info[j] <= 1e-10 * ref:
                raise RankDeficiencyError(
                    f"fitted weights vanish on the support of column {self.names[j]!r}",
                    column=self.names[j],
                )


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


@dataclass(eq=False)
class SmoothTerm:
    basis: SmoothBasis
    eta: np.ndarray
    lam: float  # multiplier of the normalized penalty
    lam_raw: float  # multiplier of basis.S on the coefficient scale
    edf: float
    method: str = "laml"
    vcov_freq: np.ndarray | None = None  # Vp H Vp on the smooth block


@dataclass(frozen=True)
class SmoothTest:
    chisq: float
    df: int
    p_value: float
    edf: float
    pinv_fallback: bool = False


@dataclass(eq=False)
class FitResult:
    names: list[str]
    beta: np.ndarray
    vcov: np.ndarray
    family: str
    with_controls: bool
    smooth: SmoothTerm | None
    theta_nb: float | None
    loglik: float
    deviance: float
    null_deviance: float
    edf_total: float
    aic: float
    bic: float
    adj_r2: float
    dev_explained: float
    fitted: np.ndarray
    n: int
    iterations: int
    smooth_chisq: SmoothTest | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n_param(self) -> int:
        return len(self.names) - (0 if self.smooth is None else self.smooth.basis.dim)

    @property
    def kind(self) -> str:
        return "EG" if self.smooth is None else "SPG"

    @property
    def label(self) -> str:
        return model_label(self.family, self.with_controls)

    @property
    def coefficients(self) -> GrowthCoefficients:
        b = self.beta
        return GrowthCoefficients(
            alpha=float(b[0]),
            beta=float(b[1]),
            gamma=float(b[2]),
            delta=float(b[3]),
            p=float(b[4]),
            xi=tuple(float(v) for v in b[5 : self.n_param]),
        )

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}") from None

    def coef(self, name: str) -> float:
        return float(self.beta[self.index(name)])

    def se(self, name: str) -> float:
        i = self.index(name)
        return float(np.sqrt(self.vcov[i, i]))

    def cov(self, a: str, b: str) -> float:
        return float(self.vcov[self.index(a), self.index(b)])

    def p_value(self, name: str) -> float:
        z = self.coef(name) / self.se(name)
        return float(2.0 * stats.norm.sf(abs(z)))

    @property
    def param_theta(self):
        return self.theta_nb if self.family == NEGBIN else None

    def linear_predictor(self, frame: ModelFrame, x=None, delta_on: bool = True) -> np.ndarray:
        """Linear predictor on ``frame`` rows, optionally at substituted cumulative cases."""
        Xp = frame.parametric_design(x=x, delta_on=delta_on)
        eta = Xp @ self.beta[: self.n_param]
        if self.smooth is not None:
            xx = frame.x if x is None else np.asarray(x, dtype=float)
            eta = eta + self.smooth.basis.design(xx) @ self.smooth.eta
        return eta

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "label": self.label,
            "family": self.family,
            "with_controls": self.with_controls,
            "names": self.names,
            "coefficients": {n: float(b) for n, b in zip(self.names, self.beta)},
            "se": {n: float(np.sqrt(self.vcov[i, i])) for i, n in enumerate(self.names)},
            "vcov": self.vcov.tolist(),
            "theta_nb": self.theta_nb,
            "metrics": {
                "loglik": self.loglik,
                "deviance": self.deviance,
                "null_deviance": self.null_deviance,
                "edf_total": self.edf_total,
                "aic": self.aic,
                "bic": self.bic,
                "adj_r2": self.adj_r2,
                "dev_explained": self.dev_explained,
                "n": self.n,
            },
            "growth": self.coefficients.to_dict(),
            "smooth": None,
            "smooth_test": None,
            "fitted": [float(v) for v in self.fitted],
            "iterations": self.iterations,
            "warnings": list(self.warnings),
        }
        if self.smooth is not None:
            out["smooth"] = {
                "basis": self.smooth.basis.to_dict(),
                "eta": self.smooth.eta.tolist(),
                "lambda": self.smooth.lam,
                "lambda_raw": self.smooth.lam_raw,
                "edf": self.smooth.edf,
                "method": self.smooth.method,
                "vcov_freq": None if self.smooth.vcov_freq is None else self.smooth.vcov_freq.tolist(),
            }
        if self.smooth_chisq is not None:
            t = self.smooth_chisq
            out["smooth_test"] = {
                "chisq": t.chisq,
                "df": t.df,
                "p_value": t.p_value,
                "edf": t.edf,
                "pinv_fallback": t.pinv_fallback,
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        sm = d.get("smooth")
        smooth = None
        if sm is not None:
            smooth = SmoothTerm(
                basis=SmoothBasis.from_dict(sm["basis"]),
                eta=np.asarray(sm["eta"], float),
                lam=sm["lambda"],
                lam_raw=sm["lambda_raw"],
                edf=sm["edf"],
                method=sm.get("method", "laml"),
                vcov_freq=None if sm.get("vcov_freq") is None else np.asarray(sm["vcov_freq"], float),
            )
        st = d.get("smooth_test")
        m = d["metrics"]
        return cls(
            names=list(d["names"]),
            beta=np.array([d["coefficients"][n] for n in d["names"]], float),
            vcov=np.asarray(d["vcov"], float),
            family=d["family"],
            with_controls=d["with_controls"],
            smooth=smooth,
            theta_nb=d.get("theta_nb"),
            loglik=m["loglik"],
            deviance=m["deviance"],
            null_deviance=m["null_deviance"],
            edf_total=m["edf_total"],
            aic=m["aic"],
            bic=m["bic"],
            adj_r2=m["adj_r2"],
            dev_explained=m["dev_explained"],
            fitted=np.asarray(d["fitted"], float),
            n=m["n"],
            iterations=d.get("iterations", 0),
            smooth_chisq=None if st is None else SmoothTest(**st),
            warnings=list(d.get("warnings", [])),
        )

    def write_fitted_csv(self, frame: ModelFrame, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["region", "date", "actual", "fitted", "cumulative_cases"])
            for k in range(len(frame)):
                wr.writerow(
                    [frame.region[k], str(frame.dates[k]), repr(float(frame.y[k])),
                     repr(float(self.fitted[k])), repr(float(frame.x[k]))]
                )


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------


def _logdet_pd(A) -> float:
    c, lower = linalg.cho_factor(A, lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def _logdet_sym(A) -> float:
    try:
        return _logdet_pd(A)
    except linalg.LinAlgError:
        sign, ld = np.linalg.slogdet(A)
        return ld if sign > 0 else -np.inf


class _Fitter:
    def __init__(self, frame: ModelFrame, family: str, smooth: bool, q: int, basis: SmoothBasis | None):
        self.frame = frame
        self.family = family
        Xp = frame.parametric_design()
        names = list(frame.parametric_names)
        self.n_param = Xp.shape[1]
        self.basis = None
        S_emb = None
        if smooth:
            self.basis = basis or build_basis(frame.x, q)
            B = self.basis.design(frame.x)
            X = np.column_stack([Xp, B])
            names += [f"s(x).{j + 1}" for j in range(B.shape[1])]
            S_emb = np.zeros((X.shape[1],) * 2)
            S_emb[self.n_param :, self.n_param :] = self.basis.S
        else:
            X = Xp
        self.problem = _Problem(X, frame.y, names, S_emb, family)
        self.problem.check_rank(self.n_param)
        self.s_norm = 1.0
        if smooth:
            self.s_norm = self._penalty_normalizer()
        self.rank_S = 0 if not smooth else self.basis.dim
        self.logdet_S = 0.0 if not smooth else _logdet_pd(self.problem.Ss[self.n_param :, self.n_param :])

    def _penalty_normalizer(self) -> float:
        """Put the penalty on the scale of the smooth block's Poisson information."""
        pr = _Problem(self.problem.X[:, : self.n_param], self.problem.y, self.problem.names, None, POISSON)
        init = pr.run(0.0, None)
        w = init.w
        Bs = self.problem.Xs[:, self.n_param :]
        info = Bs.T @ (Bs * w[:, None])
        Ss = self.problem.Ss[self.n_param :, self.n_param :]
        return float(np.trace(info) / np.trace(Ss))

    def run(self, lam_rel: float, theta):
        return self.problem.run(lam_rel * self.s_norm, theta)

    def laml(self, lam_rel: float, theta) -> tuple[float, _Pirls]:
        lam = lam_rel * self.s_norm
        r = self.problem.run(lam, theta)
        P = self.problem.penalty(lam)
        H = self.problem.hessian(r.w)
        value = (
            r.pen_ll
            + 0.5 * (self.rank_S * math.log(lam) + self.logdet_S)
            - 0.5 * _logdet_sym(H + P)
        )
        return value, r

    def aic_at(self, lam_rel: float, theta) -> float:
        lam = lam_rel * self.s_norm
        r = self.problem.run(lam, theta)
        H = self.problem.hessian(r.w)
        A = H + self.problem.penalty(lam)
        edf = float(np.trace(linalg.solve(A, H, assume_a="pos")))
        return -2.0 * r.ll + 2.0 * edf

    def select_lambda(self, theta, bounds) -> tuple[float, str]:
        lo, hi = bounds
        evals = {}

        def neg(loglam):
            v, _ = self.laml(math.exp(loglam), theta)
            evals[loglam] = v
            return -v

        res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
        for edge in (lo, hi):
            neg(edge)
        best = max(evals, key=lambda k: (evals[k], -k))
        vals = np.array(list(evals.values()))
        if np.ptp(vals) < 1e-6:
            res = optimize.minimize_scalar(
                lambda ll: self.aic_at(math.exp(ll), theta), bounds=(lo, hi), method="bounded",
                options={"xatol": 1e-4},
            )
            return math.exp(float(res.x)), "aic"
        return math.exp(float(best)), "laml"

    def profile(self, theta, lam_bounds, lam_fixed):
        """Criterion maximized over theta: LAML (smooth) or log-likelihood (no smooth)."""
        if self.basis is None:
            r = self.problem.run(0.0, theta)
            return r.ll, 0.0, "none"
        if lam_fixed is not None:
            v, _ = self.laml(lam_fixed, theta)
            return v, lam_fixed, "fixed"
        lam, method = self.select_lambda(theta, lam_bounds)
        v, _ = self.laml(lam, theta)
        return v, lam, method


def fit(
    frame: ModelFrame,
    family: str = NEGBIN,
    smooth: bool = True,
    *,
    q: int = DEFAULT_Q,
    basis: SmoothBasis | None = None,
    lambda_bounds: tuple[float, float] = LAMBDA_BOUNDS,
    theta_bounds: tuple[float, float] = THETA_BOUNDS,
    lam: float | None = None,
    theta: float | None = None,
) -> FitResult:
    """Fit the growth model to ``frame``.

    Parameters
    ----------
    family : {"poisson", "negbin"}
    smooth : include the thin-plate smooth ``h(x)`` (SPG) or not (EG).
    q : basis dimension of the smooth before the centring constraint.
    lambda_bounds : natural-log search interval for the smoothing parameter,
        relative to a penalty normalized to the smooth block's information.
    theta_bounds : natural-log search interval for the negative binomial size.
    lam, theta : fix the smoothing parameter / size instead of estimating them.
    """
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}")
    if len(frame) == 0:
        raise FrameError("empty model frame")
    ft = _Fitter(frame, family, smooth, q, basis)

    lam_method = "none"
    if family == NEGBIN and theta is None:
        cache = {}

        def neg(logt):
            v, lam_t, m = ft.profile(math.exp(logt), lambda_bounds, lam)
            cache[logt] = (v, lam_t, m)
            return -v

        ft.problem._last = None
        res = optimize.minimize_scalar(neg, bounds=theta_bounds, method="bounded", options={"xatol": 1e-5})
        logt = float(res.x)
        if logt not in cache:
            neg(logt)
        theta_hat = math.exp(logt)
        _, lam_hat, lam_method = cache[logt]
    else:
        theta_hat = theta if family == NEGBIN else None
        if smooth:
            if lam is not None:
                lam_hat, lam_method = lam, "fixed"
            else:
                lam_hat, lam_method = ft.select_lambda(theta_hat, lambda_bounds)
        else:
            lam_hat = 0.0
    if not smooth:
        lam_hat = 0.0

    r = ft.run(lam_hat, theta_hat)
    pr = ft.problem
    ft.problem.check_weights(r.w, ft.n_param)
    P = pr.penalty(lam_hat * ft.s_norm)
    Hs = pr.hessian(r.w)
    try:
        Vs = linalg.inv(Hs + P)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError("penalized information is singular", column="?") from exc
    scale = pr.col_scale
    beta = r.beta / scale
    vcov = Vs / np.outer(scale, scale)
    vcov = 0.5 * (vcov + vcov.T)
    F = Vs @ Hs
    edf_total = float(np.trace(F))

    smooth_term = None
    if smooth:
        sl = slice(ft.n_param, None)
        Ve = (Vs @ Hs @ Vs)[sl, sl] / np.outer(scale[sl], scale[sl])
        smooth_term = SmoothTerm(
            basis=ft.basis,
            eta=beta[sl].copy(),
            lam=lam_hat,
            lam_raw=lam_hat * ft.s_norm,
            edf=float(np.trace(F[sl, sl])),
            method=lam_method,
            vcov_freq=0.5 * (Ve + Ve.T),
        )

    result = FitResult(
        names=pr.names,
        beta=beta,
        vcov=vcov,
        family=family,
        with_controls=frame.with_controls,
        smooth=smooth_term,
        theta_nb=theta_hat,
        loglik=r.ll,
        deviance=float("nan"),
        null_deviance=float("nan"),
        edf_total=edf_total,
        aic=float("nan"),
        bic=float("nan"),
        adj_r2=float("nan"),
        dev_explained=float("nan"),
        fitted=r.mu,
        n=len(frame),
        iterations=r.iterations,
    )
    aic, bic, adj_r2, dev_expl = model_metrics(result, frame)
    result.aic, result.bic, result.adj_r2, result.dev_explained = aic, bic, adj_r2, dev_expl
    if smooth:
        result.smooth_chisq = smooth_test(result)
    if not result.coefficients.p_in_range:
        msg = f"estimated p = {result.coefficients.p:.3f} lies outside [0, 1]"
        result.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return result


def model_metrics(fit: FitResult, frame: ModelFrame) -> tuple[float, float, float, float]:
    """AIC, BIC, adjusted R-squared (percent) and deviance explained (percent).

    The degrees of freedom are the trace of the penalized influence matrix plus
    one for an estimated negative binomial size.
    """
    y = frame.y
    mu = fit.fitted
    theta = fit.param_theta
    n = y.size
    ybar = float(y.mean())
    if not ybar > 0:
        raise MetricsError("null model undefined: response is identically zero")
    dev = deviance(y, mu, fit.family, theta)
    null_dev = deviance(y, np.full(n, ybar), fit.family, theta)
    if not (np.isfinite(dev) and np.isfinite(null_dev)):
        raise MetricsError("deviance is not finite")
    fit.deviance, fit.null_deviance = dev, null_dev
    k = fit.edf_total + (1.0 if fit.family == NEGBIN else 0.0)
    aic = -2.0 * fit.loglik + 2.0 * k
    bic = -2.0 * fit.loglik + math.log(n) * k
    resid_df = n - fit.edf_total
    vy = float(np.var(y, ddof=1))
    if resid_df <= 0 or vy == 0:
        adj = float("nan")
    else:
        adj = 100.0 * (1.0 - float(np.var(y - mu, ddof=1)) * (n - 1) / (vy * resid_df))
    if null_dev > 0:
        dev_expl = 100.0 * min(1.0, max(0.0, 1.0 - dev / null_dev))
    else:
        dev_expl = 100.0
    return aic, bic, adj, dev_expl


def smooth_test(fit: FitResult, frequentist: bool = False) -> SmoothTest:
    """Wald test of ``h = 0`` using a rank-truncated inverse of the smooth covariance.

    The rank (reported degrees of freedom) is the smooth's effective degrees of
    freedom rounded up, capped at the basis dimension.

    By default the covariance is the penalized (Bayesian) one stored in
    ``fit.vcov``; the statistic then vanishes as the smoothing parameter grows,
    and the test is conservative when the smooth is penalized away. With
    ``frequentist=True`` the sampling covariance ``Vp H Vp`` of the penalized
    estimator is used instead, which keeps the null distribution close to
    chi-square even when the smoothing parameter sits at its upper bound.
    """
    if fit.smooth is None:
        raise ValidationError("fit has no smooth term")
    sl = slice(fit.n_param, None)
    eta = fit.beta[sl]
    if frequentist:
        if fit.smooth.vcov_freq is None:
            raise ValidationError("fit carries no frequentist smooth covariance")
        V = fit.smooth.vcov_freq
    else:
        V = fit.vcov[sl, sl]
    dim = eta.size
    edf = fit.smooth.edf
    r = int(min(dim, max(1, math.ceil(edf - 1e-6))))
    vals, vecs = np.linalg.eigh(0.5 * (V + V.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    tol = vals[0] * dim * np.finfo(float).eps if vals[0] > 0 else 0.0
    fallback = bool(np.any(vals[:r] <= tol))
    keep = np.arange(r)
    if fallback:
        keep = keep[vals[:r] > tol]
        if keep.size == 0:
            return SmoothTest(0.0, r, 1.0, edf, True)
    proj = vecs[:, keep].T @ eta
    chisq = float(np.sum(proj**2 / vals[keep]))
    return SmoothTest(chisq, r, float(stats.chi2.sf(chisq, r)), edf, fallback)
