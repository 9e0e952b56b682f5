"""Synthetic control: simplex-constrained donor weights and nested V selection.

The inner problem

    min_w (u1 - U0 w)' V (u1 - U0 w)   s.t.  w >= 0, sum(w) = 1

is solved exactly by a primal active-set method. The outer problem picks the
diagonal of V (nonnegative, summing to one) that minimizes the pre-period MSPE
of the outcome, searching softmax logits with Nelder-Mead and BFGS from a fixed
list of starts.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, NoDonorError, SynthError, UndefinedStatisticError, ValidationError
from .panel import Panel, RegionSeries, derive

__all__ = [
    "PredictorVectors",
    "SynthResult",
    "qp_objective",
    "solve_simplex_qp",
    "solve_weights",
    "select_v",
    "fit_quality",
    "build_predictors",
    "synthesize",
    "fixed_weights",
    "SYNTHETIC_ID",
]

LOGGER = logging.getLogger(__name__)

SYNTHETIC_ID = "synthetic"
N_RANDOM_STARTS = 5
# Logit offset used to switch a block off in the cases-only / tests-only starts.
_BLOCK_OFF = 30.0


@dataclass(frozen=True, eq=False)
class PredictorVectors:
    """Pre-period predictors: first T0 rows cumulative cases, next T0 rows cumulative tests."""

    u1: np.ndarray
    U0: np.ndarray

    def __post_init__(self):
        u1 = np.asarray(self.u1, dtype=float)
        U0 = np.asarray(self.U0, dtype=float)
        if U0.ndim == 1:
            U0 = U0[:, None]
        if u1.ndim != 1 or U0.shape[0] != u1.size:
            raise ValidationError(f"predictor shapes disagree: u1 {u1.shape}, U0 {U0.shape}")
        if u1.size % 2:
            raise ValidationError("predictor vectors must stack two equal blocks (cases, tests)")
        if not (np.all(np.isfinite(u1)) and np.all(np.isfinite(U0))):
            raise ValidationError("predictor vectors contain non-finite entries")
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "U0", U0)

    @property
    def t0(self) -> int:
        return self.u1.size // 2

    def standardized(self) -> "PredictorVectors":
        """Divide each predictor row by its standard deviation across all regions."""
        stacked = np.column_stack([self.u1, self.U0])
        scale = stacked.std(axis=1)
        scale[~(scale > 0)] = 1.0
        return PredictorVectors(self.u1 / scale, self.U0 / scale[:, None])


@dataclass(eq=False)
class SynthResult:
    donor_ids: list[str]
    weights: np.ndarray
    v: np.ndarray
    mspe: float
    r_squared: float
    pearson: float
    treated_id: str | None = None
    intervention_date: np.datetime64 | None = None
    synthetic: RegionSeries | None = None
    degenerate: bool = False
    start_index: int = 0
    method: str = ""
    n_pre_outcomes: int = 0

    def weight_map(self) -> dict[str, float]:
        return {rid: float(w) for rid, w in zip(self.donor_ids, self.weights)}

    def top_donors(self, k: int = 3) -> list[tuple[str, float]]:
        order = sorted(range(len(self.donor_ids)), key=lambda i: (-self.weights[i], i))
        return [(self.donor_ids[i], float(self.weights[i])) for i in order[:k]]

    def to_dict(self) -> dict:
        out = {
            "treated_id": self.treated_id,
            "intervention_date": None if self.intervention_date is None else str(self.intervention_date),
            "weights": self.weight_map(),
            "v": [float(x) for x in self.v],
            "diagnostics": {
                "mspe": float(self.mspe),
                "r_squared": float(self.r_squared),
                "pearson": float(self.pearson),
                "n_pre_outcomes": int(self.n_pre_outcomes),
                "degenerate": bool(self.degenerate),
                "start_index": int(self.start_index),
                "method": self.method,
            },
            "synthetic_series": None,
        }
        if self.synthetic is not None:
            s = self.synthetic
            new_c = np.concatenate([[np.nan], np.diff(s.cumulative_cases)])
            new_t = np.concatenate([[np.nan], np.diff(s.cumulative_tests)])
            out["synthetic_series"] = [
                {
                    "date": str(d),
                    "cumulative_cases": float(s.cumulative_cases[k]),
                    "new_cases": None if k == 0 else float(new_c[k]),
                    "cumulative_tests": float(s.cumulative_tests[k]),
                    "new_tests": None if k == 0 else float(new_t[k]),
                }
                for k, d in enumerate(s.dates)
            ]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthResult":
        weights = data["weights"]
        donor_ids = list(weights)
        diag = data["diagnostics"]
        synthetic = None
        rows = data.get("synthetic_series")
        if rows:
            synthetic = RegionSeries(
                SYNTHETIC_ID,
                np.array([r["date"] for r in rows], dtype="datetime64[D]"),
                np.array([r["cumulative_cases"] for r in rows], dtype=float),
                np.array([r["cumulative_tests"] for r in rows], dtype=float),
            )
        date = data.get("intervention_date")
        return cls(
            donor_ids=donor_ids,
            weights=np.array([weights[k] for k in donor_ids], dtype=float),
            v=np.asarray(data["v"], dtype=float),
            mspe=diag["mspe"],
            r_squared=diag["r_squared"],
            pearson=diag["pearson"],
            treated_id=data.get("treated_id"),
            intervention_date=None if date is None else np.datetime64(date, "D"),
            synthetic=synthetic,
            degenerate=diag.get("degenerate", False),
            start_index=diag.get("start_index", 0),
            method=diag.get("method", ""),
            n_pre_outcomes=diag.get("n_pre_outcomes", 0),
        )


# --------------------------------------------------------------------------
# Inner QP
# --------------------------------------------------------------------------


def qp_objective(w, u1, U0, v) -> float:
    r = np.asarray(u1) - np.asarray(U0) @ np.asarray(w)
    return float(r @ (np.asarray(v) * r))


def _solve_eqp(Q, c, F):
    k = len(F)
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = Q[np.ix_(F, F)]
    K[:k, k] = K[k, :k] = 1.0
    rhs = np.concatenate([-c[F], [1.0]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:k]


def solve_simplex_qp(Q, c, max_iter: int | None = None) -> np.ndarray:
    """Minimize ``0.5 w'Qw + c'w`` over the probability simplex (Q symmetric PSD).

    Primal active-set method started from the best vertex. Each iteration either
    moves to the minimizer of the equality-constrained subproblem on the free set
    or stops at the first blocking bound; a bound is released when its multiplier
    is negative.
    """
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    if n == 0:
        raise NoDonorError("no donors to weight")
    if n == 1:
        return np.ones(1)
    max_iter = max_iter or 20 * n + 50
    scale = max(1.0, np.abs(Q).max(), np.abs(c).max())
    tol = 1e-13 * scale

    k0 = int(np.argmin(0.5 * np.diag(Q) + c))
    w = np.zeros(n)
    w[k0] = 1.0
    free = [k0]
    for _ in range(max_iter):
        F = sorted(free)
        target = _solve_eqp(Q, c, F)
        if np.all(target >= 0):
            w = np.zeros(n)
            w[F] = target
            g = Q @ w + c
            mu = g[F].mean()
            bound = [j for j in range(n) if j not in free]
            if not bound:
                break
            lam = g[bound] - mu
            j = int(np.argmin(lam))
            if lam[j] >= -tol:
                break
            free.append(bound[j])
        else:
            wF = w[F]
            d = target - wF
            neg = d < 0
            ratios = np.full(len(F), np.inf)
            ratios[neg] = wF[neg] / -d[neg]
            alpha = min(1.0, ratios.min())
            wF = wF + alpha * d
            drop = {F[i] for i in range(len(F)) if ratios[i] <= alpha or wF[i] <= 0}
            wF[[i for i in range(len(F)) if F[i] in drop]] = 0.0
            w = np.zeros(n)
            w[F] = wF
            free = [i for i in F if i not in drop]
            if not free:  # numerical corner; restart from the best vertex
                free = [int(np.argmax(w))] if w.any() else [k0]
    else:
        g = Q @ w + c
        raise ConvergenceError(
            "active-set QP did not converge",
            stage="synth-control",
            best_iterate=list(map(float, w)),
            gradient_norm=float(np.linalg.norm(g - g[w > 0].mean() if np.any(w > 0) else g)),
        )
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def _qp_terms(u1, U0, v):
    v = np.asarray(v, dtype=float)
    total = v.sum()
    if not (total > 0) or np.any(v < 0):
        raise ValidationError("V diagonal must be nonnegative with positive sum")
    v = v / total
    VU = U0 * v[:, None]
    return U0.T @ VU, -(VU.T @ u1), v


def solve_weights(u1, U0, v) -> np.ndarray:
    """Donor weights minimizing the V-weighted predictor discrepancy over the simplex.

    ``v`` is the diagonal of V. It is normalized internally, so ``c * v`` gives
    the same weights for any ``c > 0``.
    """
    u1 = np.asarray(u1, dtype=float)
    U0 = np.asarray(U0, dtype=float)
    if U0.ndim == 1:
        U0 = U0[:, None]
    if U0.shape[1] == 0:
        raise NoDonorError("donor pool is empty")
    if U0.shape[0] != u1.size or np.size(v) != u1.size:
        raise ValidationError("u1, U0 and v dimensions disagree")
    Q, c, _ = _qp_terms(u1, U0, v)
    return solve_simplex_qp(Q, c)


# --------------------------------------------------------------------------
# Outer V selection
# --------------------------------------------------------------------------


def _softmax(s):
    z = np.exp(s - s.max())
    return z / z.sum()


@dataclass
class _Candidate:
    mspe: float
    wnorm: float
    start: int
    method: str
    v: np.ndarray
    w: np.ndarray

    def key(self):
        return (self.mspe, self.wnorm, self.start)


@dataclass
class _VProblem:
    pred: PredictorVectors
    Y1: np.ndarray
    Y0: np.ndarray
    cache: dict = field(default_factory=dict)

    def weights(self, v):
        return solve_weights(self.pred.u1, self.pred.U0, v)

    def mspe(self, w) -> float:
        e = self.Y1 - self.Y0 @ w
        return float(e @ e) / self.Y1.size

    def loss(self, s) -> float:
        return self.mspe(self.weights(_softmax(np.asarray(s))))

    def loss_grad(self, s):
        """MSPE and its gradient with respect to the softmax logits."""
        s = np.asarray(s, dtype=float)
        v = _softmax(s)
        u1, U0 = self.pred.u1, self.pred.U0
        w = self.weights(v)
        e = self.Y1 - self.Y0 @ w
        T = self.Y1.size
        loss = float(e @ e) / T
        F = np.flatnonzero(w > 1e-12)
        k = F.size
        if k <= 1:
            return loss, np.zeros_like(s)
        rp = U0 @ w - u1
        K = np.zeros((k + 1, k + 1))
        UF = U0[:, F]
        K[:k, :k] = UF.T @ (UF * v[:, None])
        K[:k, k] = K[k, :k] = 1.0
        R = np.zeros((k + 1, v.size))
        R[:k] = -(UF * rp[:, None]).T
        try:
            dW = np.linalg.solve(K, R)[:k]
        except np.linalg.LinAlgError:
            dW = np.linalg.lstsq(K, R, rcond=None)[0][:k]
        dL_dw = -2.0 * (self.Y0[:, F].T @ e) / T
        g_v = dL_dw @ dW
        g_s = v * (g_v - v @ g_v)
        return loss, g_s


def _start_logits(m_half: int, rng: np.random.Generator) -> list[np.ndarray]:
    zeros = np.zeros(2 * m_half)
    cases = np.concatenate([np.zeros(m_half), np.full(m_half, -_BLOCK_OFF)])
    tests = np.concatenate([np.full(m_half, -_BLOCK_OFF), np.zeros(m_half)])
    starts = [zeros, cases, tests]
    for _ in range(N_RANDOM_STARTS):
        d = rng.dirichlet(np.ones(2 * m_half))
        starts.append(np.log(np.maximum(d, 1e-300)))
    return starts


def _run_start(problem: _VProblem, idx: int, s0: np.ndarray, maxfev: int, maxiter: int):
    out = []
    v0 = _softmax(s0)
    w0 = problem.weights(v0)
    out.append(_Candidate(problem.mspe(w0), float(w0 @ w0), idx, "start", v0, w0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        nm = optimize.minimize(
            problem.loss,
            s0,
            method="Nelder-Mead",
            options={"maxfev": maxfev, "xatol": 1e-6, "fatol": 1e-12, "adaptive": True},
        )
        bf = optimize.minimize(
            problem.loss_grad, s0, jac=True, method="BFGS", options={"maxiter": maxiter, "gtol": 1e-10}
        )
    for res, name in ((nm, "nelder-mead"), (bf, "bfgs")):
        v = _softmax(np.asarray(res.x))
        w = problem.weights(v)
        out.append(_Candidate(problem.mspe(w), float(w @ w), idx, name, v, w))
    return out


def select_v(
    pre_outcomes_treated,
    pre_outcomes_donors,
    predictors: PredictorVectors,
    *,
    seed: int = 0,
    standardize: bool = True,
    maxfev: int = 1500,
    maxiter: int = 200,
    jobs: int = 1,
) -> tuple[np.ndarray, SynthResult]:
    """Choose the diagonal of V by minimizing the pre-period outcome MSPE.

    Eight starts (uniform, cases-only, tests-only, five Dirichlet draws from a
    Philox stream seeded by ``seed``) are each refined by Nelder-Mead and BFGS.
    Among all start points and optimizer end points the winner is the smallest
    ``(mspe, ||w||^2, start index)``. If every candidate gives the same MSPE the
    uniform V is returned and ``degenerate`` is set.
    """
    Y1 = np.asarray(pre_outcomes_treated, dtype=float)
    Y0 = np.asarray(pre_outcomes_donors, dtype=float)
    if Y0.ndim == 1:
        Y0 = Y0[:, None]
    if Y1.size < 2:
        raise ValidationError("need at least two pre-period outcomes")
    if Y0.shape != (Y1.size, predictors.U0.shape[1]):
        raise ValidationError(f"outcome shapes disagree: Y1 {Y1.shape}, Y0 {Y0.shape}")
    if Y0.shape[1] == 0:
        raise NoDonorError("donor pool is empty")
    pred = predictors.standardized() if standardize else predictors
    problem = _VProblem(pred, Y1, Y0)
    rng = np.random.Generator(np.random.Philox(seed))
    starts = _start_logits(pred.t0, rng)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(lambda a: _run_start(problem, a[0], a[1], maxfev, maxiter), enumerate(starts)))
    else:
        chunks = [_run_start(problem, i, s, maxfev, maxiter) for i, s in enumerate(starts)]
    candidates = [c for chunk in chunks for c in chunk]
    best = min(candidates, key=_Candidate.key)

    mspes = np.array([c.mspe for c in candidates])
    degenerate = bool(np.ptp(mspes) <= 1e-12 * max(1.0, abs(mspes.max())))
    if degenerate:
        best = candidates[0]  # start 0, uniform V
    LOGGER.debug("selected V from start %d via %s, mspe=%.6g", best.start, best.method, best.mspe)

    fitted = Y0 @ best.w
    r2, pearson, mspe = fit_quality(Y1, fitted)
    result = SynthResult(
        donor_ids=[str(i) for i in range(Y0.shape[1])],
        weights=best.w,
        v=best.v,
        mspe=mspe,
        r_squared=r2,
        pearson=pearson,
        degenerate=degenerate,
        start_index=best.start,
        method=best.method,
        n_pre_outcomes=Y1.size,
    )
    return best.v, result


def fit_quality(y1, y0w) -> tuple[float, float, float]:
    """R-squared, Pearson correlation and mean squared error of ``y0w`` against ``y1``."""
    y1 = np.asarray(y1, dtype=float)
    y0w = np.asarray(y0w, dtype=float)
    if y1.shape != y0w.shape or y1.size < 2:
        raise ValidationError("fit_quality needs two equal-length vectors of length >= 2")
    sst = float(np.sum((y1 - y1.mean()) ** 2))
    if sst == 0:
        raise UndefinedStatisticError("treated series has zero variance; R-squared undefined")
    sse = float(np.sum((y1 - y0w) ** 2))
    a, b = y1 - y1.mean(), y0w - y0w.mean()
    denom = np.sqrt(float(a @ a) * float(b @ b))
    pearson = float(a @ b) / denom if denom > 0 else float("nan")
    return 1.0 - sse / sst, pearson, sse / y1.size


# --------------------------------------------------------------------------
# Panel-level helpers
# --------------------------------------------------------------------------


def build_predictors(panel: Panel, treated_id: str, donor_ids: Sequence[str]) -> PredictorVectors:
    t0 = panel.pre_period_len

    def stack(region):
        return np.concatenate([region.cumulative_cases[:t0], region.cumulative_tests[:t0]])

    u1 = stack(panel[treated_id])
    U0 = np.column_stack([stack(panel[d]) for d in donor_ids]) if donor_ids else np.zeros((2 * t0, 0))
    return PredictorVectors(u1, U0)


def weighted_series(panel: Panel, donor_ids: Sequence[str], weights) -> RegionSeries:
    weights = np.asarray(weights, dtype=float)
    cases = sum(w * panel[d].cumulative_cases for d, w in zip(donor_ids, weights))
    tests = sum(w * panel[d].cumulative_tests for d, w in zip(donor_ids, weights))
    return RegionSeries(SYNTHETIC_ID, panel.dates.copy(), cases, tests)


def synthesize(
    panel: Panel,
    treated_id: str | None = None,
    donor_ids: Sequence[str] | None = None,
    *,
    seed: int = 0,
    standardize: bool = True,
    jobs: int = 1,
    maxfev: int = 1500,
    maxiter: int = 200,
) -> SynthResult:
    """Build the synthetic control for ``treated_id`` from ``donor_ids`` (default: all others)."""
    treated_id = treated_id or panel.treated_id
    if treated_id is None:
        raise ValidationError("no treated region given")
    if panel.intervention_date is None:
        raise ValidationError("panel has no intervention date")
    donor_ids = list(donor_ids) if donor_ids is not None else [r for r in panel.region_ids if r != treated_id]
    if not donor_ids:
        raise NoDonorError("donor pool is empty")
    if treated_id in donor_ids:
        raise SynthError("treated region cannot be its own donor")
    t0 = panel.pre_period_len
    if t0 < 3:
        raise ValidationError("pre-period needs at least 3 days")
    derived = derive(panel.subset([treated_id, *donor_ids]))
    Y1 = derived[treated_id].new_cases[: t0 - 1]
    Y0 = np.column_stack([derived[d].new_cases[: t0 - 1] for d in donor_ids])
    pred = build_predictors(panel, treated_id, donor_ids)
    v, res = select_v(Y1, Y0, pred, seed=seed, standardize=standardize, jobs=jobs, maxfev=maxfev, maxiter=maxiter)
    res.donor_ids = list(donor_ids)
    res.treated_id = treated_id
    res.intervention_date = panel.intervention_date
    res.synthetic = weighted_series(panel, donor_ids, res.weights)
    return res


def fixed_weights(panel: Panel, weights: dict[str, float], treated_id: str | None = None) -> SynthResult:
    """A :class:`SynthResult` with user-supplied weights (e.g. a single control region)."""
    treated_id = treated_id or panel.treated_id
    donor_ids = list(weights)
    w = np.array([weights[d] for d in donor_ids], dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-10:
        raise ValidationError("weights must be nonnegative and sum to one")
    t0 = panel.pre_period_len
    derived = derive(panel.subset([treated_id, *donor_ids]))
    Y1 = derived[treated_id].new_cases[: t0 - 1]
    Y0 = np.column_stack([derived[d].new_cases[: t0 - 1] for d in donor_ids])
    try:
        r2, pearson, mspe = fit_quality(Y1, Y0 @ w)
    except UndefinedStatisticError:
        r2, pearson, mspe = float("nan"), float("nan"), float(np.mean((Y1 - Y0 @ w) ** 2))
    return SynthResult(
        donor_ids=donor_ids,
        weights=w,
        v=np.full(2 * t0, 1.0 / (2 * t0)),
        mspe=mspe,
        r_squared=r2,
        pearson=pearson,
        treated_id=treated_id,
        intervention_date=panel.intervention_date,
        synthetic=weighted_series(panel, donor_ids, w),
        method="fixed",
        n_pre_outcomes=Y1.size,
    )
