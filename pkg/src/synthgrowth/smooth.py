"""One-dimensional thin-plate spline basis with a second-derivative penalty.

In one dimension the thin-plate radial function for a second-derivative
penalty is ``|r|**3 / 12``. With ``q`` knots ``k_1..k_q`` the smooth is

    h(x) = sum_j d_j |x - k_j|**3 / 12 + a0 + a1 x,     sum_j d_j = sum_j d_j k_j = 0,

and ``integral h''(x)**2 dx = d' E d`` with ``E_ij = |k_i - k_j|**3 / 12``.
The two side conditions make ``h`` exactly linear outside the knot range.

The ``q`` free coefficients are reduced to ``q - 1`` by absorbing a sum-to-zero
constraint over the data (the model carries its own intercept). That leaves a
one-dimensional unpenalized direction (the centred linear term); it is given a
small penalty (a fraction of the smallest positive eigenvalue), so that a very
large smoothing parameter shrinks the whole term to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BasisRankError

__all__ = ["SmoothBasis", "build_basis", "DEFAULT_Q", "NULL_SHRINK"]

DEFAULT_Q = 10
NULL_SHRINK = 0.1


def _kernel(r):
    return np.abs(r) ** 3 / 12.0


@dataclass(frozen=True, eq=False)
class SmoothBasis:
    q: int
    knots: np.ndarray  # on the raw x scale
    shift: float
    scale: float
    Z: np.ndarray  # q x (q-2), null space of [1, k]' in the radial block
    constraint: np.ndarray  # q x (q-1), absorbs the sum-to-zero condition
    S: np.ndarray  # (q-1) x (q-1) penalty used for fitting (null space shrunk)
    S_unshrunk: np.ndarray  # pure roughness penalty on the scaled axis
    B: np.ndarray | None = None  # design at the construction data

    @property
    def dim(self) -> int:
        return self.q - 1

    def scaled(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    @property
    def _ks(self) -> np.ndarray:
        return self.scaled(self.knots)

    def raw_design(self, x) -> np.ndarray:
        """Unconstrained ``n x q`` basis (radial block, constant, linear)."""
        xs = self.scaled(np.atleast_1d(x))
        radial = _kernel(xs[:, None] - self._ks[None, :]) @ self.Z
        return np.column_stack([radial, np.ones_like(xs), xs])

    def _raw_slope(self, x) -> np.ndarray:
        xs = self.scaled(np.atleast_1d(x))
        r = xs[:, None] - self._ks[None, :]
        radial = (np.abs(r) * r / 4.0) @ self.Z
        return np.column_stack([radial, np.zeros_like(xs), np.ones_like(xs)])

    def design(self, x) -> np.ndarray:
        """Constrained ``n x (q-1)`` design; linear continuation beyond the knot range."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.knots[0], self.knots[-1]
        inside = np.clip(x, lo, hi)
        X = self.raw_design(inside)
        outside = x != inside
        if np.any(outside):
            slope = self._raw_slope(inside[outside])
            X[outside] += slope * (self.scaled(x[outside]) - self.scaled(inside[outside]))[:, None]
        return X @ self.constraint

    def out_of_support(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x < self.knots[0]) | (x > self.knots[-1])

    def evaluate(self, eta, x) -> np.ndarray:
        return self.design(x) @ np.asarray(eta, dtype=float)

    def roughness(self, eta) -> float:
        """Integrated squared second derivative of ``h`` on the scaled axis."""
        eta = np.asarray(eta, dtype=float)
        return float(eta @ self.S_unshrunk @ eta)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "knots": self.knots.tolist(),
            "shift": self.shift,
            "scale": self.scale,
            "Z": self.Z.tolist(),
            "constraint": self.constraint.tolist(),
            "S": self.S.tolist(),
            "S_unshrunk": self.S_unshrunk.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SmoothBasis":
        return cls(
            q=int(data["q"]),
            knots=np.asarray(data["knots"], dtype=float),
            shift=float(data["shift"]),
            scale=float(data["scale"]),
            Z=np.asarray(data["Z"], dtype=float),
            constraint=np.asarray(data["constraint"], dtype=float),
            S=np.asarray(data["S"], dtype=float),
            S_unshrunk=np.asarray(data["S_unshrunk"], dtype=float),
        )


def _shrink_null_space(S: np.ndarray, shrink: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    tol = vals.max() * np.finfo(float).eps ** 0.66
    null = vals < tol
    if np.any(null) and np.any(~null):
        vals = vals.copy()
        vals[null] = shrink * vals[~null].min()
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def build_basis(x, q: int = DEFAULT_Q, shrink: float = NULL_SHRINK) -> SmoothBasis:
    """Thin-plate basis for ``h(x)`` with ``q`` knots at quantiles of the distinct ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    if q < 3:
        raise BasisRankError(f"basis dimension must be at least 3, got {q}")
    distinct = np.unique(x)
    if distinct.size < q:
        raise BasisRankError(f"q={q} exceeds the number of distinct x values ({distinct.size})")
    knots = np.quantile(distinct, np.linspace(0.0, 1.0, q))
    if np.unique(knots).size < q:
        raise BasisRankError("knot placement produced duplicate knots")
    shift = float(knots[0])
    scale = float(knots[-1] - knots[0])
    ks = (knots - shift) / scale

    T = np.column_stack([np.ones(q), ks])
    Qt, _ = np.linalg.qr(T, mode="complete")
    Z = Qt[:, 2:]
    E = _kernel(ks[:, None] - ks[None, :])
    S_full = np.zeros((q, q))
    S_full[: q - 2, : q - 2] = Z.T @ E @ Z

    partial = SmoothBasis(q, knots, shift, scale, Z, np.eye(q), S_full, S_full)
    X_raw = partial.raw_design(x)
    c = X_raw.sum(axis=0)
    Qc, _ = np.linalg.qr(c[:, None], mode="complete")
    constraint = Qc[:, 1:]
    S_abs = constraint.T @ S_full @ constraint
    S_abs = 0.5 * (S_abs + S_abs.T)
    S = _shrink_null_space(S_abs, shrink)
    return SmoothBasis(
        q=q,
        knots=knots,
        shift=shift,
        scale=scale,
        Z=Z,
        constraint=constraint,
        S=S,
        S_unshrunk=S_abs,
        B=X_raw @ constraint,
    )
