import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthgrowth.errors import BasisRankError
from synthgrowth.smooth import SmoothBasis, build_basis


def _null_dim(S):
    vals = np.linalg.eigvalsh(S)
    return int(np.sum(vals < 1e-9 * vals.max()))


def test_default_dimension_is_nine():
    x = np.cumsum(np.random.default_rng(0).uniform(1, 50, 200))
    b = build_basis(x)
    assert b.dim == 9 and b.S.shape == (9, 9) and b.B.shape == (200, 9)


@given(st.integers(3, 12), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_penalty_psd_and_centred_columns(q, seed):
    x = np.cumsum(np.random.default_rng(seed).uniform(0.5, 30, 60))
    b = build_basis(x, q)
    for S in (b.S, b.S_unshrunk):
        assert np.allclose(S, S.T, atol=0)
        assert np.linalg.eigvalsh(S).min() >= -1e-10 * np.linalg.norm(S)
    assert np.allclose(b.B.mean(axis=0), 0.0, atol=1e-10 * np.abs(b.B).max())
    assert np.allclose(b.design(x), b.B)


def test_null_space_structure():
    x = np.linspace(1, 500, 80)
    b = build_basis(x, 10)
    # before centring the unpenalized space is {constant, linear}; centring removes the constant,
    # the remaining linear direction is given a small penalty
    S_full = np.zeros((10, 10))
    S_full[:8, :8] = b.Z.T @ (np.abs(b._ks[:, None] - b._ks[None, :]) ** 3 / 12) @ b.Z
    assert _null_dim(S_full) == 2
    assert _null_dim(b.S_unshrunk) == 1
    assert _null_dim(b.S) == 0


def test_quadrature_oracle_four_knots():
    x = np.array([2.0, 7.0, 11.0, 30.0])
    b = build_basis(x, 4)
    rng = np.random.default_rng(4)
    t = np.linspace(0, 1, 200_001)
    grid = b.shift + b.scale * t
    for _ in range(5):
        eta = rng.normal(size=b.dim)
        h = b.evaluate(eta, grid)
        dt = t[1] - t[0]
        h2 = (h[2:] - 2 * h[1:-1] + h[:-2]) / dt**2
        integral = np.sum(h2**2) * dt
        assert b.roughness(eta) == pytest.approx(integral, rel=0.01)


def test_interpolates_at_knots():
    x = np.sort(np.random.default_rng(2).uniform(1, 100, 50))
    b = build_basis(x, 8)
    A = b.raw_design(b.knots)
    f = np.sin(b.knots / 15.0) + 0.01 * b.knots
    coef = np.linalg.solve(A, f)
    assert np.max(np.abs(A @ coef - f)) < 1e-8


def test_linear_beyond_knots():
    x = np.linspace(10, 100, 40)
    b = build_basis(x, 6)
    eta = np.random.default_rng(1).normal(size=b.dim)
    right = b.evaluate(eta, [100, 150, 200, 250])
    left = b.evaluate(eta, [10, 5, 0])
    assert np.allclose(np.diff(right, 2), 0, atol=1e-10)
    assert np.allclose(np.diff(left, 2), 0, atol=1e-10)
    # continuous first derivative across the boundary knot
    eps = 1e-4
    inside = (b.evaluate(eta, 100.0)[0] - b.evaluate(eta, 100.0 - eps)[0]) / eps
    outside = (b.evaluate(eta, 100.0 + eps)[0] - b.evaluate(eta, 100.0)[0]) / eps
    assert inside == pytest.approx(outside, rel=1e-3, abs=1e-6)
    assert b.out_of_support([5, 50, 150]).tolist() == [True, False, True]


def test_knots_at_quantiles():
    x = np.arange(1.0, 101.0)
    b = build_basis(x, 5)
    assert np.allclose(b.knots, [1, 25.75, 50.5, 75.25, 100])


def test_rank_errors():
    with pytest.raises(BasisRankError):
        build_basis([1, 2, 3, 3, 3], 4)
    with pytest.raises(BasisRankError):
        build_basis(np.arange(10.0), 2)


def test_serialization_round_trip():
    x = np.linspace(1, 40, 30)
    b = build_basis(x, 7)
    back = SmoothBasis.from_dict(b.to_dict())
    grid = np.linspace(-5, 60, 17)
    assert np.array_equal(back.design(grid), b.design(grid))
    assert np.array_equal(back.S, b.S)
