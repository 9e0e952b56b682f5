"""Shared fixtures: simulated panels and frames, the simplex grid oracle, acceptance bookkeeping."""

from __future__ import annotations

import numpy as np

from synthgrowth.gam import GrowthCoefficients, build_frame
from synthgrowth.growth import Family, ParametricGrowthSpec, Response, simulate_panel
from synthgrowth.synth import fixed_weights


def sim_panel(seed=0, delta=-0.5, *, days=120, alpha=1.0, beta=0.1, gamma=0.1, p=0.5, x0=50.0,
              theta=None, n_controls=1, family=Family.EG, k=None, a=None):
    spec = ParametricGrowthSpec(family, rho=1.0, p=p, x0=x0, k=k, a=a)
    ids = ["control"] if n_controls == 1 else [f"control_{i + 1}" for i in range(n_controls)]
    specs = {"treated": spec, **{c: spec for c in ids}}
    truth = GrowthCoefficients(alpha, beta, gamma, delta, p)
    return simulate_panel(specs, truth, days, Response(theta), seed, treated_id="treated")


def sim_frame(seed=0, delta=-0.5, with_controls=False, **kw):
    sim = sim_panel(seed, delta, **kw)
    panel = sim.panel
    controls = [r for r in panel.region_ids if r != "treated"]
    synth = fixed_weights(panel, {c: 1.0 / len(controls) for c in controls}, "treated")
    return build_frame(panel, synth, with_controls), sim


def simplex_grid(step=0.001):
    m = int(round(1 / step))
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    a, b = i[keep] / m, j[keep] / m
    return np.column_stack([a, b, 1.0 - a - b])


GRID = simplex_grid()


def grid_oracle(u1, U0, v):
    """Exhaustive search over the 3-donor simplex at step 0.001."""
    R = u1[None, :] - GRID @ U0.T
    obj = (R**2 * (v / v.sum())[None, :]).sum(axis=1)
    k = int(np.argmin(obj))
    return GRID[k], float(obj[k])


def qp_instance(rng, t0):
    U0 = rng.uniform(0, 10, size=(2 * t0, 3))
    u1 = rng.uniform(0, 10, size=2 * t0)
    v = rng.dirichlet(np.ones(2 * t0))
    return u1, U0, v


# one line per acceptance criterion, printed at the end of the session by conftest
ACCEPTANCE: list[str] = []


def record(number: int, title: str, status: str, detail: str) -> None:
    line = f"criterion {number} [{status}] {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
