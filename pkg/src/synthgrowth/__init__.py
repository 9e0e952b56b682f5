"""Synthetic-control growth-rate analysis of non-pharmaceutical interventions.

Pipeline: :mod:`panel` (ingest and derive daily counts), :mod:`synth`
(synthetic control), :mod:`gam` (semi-parametric growth model with a
thin-plate smooth from :mod:`smooth`), :mod:`inference` (growth-rate changes),
:mod:`evaluation` (placebo study and counterfactual projection) and
:mod:`growth` (parametric growth families and simulation).
"""

__version__ = "0.1.0"

from .errors import SynthGrowthError
from .evaluation import placebo_study, project_counterfactual
from .gam import FitResult, GrowthCoefficients, ModelFrame, build_frame, fit
from .growth import Family, ParametricGrowthSpec, Response, simulate_panel
from .inference import coefficient_table, growth_change
from .panel import Panel, RegionSeries, Schema, derive, ingest_csv
from .smooth import SmoothBasis, build_basis
from .synth import SynthResult, solve_weights, synthesize

__all__ = [
    "SynthGrowthError",
    "placebo_study",
    "project_counterfactual",
    "FitResult",
    "GrowthCoefficients",
    "ModelFrame",
    "build_frame",
    "fit",
    "Family",
    "ParametricGrowthSpec",
    "Response",
    "simulate_panel",
    "coefficient_table",
    "growth_change",
    "Panel",
    "RegionSeries",
    "Schema",
    "derive",
    "ingest_csv",
    "SmoothBasis",
    "build_basis",
    "SynthResult",
    "solve_weights",
    "synthesize",
]
