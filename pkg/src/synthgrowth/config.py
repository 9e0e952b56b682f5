"""Run configuration: a flat ``key = value`` file whose keys can all be overridden by flags.

Recognized keys (defaults reproduce the South Tyrol study on the Civil
Protection regional file)::

    input           path to the long-format CSV
    date_column     region_column   cases_column   tests_column
    treated         treated region id
    intervention    first post-intervention date (YYYY-MM-DD)
    start, end      analysis window (inclusive)
    models          comma list of KIND:FAMILY[:ctrl], e.g. SPG:negbin:ctrl
    headline        model used for placebo and projection
    q               basis dimension of the smooth
    lambda_min, lambda_max   natural-log bounds of the smoothing-parameter search
    horizons        comma list of days for the counterfactual summary
    out             output directory
    seed, jobs      RNG seed and worker cap
    placebo, svg    true/false switches for the placebo stage and SVG charts

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .gam import FAMILIES, NEGBIN, POISSON
from .panel import Schema


@dataclass(frozen=True)
class ModelChoice:
    smooth: bool
    family: str
    with_controls: bool

    @classmethod
    def parse(cls, text: str) -> "ModelChoice":
        parts = [p.strip().lower() for p in text.split(":") if p.strip()]
        if len(parts) not in (2, 3) or parts[0] not in ("spg", "eg"):
            raise ValidationError(f"bad model spec {text!r}; expected KIND:FAMILY[:ctrl]")
        family = {"pois": POISSON, "poisson": POISSON, "nb": NEGBIN, "nbin": NEGBIN, "negbin": NEGBIN}.get(parts[1])
        if family is None:
            raise ValidationError(f"unknown family in {text!r}")
        if len(parts) == 3 and parts[2] != "ctrl":
            raise ValidationError(f"third field of {text!r} must be 'ctrl'")
        return cls(parts[0] == "spg", family, len(parts) == 3)

    @property
    def key(self) -> str:
        fam = "pois" if self.family == POISSON else "nbin"
        return f"{'SPG' if self.smooth else 'EG'}_{fam}{'_ctrl' if self.with_controls else ''}"

    def __str__(self) -> str:
        fam = "pois" if self.family == POISSON else "negbin"
        return f"{'SPG' if self.smooth else 'EG'}:{fam}{':ctrl' if self.with_controls else ''}"


ALL_MODELS = tuple(
    f"{k}:{f}{c}" for k in ("SPG", "EG") for f in ("pois", "negbin") for c in ("", ":ctrl")
)


@dataclass(frozen=True)
class RunConfig:
    input: str = "dpc-covid19-ita-regioni.csv"
    date_column: str = "data"
    region_column: str = "denominazione_regione"
    cases_column: str = "totale_casi"
    tests_column: str = "tamponi"
    treated: str = "P.A. Bolzano"
    intervention: str = "2020-11-21"
    start: str = "2020-09-01"
    end: str = "2020-12-31"
    models: tuple[str, ...] = ALL_MODELS
    headline: str = "SPG:negbin:ctrl"
    q: int = 10
    lambda_min: float = -8.0
    lambda_max: float = 8.0
    horizons: tuple[int, ...] = (7, 10, 20, 40)
    out: str = "out"
    seed: int = 0
    jobs: int = 1
    placebo: bool = True
    svg: bool = True

    @property
    def schema(self) -> Schema:
        return Schema(self.date_column, self.region_column, self.cases_column, self.tests_column)

    @property
    def model_choices(self) -> list[ModelChoice]:
        return [ModelChoice.parse(m) for m in self.models]

    @property
    def headline_choice(self) -> ModelChoice:
        return ModelChoice.parse(self.headline)

    def validate(self) -> "RunConfig":
        try:
            start, inter, end = (np.datetime64(d, "D") for d in (self.start, self.intervention, self.end))
        except ValueError as exc:
            raise ValidationError(f"bad date in config: {exc}") from None
        if not start < inter < end:
            raise ValidationError(f"dates must satisfy start < intervention < end ({start}, {inter}, {end})")
        span = int((end - inter).astype(int)) + 1
        if any(h <= 0 or h > span for h in self.horizons):
            raise ValidationError(f"horizons must lie in 1..{span}")
        if self.q < 3:
            raise ValidationError("q must be at least 3")
        if not self.lambda_min < self.lambda_max:
            raise ValidationError("lambda_min must be below lambda_max")
        if self.jobs < 1:
            raise ValidationError("jobs must be positive")
        self.model_choices
        self.headline_choice
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = list(self.models)
        d["horizons"] = list(self.horizons)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _coerce(name: str, raw):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    if not isinstance(raw, str):
        return tuple(raw) if ftype.startswith("tuple") else raw
    text = raw.strip()
    try:
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "bool":
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return low in ("true", "yes", "1")
        if ftype == "tuple[int, ...]":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if ftype == "tuple[str, ...]":
            return tuple(t.strip() for t in text.split(",") if t.strip())
    except ValueError:
        raise ValidationError(f"bad value for {name}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then ``overrides`` (flags win)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v)
    return replace(RunConfig(), **values)


def write_config(cfg: RunConfig, path) -> None:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
