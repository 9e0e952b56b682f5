"""Multi-region epidemic panels: CSV ingestion, cleaning, alignment, differencing."""

from __future__ import annotations

import csv
import datetime as dt
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    ConflictError,
    DataError,
    InsufficientDataError,
    RowError,
    SchemaError,
    ValidationError,
)

__all__ = [
    "Schema",
    "RegionSeries",
    "Panel",
    "DerivedSeries",
    "monotonize",
    "ingest_csv",
    "derive",
    "write_panel_csv",
    "PANEL_COLUMNS",
]

PANEL_COLUMNS = (
    "region_id",
    "date",
    "cumulative_cases",
    "new_cases",
    "cumulative_tests",
    "new_tests",
)


@dataclass(frozen=True)
class Schema:
    """Maps the logical columns onto header names of the input CSV."""

    date: str = "date"
    region: str = "region_id"
    cases: str = "cumulative_cases"
    tests: str = "cumulative_tests"

    @classmethod
    def dpc(cls) -> "Schema":
        """Column names of the Civil Protection regional file (dpc-covid19-ita-regioni.csv)."""
        return cls(date="data", region="denominazione_regione", cases="totale_casi", tests="tamponi")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "Schema":
        unknown = set(mapping) - {"date", "region", "cases", "tests"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**mapping)


def monotonize(cumulative) -> np.ndarray:
    """Clamp each value to the running maximum so the series never decreases."""
    arr = np.asarray(cumulative, dtype=float)
    if arr.size == 0:
        return arr.copy()
    return np.maximum.accumulate(arr)


def _as_dates(dates) -> np.ndarray:
    return np.asarray(dates, dtype="datetime64[D]")


@dataclass(frozen=True, eq=False)
class RegionSeries:
    region_id: str
    dates: np.ndarray
    cumulative_cases: np.ndarray
    cumulative_tests: np.ndarray

    def __post_init__(self):
        dates = _as_dates(self.dates)
        cases = np.asarray(self.cumulative_cases, dtype=float)
        tests = np.asarray(self.cumulative_tests, dtype=float)
        if not (dates.shape == cases.shape == tests.shape) or dates.ndim != 1:
            raise ValidationError(
                f"region {self.region_id!r}: dates, cases and tests must be 1-D and equally long"
            )
        if dates.size > 1 and np.any(np.diff(dates).astype(int) != 1):
            raise ValidationError(f"region {self.region_id!r}: dates must be consecutive days")
        if not (np.all(np.isfinite(cases)) and np.all(np.isfinite(tests))):
            raise ValidationError(f"region {self.region_id!r}: non-finite values")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "cumulative_cases", cases)
        object.__setattr__(self, "cumulative_tests", tests)

    def __len__(self) -> int:
        return int(self.dates.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionSeries):
            return NotImplemented
        return (
            self.region_id == other.region_id
            and np.array_equal(self.dates, other.dates)
            and np.array_equal(self.cumulative_cases, other.cumulative_cases)
            and np.array_equal(self.cumulative_tests, other.cumulative_tests)
        )

    def cleaned(self) -> "RegionSeries":
        return replace(
            self,
            cumulative_cases=monotonize(self.cumulative_cases),
            cumulative_tests=monotonize(self.cumulative_tests),
        )

    def window(self, start, end) -> "RegionSeries":
        """Restrict to ``start <= date <= end`` (inclusive)."""
        start, end = np.datetime64(start, "D"), np.datetime64(end, "D")
        keep = (self.dates >= start) & (self.dates <= end)
        return replace(
            self,
            dates=self.dates[keep],
            cumulative_cases=self.cumulative_cases[keep],
            cumulative_tests=self.cumulative_tests[keep],
        )


@dataclass(frozen=True, eq=False)
class DerivedSeries:
    """Daily increments; ``dates[k]`` is the day whose increment is ``new_cases[k]``."""

    region_id: str
    dates: np.ndarray
    new_cases: np.ndarray
    new_tests: np.ndarray
    day_of_week: np.ndarray  # Monday = 0

    def __len__(self) -> int:
        return int(self.dates.size)


def day_of_week(dates) -> np.ndarray:
    # 1970-01-01 was a Thursday (weekday 3).
    return ((_as_dates(dates).astype(np.int64) + 3) % 7).astype(int)


@dataclass(frozen=True, eq=False)
class Panel:
    regions: tuple[RegionSeries, ...]
    treated_id: str | None = None
    intervention_date: np.datetime64 | None = None
    _index: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        regions = tuple(self.regions)
        if not regions:
            raise ValidationError("panel has no regions")
        ids = [r.region_id for r in regions]
        if len(set(ids)) != len(ids):
            raise ConflictError("duplicate region ids in panel")
        ref = regions[0].dates
        for r in regions[1:]:
            if not np.array_equal(r.dates, ref):
                raise ValidationError(f"region {r.region_id!r} does not cover the common date range")
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "_index", {rid: k for k, rid in enumerate(ids)})
        if self.intervention_date is not None:
            d = np.datetime64(self.intervention_date, "D")
            object.__setattr__(self, "intervention_date", d)
            if not (ref[0] < d <= ref[-1]):
                raise ValidationError(
                    f"intervention date {d} is not strictly inside {ref[0]}..{ref[-1]}"
                )
        if self.treated_id is not None and self.treated_id not in self._index:
            raise ValidationError(f"treated region {self.treated_id!r} not in panel")

    @property
    def dates(self) -> np.ndarray:
        return self.regions[0].dates

    @property
    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    @property
    def donor_ids(self) -> list[str]:
        return [rid for rid in self.region_ids if rid != self.treated_id]

    @property
    def pre_period_len(self) -> int:
        if self.intervention_date is None:
            raise ValidationError("panel has no intervention date")
        return int(np.sum(self.dates < self.intervention_date))

    def __getitem__(self, region_id: str) -> RegionSeries:
        try:
            return self.regions[self._index[region_id]]
        except KeyError:
            raise KeyError(f"unknown region {region_id!r}") from None

    def __len__(self) -> int:
        return int(self.dates.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Panel):
            return NotImplemented
        return (
            self.regions == other.regions
            and self.treated_id == other.treated_id
            and self.intervention_date == other.intervention_date
        )

    def with_design(self, treated_id: str, intervention_date) -> "Panel":
        return Panel(self.regions, treated_id=treated_id, intervention_date=intervention_date)

    def window(self, start=None, end=None) -> "Panel":
        start = self.dates[0] if start is None else start
        end = self.dates[-1] if end is None else end
        regions = tuple(r.window(start, end) for r in self.regions)
        if len(regions[0]) == 0:
            raise ValidationError(f"window {start}..{end} selects no dates")
        return Panel(regions, self.treated_id, self.intervention_date)

    def subset(self, region_ids: Iterable[str], treated_id: str | None = None) -> "Panel":
        return Panel(
            tuple(self[rid] for rid in region_ids),
            treated_id=treated_id,
            intervention_date=self.intervention_date,
        )


def _parse_date(text: str, line: int) -> np.datetime64:
    try:
        return np.datetime64(dt.date.fromisoformat(text.strip()[:10]), "D")
    except ValueError:
        raise RowError(f"cannot parse date {text!r}", line) from None


def _parse_count(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise RowError(f"cannot parse {column} value {text!r}", line) from None
    if not np.isfinite(value) or value < 0:
        raise RowError(f"{column} must be a nonnegative number, got {text!r}", line)
    return value


def _fill_gaps(dates: np.ndarray, cases: np.ndarray, tests: np.ndarray):
    """Reindex onto consecutive days, carrying the last cumulative value forward."""
    full = np.arange(dates[0], dates[-1] + np.timedelta64(1, "D"), dtype="datetime64[D]")
    pos = np.searchsorted(dates, full, side="right") - 1
    return full, cases[pos], tests[pos]


def ingest_csv(
    path,
    schema: Schema | None = None,
    treated_id: str | None = None,
    intervention_date=None,
) -> Panel:
    """Read a long-format CSV into an aligned, cleaned :class:`Panel`.

    Each region is sorted by date, internal gaps are filled by carrying the last
    cumulative value forward, cumulative series are monotonized, and all regions
    are cut to the intersection of their date ranges. Regions keep their first-
    appearance order in the file.
    """
    schema = schema or Schema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}", path=str(path))
    raw: dict[str, dict[np.datetime64, tuple[float, float]]] = defaultdict(dict)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in (schema.date, schema.region, schema.cases, schema.tests) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}", columns=list(header))
        for row in reader:
            line = reader.line_num
            region = (row[schema.region] or "").strip()
            if not region:
                raise RowError("empty region id", line)
            date = _parse_date(row[schema.date] or "", line)
            cases = _parse_count(row[schema.cases], schema.cases, line)
            tests = _parse_count(row[schema.tests], schema.tests, line)
            if date in raw[region]:
                raise ConflictError(
                    f"line {line}: duplicate entry for region {region!r} on {date}",
                    line=line,
                    region=region,
                )
            raw[region][date] = (cases, tests)
    if not raw:
        raise InsufficientDataError(f"{path}: no data rows")

    series = []
    for region, by_date in raw.items():
        dates = np.array(sorted(by_date), dtype="datetime64[D]")
        vals = np.array([by_date[d] for d in dates], dtype=float)
        dates, cases, tests = _fill_gaps(dates, vals[:, 0], vals[:, 1])
        series.append(RegionSeries(region, dates, monotonize(cases), monotonize(tests)))

    start = max(s.dates[0] for s in series)
    end = min(s.dates[-1] for s in series)
    if start > end:
        raise InsufficientDataError("regions share no common dates")
    aligned = tuple(s.window(start, end) for s in series)
    return Panel(aligned, treated_id=treated_id, intervention_date=intervention_date)


def derive(panel: Panel) -> dict[str, DerivedSeries]:
    """First differences of the cleaned cumulative series, keyed by region id."""
    out = {}
    for region in panel.regions:
        if len(region) < 2:
            raise InsufficientDataError(
                f"region {region.region_id!r} has {len(region)} point(s); need at least 2"
            )
        cases = monotonize(region.cumulative_cases)
        tests = monotonize(region.cumulative_tests)
        dates = region.dates[1:]
        out[region.region_id] = DerivedSeries(
            region_id=region.region_id,
            dates=dates,
            new_cases=np.diff(cases),
            new_tests=np.diff(tests),
            day_of_week=day_of_week(dates),
        )
    return out


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def write_panel_csv(panel: Panel, path) -> None:
    """Write the normalized panel (one row per region and date, region-major)."""
    derived = derive(panel) if len(panel) >= 2 else {}
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PANEL_COLUMNS)
        for region in panel.regions:
            d = derived.get(region.region_id)
            for k, date in enumerate(region.dates):
                new_c = "" if (k == 0 or d is None) else _fmt(d.new_cases[k - 1])
                new_t = "" if (k == 0 or d is None) else _fmt(d.new_tests[k - 1])
                writer.writerow(
                    [
                        region.region_id,
                        str(date),
                        _fmt(region.cumulative_cases[k]),
                        new_c,
                        _fmt(region.cumulative_tests[k]),
                        new_t,
                    ]
                )
