"""Artifact file names and their documented schemas.

``check_directory`` validates every artifact present in an output directory;
it is what the ``check`` subcommand runs.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .panel import PANEL_COLUMNS

PANEL = "panel.csv"
SYNTH = "synth.json"
SIMULATION = "simulation.json"
FITS = "fits"
TABLE_TXT = "table1.txt"
TABLE_JSON = "table1.json"
TABLE_CSV = "table1.csv"
PLACEBO_CSV = "placebo.csv"
PLACEBO_JSON = "placebo.json"
CF_CSV = "counterfactual.csv"
CF_JSON = "counterfactual.json"
SUMMARY = "summary.txt"
MANIFEST = "manifest.json"
ERROR = "error.json"
FAILED = "FAILED"

PLACEBO_COLUMNS = ("region_id", "delta", "se", "delta_rho_treated", "error")
CF_COLUMNS = ("day", "date", "observed", "fitted", "counterfactual", "cumulative_averted")
FITTED_COLUMNS = ("region", "date", "actual", "fitted", "cumulative_cases")


def _require(obj: dict, keys, where: str, problems: list[str]) -> bool:
    missing = [k for k in keys if k not in obj]
    if missing:
        problems.append(f"{where}: missing key(s) {missing}")
    return not missing


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v)


def _check_csv(path: Path, columns, problems: list[str], numeric=()) -> None:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            problems.append(f"{path.name}: header {header} != {list(columns)}")
            return
        for k, row in enumerate(reader, 2):
            if len(row) != len(columns):
                problems.append(f"{path.name}:{k}: expected {len(columns)} fields, got {len(row)}")
                return
            for name in numeric:
                cell = row[columns.index(name)]
                if cell == "":
                    continue
                try:
                    float(cell)
                except ValueError:
                    problems.append(f"{path.name}:{k}: {name}={cell!r} is not numeric")
                    return


def check_synth(d: dict, problems: list[str]) -> None:
    if not _require(d, ("treated_id", "intervention_date", "weights", "v", "diagnostics"), SYNTH, problems):
        return
    w = d["weights"]
    if not w or any(not _finite(x) or x < -1e-12 for x in w.values()):
        problems.append(f"{SYNTH}: weights must be nonnegative numbers")
    elif abs(sum(w.values()) - 1) > 1e-8:
        problems.append(f"{SYNTH}: weights sum to {sum(w.values())}, not 1")
    _require(d["diagnostics"], ("mspe", "r_squared", "pearson"), f"{SYNTH}.diagnostics", problems)


def check_fit(d: dict, where: str, problems: list[str]) -> None:
    if not _require(d, ("kind", "family", "names", "coefficients", "se", "vcov", "metrics", "fitted"), where, problems):
        return
    names = d["names"]
    if set(d["coefficients"]) != set(names):
        problems.append(f"{where}: coefficient keys do not match names")
    if len(d["vcov"]) != len(names) or any(len(r) != len(names) for r in d["vcov"]):
        problems.append(f"{where}: vcov is not {len(names)}x{len(names)}")
    _require(d["metrics"], ("aic", "bic", "adj_r2", "dev_explained", "n"), f"{where}.metrics", problems)
    if d["kind"] == "SPG" and d.get("smooth") is None:
        problems.append(f"{where}: SPG fit without a smooth block")


def check_table(d: dict, problems: list[str]) -> None:
    if not _require(d, ("columns", "models"), TABLE_JSON, problems):
        return
    if len(d["columns"]) != len(d["models"]):
        problems.append(f"{TABLE_JSON}: columns and models differ in length")
    for m in d["models"]:
        _require(m, ("coefficients", "growth_change", "metrics"), f"{TABLE_JSON}:{m.get('model')}", problems)


def check_placebo(d: dict, problems: list[str]) -> None:
    if _require(d, ("treated_id", "treated_delta", "empirical_ci95", "rank", "n_placebos"), PLACEBO_JSON, problems):
        lo, hi = d["empirical_ci95"]
        if not lo <= hi:
            problems.append(f"{PLACEBO_JSON}: interval endpoints out of order")
        if d["n_placebos"] < 2:
            problems.append(f"{PLACEBO_JSON}: fewer than two placebo fits")


def check_counterfactual(d: dict, problems: list[str]) -> None:
    if not _require(d, ("horizons",), CF_JSON, problems):
        return
    for h in d["horizons"]:
        _require(h, ("days", "date", "averted", "percent_reduction"), f"{CF_JSON}:{h.get('days')}", problems)


def check_manifest(d: dict, problems: list[str]) -> None:
    _require(d, ("config", "config_hash", "versions", "stages", "timings"), MANIFEST, problems)


def _load_json(path: Path, problems: list[str]):
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        problems.append(f"{path.name}: not valid JSON ({exc})")
        return None


def check_directory(out) -> tuple[list[str], list[str]]:
    """Return ``(checked_files, problems)`` for every known artifact under ``out``."""
    out = Path(out)
    problems: list[str] = []
    checked: list[str] = []
    csvs = {
        PANEL: (PANEL_COLUMNS, ("cumulative_cases", "new_cases", "cumulative_tests", "new_tests")),
        PLACEBO_CSV: (PLACEBO_COLUMNS, ("delta", "se", "delta_rho_treated")),
        CF_CSV: (CF_COLUMNS, ("day", "observed", "fitted", "counterfactual", "cumulative_averted")),
    }
    for name, (cols, numeric) in csvs.items():
        if (out / name).exists():
            checked.append(name)
            _check_csv(out / name, cols, problems, numeric)
    jsons = {
        SYNTH: check_synth,
        TABLE_JSON: check_table,
        PLACEBO_JSON: check_placebo,
        CF_JSON: check_counterfactual,
        MANIFEST: check_manifest,
    }
    for name, fn in jsons.items():
        if (out / name).exists():
            checked.append(name)
            d = _load_json(out / name, problems)
            if d is not None:
                fn(d, problems)
    fits = out / FITS
    if fits.is_dir():
        for p in sorted(fits.glob("*.json")):
            rel = f"{FITS}/{p.name}"
            checked.append(rel)
            d = _load_json(p, problems)
            if d is not None:
                check_fit(d, rel, problems)
        for p in sorted(fits.glob("*_fitted.csv")):
            checked.append(f"{FITS}/{p.name}")
            _check_csv(p, FITTED_COLUMNS, problems, ("actual", "fitted", "cumulative_cases"))
    return checked, problems
