"""Command-line pipeline: ingest -> synth -> fit -> placebo -> project -> report.

Every stage reads its inputs from, and writes its outputs to, the output
directory, so stages can be rerun one at a time. Exit codes: 0 ok,
2 validation, 3 data, 4 convergence, 5 internal.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import platform
import sys
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import artifacts as A
from .config import ModelChoice, RunConfig, load_config
from .errors import DataError, DependencyError, SynthGrowthError, ValidationError
from .evaluation import ModelSpec, placebo_study, project_counterfactual
from .gam import FitResult, GrowthCoefficients, build_frame, fit
from .growth import Family, ParametricGrowthSpec, Response, simulate_panel
from .inference import coefficient_table, growth_change
from .panel import Panel, Schema, derive, ingest_csv, write_panel_csv
from .plots import line_chart
from .synth import SynthResult, fixed_weights, synthesize

LOGGER = logging.getLogger("synthgrowth")

EXIT_OK, EXIT_INTERNAL = 0, 5


# --------------------------------------------------------------------------
# Run bookkeeping
# --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunLog:
    """Tracks stage timings and writes the manifest after every stage."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out)
        self.current = command
        self.stages: dict[str, str] = {}
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        self.current = name
        self.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            yield
        except BaseException:
            self.stages[name] = "failed"
            raise
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 3)
            if self.stages.get(name) != "failed":
                self.stages[name] = "ok"
            self.write_manifest()

    def write_manifest(self) -> None:
        path = self.out / A.MANIFEST
        old = {}
        if path.exists():
            with contextlib.suppress(ValueError, OSError):
                old = json.loads(path.read_text())
        stages = {**old.get("stages", {}), **self.stages}
        timings = {**old.get("timings", {}), **self.timings}
        hashes = {}
        for p in sorted(self.out.rglob("*")):
            rel = p.relative_to(self.out).as_posix()
            if p.is_file() and rel not in (A.MANIFEST, A.FAILED, A.ERROR):
                hashes[rel] = _sha256(p)
        manifest = {
            "tool": "synthgrowth",
            "command": self.command,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.digest(),
            "versions": {
                "synthgrowth": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "stages": stages,
            "artifacts": hashes,
            "timings": timings,
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def clear_failure(self) -> None:
        for name in (A.FAILED, A.ERROR):
            (self.out / name).unlink(missing_ok=True)


def _error_report(exc: BaseException, stage: str) -> dict:
    if isinstance(exc, SynthGrowthError):
        report = exc.to_dict()
        report["module"] = report.pop("stage")
    else:
        report = {
            "error": type(exc).__name__,
            "module": "internal",
            "message": str(exc),
            "exit_code": EXIT_INTERNAL,
            "details": {"traceback": traceback.format_exc(limit=8)},
        }
    report["stage"] = stage
    return report


# --------------------------------------------------------------------------
# Loading upstream artifacts
# --------------------------------------------------------------------------


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"stage '{stage}' needs {path}; run the upstream stage first", required=str(path))
    return path


def _read_json(path: Path, stage: str) -> dict:
    try:
        return json.loads(_need(path, stage).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}", path=str(path)) from None


def load_panel(out: Path, stage: str, treated=None, intervention=None) -> Panel:
    return ingest_csv(_need(out / A.PANEL, stage), Schema(), treated, intervention)


def load_design(out: Path, stage: str) -> tuple[Panel, SynthResult]:
    """Panel plus synthetic control; the treated id and intervention date come from synth.json."""
    synth = SynthResult.from_dict(_read_json(out / A.SYNTH, stage))
    panel = load_panel(out, stage, synth.treated_id, synth.intervention_date)
    return panel, synth


def load_fit(out: Path, choice: ModelChoice, stage: str) -> FitResult:
    return FitResult.from_dict(_read_json(out / A.FITS / f"{choice.key}.json", stage))


def _dump(obj_json: str, path: Path) -> None:
    path.write_text(obj_json.rstrip("\n") + "\n")


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_ingest(cfg: RunConfig) -> Panel:
    src = Path(cfg.input)
    if not src.exists():
        raise DataError(f"input file not found: {src}", path=str(src))
    panel = ingest_csv(src, cfg.schema).window(cfg.start, cfg.end)
    if cfg.treated not in panel.region_ids:
        raise DataError(f"treated region {cfg.treated!r} not found in {src}", regions=panel.region_ids)
    panel = panel.with_design(cfg.treated, cfg.intervention)
    write_panel_csv(panel, Path(cfg.out) / A.PANEL)
    LOGGER.info("panel: %d regions x %d days", len(panel.regions), len(panel))
    return panel


def stage_synth(cfg: RunConfig) -> SynthResult:
    out = Path(cfg.out)
    panel = load_panel(out, "synth", cfg.treated, cfg.intervention)
    res = synthesize(panel, seed=cfg.seed, jobs=cfg.jobs)
    _dump(res.to_json(), out / A.SYNTH)
    if cfg.svg:
        _synth_chart(panel, res, out / "synth.svg")
    LOGGER.info("synthetic control: %s", ", ".join(f"{d} {w:.3f}" for d, w in res.top_donors(3)))
    return res


def _synth_chart(panel: Panel, res: SynthResult, path: Path) -> None:
    treated = derive(panel.subset([res.treated_id]))[res.treated_id]
    line_chart(
        path,
        {res.treated_id: treated.new_cases, "synthetic control": np.diff(res.synthetic.cumulative_cases)},
        title="Daily new cases: treated vs synthetic control",
        x_labels=[str(d) for d in treated.dates],
        y_label="new cases",
        vline=int(np.sum(treated.dates < res.intervention_date)),
    )


def _fit_one(args):
    panel, synth, choice, q, bounds = args
    frame = build_frame(panel, synth, choice.with_controls)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fit(frame, choice.family, choice.smooth, q=q, lambda_bounds=bounds)
    return res


def stage_fit(cfg: RunConfig) -> dict[str, FitResult]:
    out = Path(cfg.out)
    panel, synth = load_design(out, "fit")
    choices = cfg.model_choices
    tasks = [(panel, synth, c, cfg.q, (cfg.lambda_min, cfg.lambda_max)) for c in choices]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(tasks))) as pool:
            results = list(pool.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]
    fits_dir = out / A.FITS
    fits_dir.mkdir(exist_ok=True)
    fits = {}
    for choice, res in zip(choices, results):
        frame = build_frame(panel, synth, choice.with_controls)
        _dump(res.to_json(), fits_dir / f"{choice.key}.json")
        res.write_fitted_csv(frame, fits_dir / f"{choice.key}_fitted.csv")
        if cfg.svg:
            treated = frame.reg_i == 1
            line_chart(
                fits_dir / f"{choice.key}.svg",
                {"observed": frame.y[treated], "fitted": res.fitted[treated]},
                title=f"{res.kind} {res.label}: treated region",
                x_labels=[str(d) for d in frame.dates[treated]],
                y_label="new cases",
                vline=int(np.sum(frame.int_t[treated] == 0)),
            )
        LOGGER.info("%s %s: delta=%.4f (SE %.4f) AIC=%.1f", res.kind, res.label,
                    res.coef("Int:Reg"), res.se("Int:Reg"), res.aic)
        fits[choice.key] = res
    return fits


def stage_placebo(cfg: RunConfig):
    out = Path(cfg.out)
    panel, synth = load_design(out, "placebo")
    h = cfg.headline_choice
    spec = ModelSpec(h.family, h.with_controls, h.smooth, cfg.q, (cfg.lambda_min, cfg.lambda_max))
    fit_path = out / A.FITS / f"{h.key}.json"
    treated_fit = load_fit(out, h, "placebo") if fit_path.exists() else None
    res = placebo_study(
        panel, spec, treated_id=synth.treated_id, treated_fit=treated_fit,
        treated_synth=synth if treated_fit is not None else None, seed=cfg.seed, jobs=cfg.jobs,
    )
    res.write_csv(out / A.PLACEBO_CSV)
    _dump(res.to_json(), out / A.PLACEBO_JSON)
    if cfg.svg:
        others = [r for r in res.gaps if r != res.treated_id]
        series = {r: res.gaps[r] for r in others}
        series[res.treated_id] = res.gaps[res.treated_id]
        line_chart(
            out / "placebo.svg",
            series,
            title="New cases: region minus its synthetic control",
            x_labels=res.gap_dates,
            y_label="difference",
            muted=others,
            vline=int(np.sum(np.array(res.gap_dates, dtype="datetime64[D]") < synth.intervention_date)),
        )
    lo, hi = res.empirical_ci95
    LOGGER.info("placebo interval (%.3f, %.3f); treated delta %.3f", lo, hi, res.treated_delta)
    return res


def stage_project(cfg: RunConfig):
    out = Path(cfg.out)
    panel, synth = load_design(out, "project")
    h = cfg.headline_choice
    res_fit = load_fit(out, h, "project")
    frame = build_frame(panel, synth, h.with_controls)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        proj = project_counterfactual(res_fit, frame, cfg.horizons)
    for w in caught:
        LOGGER.warning("%s", w.message)
    proj.write_csv(out / A.CF_CSV)
    _dump(proj.to_json(), out / A.CF_JSON)
    if cfg.svg:
        line_chart(
            out / "counterfactual.svg",
            {"observed": proj.observed_daily, "fitted": proj.actual_fitted_daily,
             "no intervention effect": proj.counterfactual_daily},
            title="Treated region after the intervention",
            x_labels=[str(d) for d in proj.dates],
            y_label="new cases",
        )
    for row in proj.horizons:
        LOGGER.info("%3d days: averted %.0f (%.1f%%)", row["days"], row["averted"], row["percent_reduction"])
    return proj


def _summary_text(cfg: RunConfig, out: Path, fits: list[FitResult]) -> str:
    lines = []
    if (out / A.SYNTH).exists():
        s = SynthResult.from_dict(json.loads((out / A.SYNTH).read_text()))
        lines.append(f"treated region: {s.treated_id}; intervention: {s.intervention_date}")
        lines.append("synthetic control: " + ", ".join(f"{d} {w:.3f}" for d, w in s.top_donors(3)))
        lines.append(f"pre-period fit: R2 {s.r_squared:.3f}, Pearson {s.pearson:.3f}, MSPE {s.mspe:.2f}")
    for f in fits:
        g = growth_change(f)
        lines.append(
            f"{f.kind} {f.label}: delta {f.coef('Int:Reg'):.3f} (SE {f.se('Int:Reg'):.3f}); "
            f"growth change treated {100 * g.delta_rho_treated:.2f}% (SE {100 * g.se_treated:.2f}, "
            f"single-covariance SE {100 * g.se_treated_literal:.2f}); control {100 * g.delta_rho_control:.2f}%"
        )
    if (out / A.PLACEBO_JSON).exists():
        p = json.loads((out / A.PLACEBO_JSON).read_text())
        lo, hi = p["empirical_ci95"]
        lines.append(
            f"placebo: treated delta {p['treated_delta']:.3f}, placebo 95% interval ({lo:.3f}, {hi:.3f}), "
            f"rank {p['rank']} of {p['n_placebos'] + 1}, outside: {p['treated_outside_interval']}"
        )
    if (out / A.CF_JSON).exists():
        c = json.loads((out / A.CF_JSON).read_text())
        for h in c["horizons"]:
            lines.append(f"averted after {h['days']} days: {h['averted']:.0f} ({h['percent_reduction']:.1f}%)")
    return "\n".join(lines) + "\n"


def stage_report(cfg: RunConfig):
    out = Path(cfg.out)
    fits_dir = out / A.FITS
    paths = [fits_dir / f"{c.key}.json" for c in cfg.model_choices]
    present = [p for p in paths if p.exists()]
    if not present:
        raise DependencyError(f"stage 'report' needs fitted models in {fits_dir}/*.json; run 'fit' first",
                              required=str(fits_dir))
    fits = [FitResult.from_dict(json.loads(p.read_text())) for p in present]
    table = coefficient_table(fits)
    (out / A.TABLE_TXT).write_text(table.to_text())
    _dump(table.to_json(), out / A.TABLE_JSON)
    table.write_csv(out / A.TABLE_CSV)
    (out / A.SUMMARY).write_text(_summary_text(cfg, out, fits))
    return table


def stage_simulate(cfg: RunConfig, args) -> None:
    out = Path(cfg.out)
    family = Family(args.family.upper())
    k = args.k if family is not Family.EG else None
    a = args.a if family is Family.GRG else None
    spec = ParametricGrowthSpec(family, rho=1.0, p=args.p, x0=args.x0, k=k, a=a)
    controls = ["control"] if args.controls == 1 else [f"control_{i + 1}" for i in range(args.controls)]
    specs = {"treated": spec, **{c: spec for c in controls}}
    truth = GrowthCoefficients(args.alpha, args.beta, args.gamma, args.delta, args.p)
    sim = simulate_panel(
        specs, truth, args.days, Response(args.theta), cfg.seed,
        treated_id="treated", intervention_day=args.intervention_day, start_date=args.start_date,
    )
    sim.to_csv(out / A.PANEL)
    weights = {c: 1.0 / len(controls) for c in controls}
    _dump(fixed_weights(sim.panel, weights, "treated").to_json(), out / A.SYNTH)
    meta = {
        "family": family.value,
        "truth": truth.to_dict(),
        "response": Response(args.theta).name,
        "theta": args.theta,
        "seed": cfg.seed,
        "days": args.days,
        "intervention_date": str(sim.panel.intervention_date),
        "x0": args.x0,
        "k": k,
        "a": a,
        "regions": sim.panel.region_ids,
    }
    (out / A.SIMULATION).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def stage_check(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    if not out.is_dir():
        raise DependencyError(f"output directory {out} does not exist", required=str(out))
    checked, problems = A.check_directory(out)
    for name in checked:
        print(f"checked {name}")
    if problems:
        raise DataError(f"{len(problems)} artifact problem(s): " + "; ".join(problems), problems=problems)
    print(f"{len(checked)} artifact(s) valid")


PIPELINE = ("ingest", "synth", "fit", "placebo", "project", "report")
STAGES = {
    "ingest": stage_ingest,
    "synth": stage_synth,
    "fit": stage_fit,
    "placebo": stage_placebo,
    "project": stage_project,
    "report": stage_report,
}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", metavar="PATH", help="flat key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f.name, metavar=f.name.upper(), default=None)
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="synthgrowth",
        description="Synthetic-control growth-rate analysis of an intervention on epidemic case counts.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "ingest": "read the input CSV and write the normalized panel.csv",
        "synth": "build the synthetic control (synth.json)",
        "fit": "fit every configured model (fits/*.json)",
        "placebo": "placebo study over donor regions (placebo.csv/.json)",
        "project": "counterfactual projection of averted cases (counterfactual.csv/.json)",
        "report": "coefficient table and summary (table1.txt/.json, summary.txt)",
        "run": "run the whole pipeline",
        "check": "validate every artifact in the output directory against its schema",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text, allow_abbrev=False)
    sim = sub.add_parser(
        "simulate", parents=[common], allow_abbrev=False,
        help="simulate a treated/control panel with a known intervention effect",
        description="Write panel.csv, synth.json (fixed equal control weights) and simulation.json.",
    )
    sim.add_argument("--family", choices=["eg", "glg", "grg"], default="eg")
    sim.add_argument("--alpha", type=float, default=1.0, help="log growth rate before the intervention")
    sim.add_argument("--beta", type=float, default=0.1, help="common post-period shift")
    sim.add_argument("--gamma", type=float, default=0.1, help="treated-region shift")
    sim.add_argument("--delta", type=float, default=-0.5, help="intervention effect on log growth")
    sim.add_argument("--p", type=float, default=0.5, help="deceleration exponent in [0, 1]")
    sim.add_argument("--days", type=int, default=120)
    sim.add_argument("--intervention-day", type=int, default=None)
    sim.add_argument("--start-date", default="2020-09-01")
    sim.add_argument("--theta", type=float, default=None, help="negative binomial size (default Poisson)")
    sim.add_argument("--x0", type=float, default=50.0)
    sim.add_argument("--k", type=float, default=1e5, help="saturation size (glg, grg)")
    sim.add_argument("--a", type=float, default=1.0, help="Richards shape (grg)")
    sim.add_argument("--controls", type=int, default=1, help="number of control regions")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_config(args.config, overrides).validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    log = None
    stage = "config"
    try:
        cfg = _config_from_args(args)
        log = RunLog(cfg, args.command)
        if args.command == "check":
            stage = "check"
            stage_check(cfg)
            return EXIT_OK
        if args.command == "simulate":
            stage = "simulate"
            with log.stage("simulate"):
                stage_simulate(cfg, args)
        else:
            names = [s for s in PIPELINE if s != "placebo" or cfg.placebo] if args.command == "run" else [args.command]
            for name in names:
                stage = name
                with log.stage(name):
                    STAGES[name](cfg)
        log.clear_failure()
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error report
        report = _error_report(exc, stage)
        if log is not None and args.command != "check" and log.out.is_dir():
            (log.out / A.ERROR).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            (log.out / A.FAILED).write_text(f"{stage}\n")
        print(json.dumps(report, sort_keys=True), file=sys.stderr)
        return int(report["exit_code"])


if __name__ == "__main__":
    sys.exit(main())
