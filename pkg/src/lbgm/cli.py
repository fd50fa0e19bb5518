"""Command-line entry point: ``lbgm {fit,report,simulate,generate,design}``.

Exit codes: 0 success, 1 input error, 2 estimation failure, 3 simulation cap
reached.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import DataError, load_long_csv, write_long_csv
from .derived import derived_report
from .estimator import EstimationError, FitOptions, FitStatus, fit, write_parameter_table
from .model import ModelSpec, build_loading_matrix
from . import simstudy
from .simstudy import (
    SimulationDesign,
    generate_dataset,
    replication_rng,
    run_study,
    benchmark_design,
    write_replications,
)

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_CAP = 0, 1, 2, 3
DEFAULT_SEED = 20221
log = logging.getLogger("lbgm")

PARAMETER_TABLE = "parameter_table.csv"
DERIVED_REPORT = "derived_report.csv"
TRAJECTORY = "trajectory.csv"
FIT_SUMMARY = "fit_summary.json"


def _parse_drop_values(raw: str | None) -> list[float]:
    if not raw:
        return []
    return [float(v) for v in raw.split(",") if v.strip()]


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_trajectory(fit_result, sample, path: Path) -> None:
    """Model-implied mean curve on the reference grid plus every observed point."""
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("kind", "outcome", "id", "wave", "time", "value"))
        for o, p in zip(fit_result.spec.outcomes, fit_result.estimates.outcomes):
            ref = fit_result.reference_times[o.label]
            waves = [j + 1 for j in range(o.J) if np.isfinite(ref[j])]
            times = [ref[j - 1] for j in waves]
            lam = build_loading_matrix(times, p.gamma, waves)
            for wave, t, v in zip(waves, times, lam @ np.array([p.mu_eta0, p.mu_eta1])):
                w.writerow(("implied", o.label, "", wave, repr(float(t)), repr(float(v))))
        for ind in sample.individuals:
            for lab in fit_result.spec.labels:
                s = ind.series_for(lab)
                for wave, t, v in zip(s.waves, s.times, s.values):
                    w.writerow(("observed", lab, ind.id, wave, repr(float(t)), repr(float(v))))


def default_spec(sample, fixed: int | str = "first") -> ModelSpec:
    """All outcomes; ``first``/``last`` mean the first/last interval the data span."""
    spec = ModelSpec.for_sample(sample)
    if fixed == "first":
        return spec.with_fixed_intervals(*(min(sample.observed_waves(lab)) for lab in spec.labels))
    if fixed == "last":
        return spec.with_fixed_intervals(*(max(sample.observed_waves(lab)) - 1 for lab in spec.labels))
    return spec.with_fixed_intervals(fixed)


def cmd_fit(args) -> int:
    try:
        sample = load_long_csv(args.data, drop_values=_parse_drop_values(args.drop_values))
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in exc.violations[:20]:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INPUT
    if args.spec:
        try:
            spec = ModelSpec.load(args.spec)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot read model spec {args.spec}: {exc}", file=sys.stderr)
            return EXIT_INPUT
    else:
        spec = default_spec(sample, args.fixed)
    missing = [lab for lab in spec.labels if lab not in sample.outcome_labels]
    if missing:
        print(f"error: outcome(s) {', '.join(map(repr, missing))} not found in {args.data}", file=sys.stderr)
        return EXIT_INPUT

    options = FitOptions(max_retries=args.retries, rng_seed=args.seed)
    try:
        result = fit(sample.subset(spec.labels), spec, options)
    except (EstimationError, ValueError) as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION

    out = _out_dir(args.out)
    write_parameter_table(result, out / PARAMETER_TABLE)
    derived_report(result).write_csv(out / DERIVED_REPORT)
    write_trajectory(result, sample, out / TRAJECTORY)
    summary = {
        "status": result.status.value,
        "deviance": result.deviance,
        "iterations": result.iterations,
        "retries": result.retries,
        "n": result.n_used,
        "dropped_rows": sample.dropped_rows,
        "se_available": result.vcov_available,
        "spec": spec.to_dict(),
    }
    (out / FIT_SUMMARY).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"status={result.status.value} deviance={result.deviance:.6f} n={result.n_used} -> {out}")
    if result.status is FitStatus.RETRIES_EXHAUSTED:
        return EXIT_ESTIMATION
    return EXIT_OK


def _fmt_cell(est: str, se: str, p: str) -> tuple[str, str]:
    if est == "":
        return "---", "---"
    text = f"{float(est):.3f}"
    text += f" ({float(se):.3f})" if se else " (unavailable)"
    if not p:
        return text, "unavailable"
    pv = float(p)
    ptxt = "<0.0001" if pv < 1e-4 else f"{pv:.4f}"
    return text, ptxt + ("*" if pv < 0.05 else "")


def render_report(out: Path) -> str:
    with (out / DERIVED_REPORT).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    summary = json.loads((out / FIT_SUMMARY).read_text(encoding="utf-8"))
    columns = [h[: -len("_estimate")] for h in rows[0].keys() if h.endswith("_estimate")] if rows else []
    titles = {"mean": "Mean", "variance": "Variance", "change": "Change from baseline",
              "correlation": "Correlation"}
    lines = [
        f"Status: {summary['status']}   deviance: {summary['deviance']:.3f}   n = {summary['n']}",
        "",
    ]
    width = 18
    head = f"{'':<24}" + "".join(f"{c.capitalize() if c == 'covariance' else c:^{2 * width}}" for c in columns)
    for panel in ("mean", "variance", "change", "correlation"):
        panel_rows = [r for r in rows if r["panel"] == panel]
        if not panel_rows:
            continue
        lines.append(head)
        lines.append(f"{titles[panel]:<24}" + "".join(f"{'Estimate (SE)':>{width}}{'P value':>{width}}" for _ in columns))
        for r in panel_rows:
            label = r["quantity"].replace("_", " ").replace("rate interval", "Rate of Interval")
            label = label.replace("initial status", "Initial Status").replace("wave", "Wave")
            cells = ""
            for c in columns:
                e, p = _fmt_cell(r[f"{c}_estimate"], r[f"{c}_se"], r[f"{c}_pvalue"])
                cells += f"{e:>{width}}{p:>{width}}"
            lines.append(f"{label:<24}{cells}")
        lines.append("")
    lines.append("* significant at the 0.05 level; --- not available in the model")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    out = Path(args.out)
    needed = [out / DERIVED_REPORT, out / FIT_SUMMARY]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        print(f"error: missing fit output(s): {', '.join(missing)}", file=sys.stderr)
        return EXIT_INPUT
    text = render_report(out)
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        design = SimulationDesign.load(args.design)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read design {args.design}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    options = FitOptions(max_retries=args.retries)
    workers = args.workers or os.cpu_count() or 1
    try:
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                report, reps, names = run_study(design, args.reps, options, args.seed, executor=pool)
        else:
            report, reps, names = run_study(design, args.reps, options, args.seed)
    except simstudy.NoConvergedReplication as exc:
        print(f"error: {exc}; no outputs written", file=sys.stderr)
        return EXIT_CAP
    out = _out_dir(args.out)
    report.write_csv(out / "metric_report.csv")
    write_replications(reps, names, out / "replications.csv")
    print(f"convergence rate: {report.convergence_rate:.4f} "
          f"({report.converged}/{report.attempted} attempts, {report.retries} retries)")
    if report.capped:
        print(f"warning: only {report.S} of {args.reps} replications converged within "
              f"{3 * args.reps} attempts; outputs are partial", file=sys.stderr)
        return EXIT_CAP
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        design = SimulationDesign.load(args.design)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read design {args.design}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    sample, _ = generate_dataset(design, replication_rng(args.seed, 0))
    out = _out_dir(args.out)
    write_long_csv(sample, out / "data.csv")
    design.model_spec().save(out / "spec.json")
    print(f"wrote {out / 'data.csv'} and {out / 'spec.json'}")
    return EXIT_OK


GRIDS = {
    "equal": simstudy.WAVES_10,
    "unequal": simstudy.WAVES_10_UNEQUAL,
    "unequal-regular": simstudy.WAVES_10_UNEQUAL_REGULAR,
    "six": simstudy.WAVES_6,
}


def cmd_design(args) -> int:
    grid = GRIDS[args.waves]
    if len(grid) == 6:
        rates = simstudy.RATES_6_DECREASING if args.rates == "decreasing" else simstudy.RATES_6_INCREASING
    else:
        rates = simstudy.RATES_10_DECREASING if args.rates == "decreasing" else simstudy.RATES_10_INCREASING
    missing = tuple(int(w) for w in args.missing_z.split(",")) if args.missing_z else ()
    try:
        design = benchmark_design(n=args.n, wave_times=grid, gammas=rates, rho_between=args.rho,
                               theta_eps=args.theta, fixed_interval=args.fixed, missing_z=missing,
                               delta=args.delta)
    except ValueError as exc:
        print(f"error: invalid design: {exc}", file=sys.stderr)
        return EXIT_INPUT
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    design.save(path)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lbgm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to long-format data")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", help="model spec JSON; default: all outcomes, shape factor on first interval")
    p.add_argument("--fixed", default="first", help="scaling when --spec is omitted: first|last|<interval>")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--retries", type=int, default=10)
    p.add_argument("--drop-values", help="comma-separated sentinel values treated as missing")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="print a summary of fit outputs")
    p.add_argument("--out", required=True, help="directory written by 'lbgm fit'")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="run a Monte Carlo study for one design cell")
    p.add_argument("--design", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--retries", type=int, default=10)
    p.add_argument("--workers", type=int, default=0, help="worker processes (default: all CPUs)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="draw one dataset from a design")
    p.add_argument("--design", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("design", help="write a design file for one cell of the factorial design")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--waves", choices=sorted(GRIDS), default="equal")
    p.add_argument("--rates", choices=("decreasing", "increasing"), default="decreasing")
    p.add_argument("--delta", type=float, default=0.25, help="half width of each time window")
    p.add_argument("--fixed", default="first", help="shape-factor interval: first|last|<interval>")
    p.add_argument("--missing-z", default="", help="comma-separated waves removed from outcome z")
    p.set_defaults(func=cmd_design)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "fixed", None) not in (None, "first", "last"):
        args.fixed = int(args.fixed)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
