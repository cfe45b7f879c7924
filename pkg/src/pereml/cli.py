"""Command-line interface: fit, simulate and check subcommands.

Exit codes: 0 success, 2 usage or file-schema error, 3 numerical
failure (non-convergence, infeasible pure error, degenerate model).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import dataio
from .design import build_model_matrices, pure_error_feasibility
from .errors import DataSchemaError, PeremlError
from .reml import PE_TAG
from .simulate import run_bias_study

INFEASIBLE_MSG = "PE-REML infeasible: no pure error degrees of freedom"


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pereml",
        description=(
            "Pure-error and response-surface REML analysis of multi-stratum "
            "response surface designs"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a dataset with PE-REML and/or RS-REML")
    fit.add_argument("--data", required=True, help="dataset CSV file")
    fit.add_argument(
        "--strata",
        required=True,
        help="comma-separated stratum column names, outermost first",
    )
    fit.add_argument(
        "--method",
        choices=["pe-reml", "rs-reml", "both"],
        default="both",
    )
    fit.add_argument("--kr", action="store_true", help="apply the Kenward-Roger correction")
    fit.add_argument("--out", help="also write the report to this path")
    fit.add_argument("--format", choices=["text", "csv", "json"], default="text")

    sim = sub.add_parser("simulate", help="run a Monte Carlo bias study")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--replicates", type=int, help="override the scenario's replicate count")
    sim.add_argument("--seed", type=int, help="override the scenario's seed")
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", help="directory for report.csv and report.json")

    chk = sub.add_parser("check", help="pure-error feasibility report for a dataset")
    chk.add_argument("--data", required=True)
    chk.add_argument("--strata", required=True)
    return parser


def cmd_fit(args):
    config = dataio.RunConfig(
        stratum_columns=tuple(args.strata.split(",")),
        method=args.method,
        kr=args.kr,
        output_format=args.format,
        out_path=args.out,
    )
    design, y = dataio.parse_dataset(args.data, config.stratum_columns)
    if PE_TAG in config.methods:
        mats = build_model_matrices(design)
        feas = pure_error_feasibility(mats.X_t, list(mats.Z))
        if not feas.feasible:
            print(INFEASIBLE_MSG, file=sys.stderr)
            return 3
    report = dataio.build_fit_report(design, y, methods=config.methods, kr=config.kr)
    if config.output_format == "text":
        body = dataio.format_fit_text(report, kr=config.kr)
    elif config.output_format == "csv":
        body = dataio.format_fit_csv(report)
    else:
        body = dataio.fit_report_json(report) + "\n"
    sys.stdout.write(body)
    if config.out_path:
        Path(config.out_path).write_text(body, encoding="utf-8")
    return 0


def cmd_simulate(args):
    config = dataio.RunConfig(
        scenario_path=args.scenario,
        seed=args.seed,
        out_path=args.out,
    )
    scenario = dataio.load_scenario(config.scenario_path)
    spec = scenario.spec
    if config.seed is not None:
        spec = replace(spec, seed=config.seed)
    if args.replicates is not None:
        spec = replace(spec, n_replicates=args.replicates)
    report = run_bias_study(
        spec,
        methods=scenario.methods,
        kr=scenario.kr,
        threads=max(1, args.threads),
    )
    sys.stdout.write(dataio.format_sim_text(report))
    if report.n_replicates < 2:
        print(
            "warning: empirical standard errors are undefined with a single replicate",
            file=sys.stderr,
        )
    if config.out_path:
        out = Path(config.out_path)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(dataio.format_sim_csv(report), encoding="utf-8")
        (out / "report.json").write_text(dataio.sim_report_json(report), encoding="utf-8")
    return 0


def cmd_check(args):
    design, _ = dataio.parse_dataset(args.data, args.strata.split(","))
    mats = build_model_matrices(design)
    feas = pure_error_feasibility(mats.X_t, list(mats.Z))
    print(f"runs: {design.n_runs}, treatments: {mats.t}, strata: {design.n_strata}")
    print(f"pure-error residual df (n - rank(X_t)): {feas.residual_df}")
    print(f"df free of all block spaces: {feas.within_df}")
    for name, df in zip(design.stratum_names, feas.stratum_df):
        print(f"block df visible in pure error [{name}]: {df}")
    print(f"feasible: {'yes' if feas.feasible else 'no'}"
          + (f" ({feas.message})" if feas.message else ""))
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"fit": cmd_fit, "simulate": cmd_simulate, "check": cmd_check}
    try:
        return handlers[args.command](args)
    except DataSchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PeremlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
