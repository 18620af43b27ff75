"""Command-line entry point: ``compenergy run|flops|simulate-sensor|fit``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from compenergy import __version__
from compenergy.engine import EnergyEstimate, amplified_trials
from compenergy.errors import ConfigError, ProfilerError
from compenergy.experiment import ExperimentConfig, load_config, run_experiment, summarize
from compenergy.flops import FLOP_CONVENTION, flops_of_component
from compenergy.meter import SimulatedMeter, Workload
from compenergy.model import profiled_components
from compenergy.report import FIT_COLUMNS, MARGINAL_COLUMNS, csv_table, emit, to_json

OUTPUT_DIR_ENV = "COMPENERGY_OUTPUT_DIR"

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    out = args.out or os.environ.get(OUTPUT_DIR_ENV)
    return config.with_overrides(seed=args.seed, output_dir=out)


def _formats(args) -> tuple[str, ...]:
    return ("json", "csv") if args.format == "both" else (args.format,)


def cmd_run(args) -> int:
    config = _config(args)
    report = run_experiment(config)
    paths = emit(report, config.output_dir, _formats(args))
    for p in paths:
        print(p)
    for err in report["errors"]:
        print(f"cell {err['precision']}/{err['length']} failed: {err['error']}: "
              f"{err['message']}", file=sys.stderr)
    return EXIT_PARTIAL if report["errors"] else EXIT_OK


def cmd_flops(args) -> int:
    config = _config(args)
    rows = []
    for precision in config.precisions:
        model = dataclasses.replace(config.model, precision=precision)
        for length in config.lengths:
            for cid in profiled_components(model):
                count = flops_of_component(model, cid.kind, length)
                rows.append({"precision": precision.value, "length": length,
                             "component": cid.label, **count.to_dict()})
    if args.format == "csv":
        sys.stdout.write(csv_table(("precision", "length", "component", "muladds",
                                     "exps", "divs", "casts", "total_flops"), rows))
    else:
        sys.stdout.write(to_json({"convention": FLOP_CONVENTION, "flops": rows}))
    return EXIT_OK


def cmd_simulate_sensor(args) -> int:
    """Amplified measurement of a synthetic constant-power workload."""
    config = _config(args)
    if not args.energy > 0 or not args.duration > 0:
        raise ConfigError("--energy and --duration must be > 0")
    sensor = dataclasses.replace(config.sensor, seed=config.global_seed)
    meter = SimulatedMeter(sensor, config.oracle)
    plan = dataclasses.replace(config.plan, trials=args.trials or config.plan.trials)
    n = args.repetitions or plan.repetitions
    workload = Workload.constant(args.energy, args.duration)
    trials, zeros = amplified_trials(meter, workload, n, plan)
    est = EnergyEstimate(None, tuple(trials), n, zeros, truth=meter.true_draw(workload),
                         duration=args.duration)
    result = {"energy_mj": args.energy, "duration_s": args.duration, "repetitions": n,
              "trials": plan.trials, "sample_period_s": meter.sample_period,
              "mean_mj": est.mean, "std_mj": est.std, "rel_std_pct": est.rel_std,
              "truth_mj": est.truth, "zero_reading_trials": zeros,
              "per_trial_mj": list(est.per_trial)}
    sys.stdout.write(to_json(result))
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from None
    summary = summarize(report.get("records", []))
    if args.format == "csv":
        sys.stdout.write(csv_table(FIT_COLUMNS, summary["fits"]))
        sys.stdout.write("\n")
        sys.stdout.write(csv_table(MARGINAL_COLUMNS, summary["marginals"]))
    else:
        sys.stdout.write(to_json(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compenergy",
        description="Component-level energy profiling of a small transformer on a "
                    "simulated coarse energy sensor.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, formats, default):
        p.add_argument("--config", help="TOML config, or a JSON report to rerun")
        p.add_argument("--out", help=f"output directory (overrides ${OUTPUT_DIR_ENV})")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--format", choices=formats, default=default)

    common(sub.add_parser("run", help="measure the full grid and write reports"),
           ("json", "csv", "both"), "both")
    common(sub.add_parser("flops", help="print analytic operation counts"),
           ("json", "csv"), "csv")
    sim = sub.add_parser("simulate-sensor", help="measure a synthetic workload")
    common(sim, ("json",), "json")
    sim.add_argument("--energy", type=float, default=20.0, help="true energy per run, mJ")
    sim.add_argument("--duration", type=float, default=400e-6, help="seconds per run")
    sim.add_argument("--repetitions", type=int, help="N per trial")
    sim.add_argument("--trials", type=int, help="T")
    fit = sub.add_parser("fit", help="re-analyze an existing JSON report")
    fit.add_argument("report")
    common(fit, ("json", "csv"), "json")
    return parser


COMMANDS = {"run": cmd_run, "flops": cmd_flops, "simulate-sensor": cmd_simulate_sensor,
            "fit": cmd_fit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProfilerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
