"""Command-line entry point.

Subcommands::

    kdcl validate      --config PATH
    kdcl montecarlo    --config PATH [--trials N] [--seed S] [--jobs J] --out DIR
    kdcl trial         --config PATH --index K --out DIR [--window L]
    kdcl observability --log PATH [--window L] [--tol R]

Exit status: 0 on success, 1 on configuration/usage errors, 2 on numerical
failure inside a filter.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError, NumericalError
from .io import (
    emit_results,
    emit_trial_results,
    load_config,
    read_jacobian_log,
    write_jacobian_log,
    write_manifest,
    write_summary_csv,
)
from .observability import audit_filter_run
from .simulate import FilterAggregate, monte_carlo, run_trial


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="kdcl", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p_val = sub.add_parser("validate", help="parse and validate a config")
    p_val.add_argument("--config", required=True)

    p_mc = sub.add_parser("montecarlo", help="run the Monte-Carlo experiment")
    p_mc.add_argument("--config", required=True)
    p_mc.add_argument("--trials", type=int, default=None)
    p_mc.add_argument("--seed", type=int, default=None)
    p_mc.add_argument("--jobs", type=int, default=None)
    p_mc.add_argument("--out", required=True)

    p_tr = sub.add_parser("trial", help="run a single trial with full curves "
                                        "and Jacobian logs")
    p_tr.add_argument("--config", required=True)
    p_tr.add_argument("--index", type=int, required=True)
    p_tr.add_argument("--out", required=True)

    p_ob = sub.add_parser("observability", help="audit a logged filter run")
    p_ob.add_argument("--log", required=True)
    p_ob.add_argument("--window", type=int, default=5)
    p_ob.add_argument("--tol", type=float, default=1e-8)
    return parser


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"ok: {config.n} robots, {config.steps} steps, {config.trials} trials, "
          f"filters {','.join(config.filters)}")
    return 0


def _cmd_montecarlo(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if overrides:
        config = dataclasses.replace(config, **overrides)
    started = _now()
    metrics = monte_carlo(config, jobs=args.jobs)
    finished = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_results(metrics, out)
    write_manifest(out / "manifest.json", config, metrics.summary,
                   started, finished, metrics.failed_trials)
    for kind in metrics.filters:
        s = metrics.summary[kind]
        print(f"{kind:>5s}: rmse_pos={s.rmse_pos:.4f} m "
              f"rmse_ori={s.rmse_ori:.4f} rad nees={s.nees:.3f}")
    if metrics.failed_trials:
        print(f"failed trials: {list(metrics.failed_trials)}", file=sys.stderr)
    return 0


def _cmd_trial(args) -> int:
    config = load_config(args.config)
    if not 0 <= args.index:
        raise ConfigError(f"--index must be non-negative, got {args.index}")
    started = _now()
    result, logs = run_trial(config, args.index, record_jacobians=True)
    finished = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_trial_results(result, config.dt, out)
    summary = {
        kind: FilterAggregate(s.rmse_pos, s.rmse_ori, s.nees_mean)
        for kind, s in result.summary.items()
    }
    write_summary_csv(out / "summary.csv", result.filters, summary)
    for kind, records in logs.items():
        if records:
            write_jacobian_log(out / f"jacobians_{kind}.bin", kind, records)
    write_manifest(out / "manifest.json", config, summary, started, finished,
                   extra={"trial_index": args.index,
                          "failed": dict(result.failed)})
    if result.failed:
        for kind, msg in result.failed.items():
            print(f"filter {kind} failed: {msg}", file=sys.stderr)
        return 2
    return 0


def _cmd_observability(args) -> int:
    kind, records = read_jacobian_log(args.log)
    audit = audit_filter_run(records, window=args.window, tol_ratio=args.tol,
                             canonical=(kind == "kd"))
    for start, report in zip(audit.window_starts, audit.reports):
        print(f"window start={start} dim={report.dimension} "
              f"residual={report.residual:.3e}")
    if audit.first_deficient is None:
        print(f"{kind}: unobservable dimension >= 4 in all "
              f"{len(audit.reports)} windows")
    else:
        print(f"{kind}: dimension dropped below 4 at step {audit.first_deficient}")
    return 0


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    handlers = {
        "validate": _cmd_validate,
        "montecarlo": _cmd_montecarlo,
        "trial": _cmd_trial,
        "observability": _cmd_observability,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return cli_main()


if __name__ == "__main__":
    sys.exit(cli_main())
