"""Command line entry point: ``ssmamp {gen,run,se,validate,report}``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
import typing

from .. import rmt, stats
from . import harness, validate
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class _UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys match the config field names")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = hints[f.name]
        if kind is bool:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif kind is list:
            conv = int if f.name == "check_iters" else str
            p.add_argument(flag, dest=f.name, nargs="+", type=conv, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def config_from_args(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config).to_dict() if args.config else {}
    for name in ExperimentConfig.field_names():
        val = getattr(args, name, None)
        if val is not None:
            base[name] = val
    return ExperimentConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    parser = _UsageParser(prog="ssmamp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_UsageParser)

    p = sub.add_parser("gen", help="write instance directories and a manifest")
    _add_config_flags(p)
    p.add_argument("--out", help="target directory (default: output_dir)")

    p = sub.add_parser("run", help="run Monte Carlo trials and write CSV + report")
    _add_config_flags(p)
    p.add_argument("--instances", help="read trials from a directory written by 'gen'")
    p.add_argument("--workers", type=int, help=f"pool width (default: ${harness.THREADS_ENV} or 1)")

    p = sub.add_parser("se", help="print predicted curves only (no sampling)")
    _add_config_flags(p)
    p.add_argument("--horizon", type=int, default=20)

    sub.add_parser("validate", help="run the cross-module identity suite")

    p = sub.add_parser("report", help="rebuild the report from stored per-trial rows")
    p.add_argument("run_dir")
    return parser


def _cmd_gen(args) -> int:
    cfg = config_from_args(args)
    dirs = harness.generate(cfg, args.out)
    print(f"wrote {len(dirs)} instance(s) under {dirs[0].parent if dirs else args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = config_from_args(args)
    report = harness.experiment(cfg, instances_dir=args.instances, workers=args.workers)
    print("\n".join(report.report_lines()))
    return EXIT_OK if report.passed else EXIT_CHECK


def _cmd_se(args) -> int:
    cfg = config_from_args(args)
    if args.horizon < 1:
        raise ConfigError("horizon must be >= 1")
    se, err = harness.se_prediction(cfg, args.horizon)
    if se is None:
        print(f"no state evolution: {err}", file=sys.stderr)
        return EXIT_CHECK
    w = csv.writer(sys.stdout)
    w.writerow(["t", "mse_pred", "chi", "v", "sigma_x_pred", "zeta", "c_theta_tt_pred"])
    for t in range(args.horizon):
        w.writerow([t, repr(float(se.mse[t])), repr(float(se.chi[t])), repr(float(se.v[t])),
                    repr(float(se.sigma_x[t])), repr(float(se.zeta[t])),
                    repr(float(se.c_theta[t]))])
    return EXIT_OK


def _cmd_validate(args) -> int:
    lines, ok = validate.main_lines(validate.run_suite())
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_CHECK


def _cmd_report(args) -> int:
    report = harness.report_from_dir(args.run_dir)
    print("\n".join(report.report_lines()))
    return EXIT_OK if report.passed else EXIT_CHECK


COMMANDS = {"gen": _cmd_gen, "run": _cmd_run, "se": _cmd_se, "validate": _cmd_validate,
            "report": _cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"ssmamp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, rmt.DomainError) as exc:
        print(f"ssmamp: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
