"""Command line: ``run <config>``, ``validate <config>``, ``report <dir>``.

Exit status: 0 when every check passes, 1 when a check fails, 2 on an
invalid config or a failed stage.
"""

import argparse
import sys

from .errors import ConfigInvalid
from .estimators import WORKERS_ENV


def _run(args):
    from .config import load_config
    from .experiments import StageError, run_experiment

    try:
        cfg = load_config(args.config)
        result = run_experiment(cfg, args.output)
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"status {result.status}: wrote {len(result.files)} files to {args.output or cfg['output']}")
    return result.status


def _validate(args):
    from .config import load_config

    try:
        cfg = load_config(args.config)
    except (ConfigInvalid, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    print(f"ok: {cfg['experiment']} (schema version {cfg['schema_version']})")
    return 0


def _report(args):
    from .reports import pretty_reports

    try:
        print(pretty_reports(args.directory))
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="heisenberg-sde",
        description="Run and inspect diffusion experiments on generalized Heisenberg groups.",
        epilog=f"Worker count for path-parallel loops comes from ${WORKERS_ENV}.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("-o", "--output", help="override the output directory")
    run.set_defaults(func=_run)
    val = sub.add_parser("validate", help="check a config against the schema")
    val.add_argument("config")
    val.set_defaults(func=_validate)
    rep = sub.add_parser("report", help="pretty-print the reports in a directory")
    rep.add_argument("directory")
    rep.set_defaults(func=_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
