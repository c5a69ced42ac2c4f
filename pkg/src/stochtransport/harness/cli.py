"""Command-line entry point: run, validate, catalog."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from ..drift import DRIFT_CATALOG
from ..errors import StochTransportError
from ..transport import IC_CATALOG
from .config import load_config
from .experiments import EXPERIMENT_DESCRIPTIONS
from .report import emit_report, run_experiment


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    manifest = run_experiment(cfg, output_dir=args.output_dir)
    print(emit_report(manifest), end="")
    return 0 if manifest.passed else 1


def _cmd_validate(args):
    cfg = load_config(args.config)
    print(f"{args.config}: valid {cfg.experiment} configuration (hash {cfg.hash()[:16]})")
    return 0


def _cmd_catalog(args):
    print("drifts:")
    for name in DRIFT_CATALOG:
        print(f"  {name}")
    print("initial conditions:")
    for name in IC_CATALOG:
        print(f"  {name}")
    print("experiments:")
    for name, text in EXPERIMENT_DESCRIPTIONS.items():
        print(f"  {name}: {text}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stochtransport",
                                description="Stochastic transport numerical lab")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment configuration")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None, help="override the configured directory")
    r.add_argument("--threads", type=int, default=None, help="override the thread count")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="validate a configuration file")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    c = sub.add_parser("catalog", help="list drifts, initial conditions and experiments")
    c.set_defaults(func=_cmd_catalog)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StochTransportError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
