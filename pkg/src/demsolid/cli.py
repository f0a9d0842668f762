"""Command line entry point: ``demsolid <command> ...``.

Exit codes follow the failing stage: config 2, geometry 3, sampling 4,
solve 5, render 6. The BLAS thread cap comes from ``--threads`` or the
``DEMSOLID_THREADS`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext

from .config import load_config
from .errors import ConfigError, ParseError
from .pipeline import (EXIT_CODES, STAGES, StageError, compare_solvers, render_from_outputs, run_oracle,
                       run_pipeline, validate_cloud)

THREADS_ENV = "DEMSOLID_THREADS"


def thread_limit(threads=None):
    """Context manager capping BLAS/OpenMP pools; a no-op when no cap is set."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise ConfigError("thread cap must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def build_parser():
    p = argparse.ArgumentParser(prog="demsolid", description="Meshfree hyperelastic solids from scene configs.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help="override the config's output directory")
    common.add_argument("--seed-override", type=int, default=None, help="replace the config seed")
    common.add_argument("--threads", type=int, default=None, help=f"BLAS thread cap (else ${THREADS_ENV})")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="run the pipeline")
    s.add_argument("config")
    s.add_argument("--stage", choices=STAGES, default="render", help="last stage to run")
    for name, text in (("sample", "stop after particle cloud export"), ("render", "re-render a previous solve"),
                       ("compare", "train DEM and PINN on the same cloud"), ("oracle", "reference FEM solve")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("config")
    v = sub.add_parser("validate-cloud", help="metrics of a saved particle cloud")
    v.add_argument("cloud")
    v.add_argument("geometry")
    sub.add_parser("schema", help="print the scene config JSON schema")
    return p


def _dump(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _run(args):
    if args.command == "schema":
        from .config import json_schema
        _dump(json_schema())
        return 0
    if args.command == "validate-cloud":
        try:
            _dump(validate_cloud(args.cloud, args.geometry))
        except (ParseError, OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CODES["geometry"] if isinstance(exc, ParseError) else 1
        return 0
    try:
        cfg = load_config(args.config, args.seed_override, args.out_dir)
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    with thread_limit(args.threads):
        if args.command in ("solve", "sample"):
            stage = "sample" if args.command == "sample" else args.stage
            res = run_pipeline(cfg, stage=stage)
            summary = {"artifacts": res.artifacts}
            for k, r in res.reports.items():
                summary[k] = {"converged": r.converged, "epochs": r.epochs, "table": r.table()}
            _dump(summary)
        elif args.command == "render":
            _dump(render_from_outputs(cfg))
        elif args.command == "compare":
            summary, _ = compare_solvers(cfg)
            summary.pop("scene", None)
            _dump(summary)
        else:
            _, _, summary = run_oracle(cfg)
            summary.pop("scene", None)
            _dump(summary)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
