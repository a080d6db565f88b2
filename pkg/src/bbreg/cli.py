"""Command-line entry point: ``bbreg register | bench | normals``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 degenerate registration.
Diagnostics go to stderr; results only to the files named on the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .geom import PointCloud, PoseParams, apply_transform
from .grad import canonical_variant
from .io import (
    CloudFormatError,
    read_cloud,
    write_cloud,
    write_report_csv,
    write_report_json,
    write_result,
)
from .loss import DegenerateLossError
from .normals import DegenerateNeighborhoodError, estimate_normals
from .register import RegistrationConfig, register, register_pipeline
from .synth import ExperimentSpec, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEGENERATE = 0, 1, 2, 3

log = logging.getLogger("bbreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which collides with "data error"
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pose(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected six comma-separated numbers") from None
    if len(vals) != 6:
        raise argparse.ArgumentTypeError("expected six comma-separated numbers")
    return vals


def _variant(text):
    try:
        return canonical_variant(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = _Parser(prog="bbreg", description="Best-buddy rigid point-cloud registration.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a source cloud onto a target cloud")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--variant", type=_variant, default=None, help="softbbs, softbd, n, f or icp")
    r.add_argument("--pipeline", default=None, help="stages joined by '+', e.g. softbbs+softbd")
    r.add_argument("--iters", type=int, default=None)
    r.add_argument("--lr", type=float, default=None)
    r.add_argument("--alpha-init", type=float, default=None)
    r.add_argument("--k-normals", type=int, default=None)
    r.add_argument("--subsample", type=int, default=None, metavar="M",
                   help="randomly keep M points of each cloud")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--init-pose", type=_pose, default=None, metavar="THETA,PHI,PSI,X,Y,Z")
    r.add_argument("--format", choices=["xyz", "ply_ascii"], default=None,
                   help="input format (default: from extension)")
    r.add_argument("--out", required=True, help="result JSON")
    r.add_argument("--out-cloud", default=None, help="write the aligned source cloud here")
    r.add_argument("--no-timing", action="store_true", help="omit wall-clock timings from the JSON")

    b = sub.add_parser("bench", help="run a synthetic experiment described by a JSON spec")
    b.add_argument("--spec", required=True)
    b.add_argument("--out", required=True, help="per-trial CSV report")
    b.add_argument("--out-json", default=None)
    b.add_argument("--no-timing", action="store_true")

    n = sub.add_parser("normals", help="estimate normals and write the cloud with them")
    n.add_argument("--in", dest="inp", required=True)
    n.add_argument("--k", type=int, default=13)
    n.add_argument("--out", required=True)
    n.add_argument("--format", choices=["xyz", "ply_ascii"], default=None)
    return p


def _configs(args):
    if args.variant is None and args.pipeline is None:
        raise UsageError("register: one of --variant or --pipeline is required")
    stages = [args.variant] if args.pipeline is None else [_variant(s) for s in args.pipeline.split("+") if s]
    if args.variant is not None and args.pipeline is not None:
        raise UsageError("register: --variant and --pipeline are mutually exclusive")
    overrides = {"seed": args.seed}
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.alpha_init is not None:
        overrides["alpha_init"] = args.alpha_init
    if args.k_normals is not None:
        overrides["k_normals"] = args.k_normals
    if args.init_pose is not None:
        alpha = overrides.get("alpha_init", RegistrationConfig().alpha_init)
        overrides["initial_pose"] = PoseParams.from_vector([*args.init_pose, np.log(alpha)])
    configs = []
    for v in stages:
        kw = dict(overrides, variant=v)
        if v == "icp" and "iterations" not in kw:
            kw["iterations"] = 100
        configs.append(RegistrationConfig(**kw))
    return configs


def _subsample(cloud, m, rng):
    if m is None or m >= len(cloud):
        return cloud
    if m < 3:
        raise ValueError("--subsample needs at least 3 points")
    return cloud.subset(np.sort(rng.choice(len(cloud), size=m, replace=False)))


def cmd_register(args):
    configs = _configs(args)
    source = read_cloud(args.source, args.format)
    target = read_cloud(args.target, args.format)
    rng = np.random.default_rng(args.seed)
    target = _subsample(target, args.subsample, rng)
    source = _subsample(source, args.subsample, rng)
    log.info("registering %d source points onto %d target points", len(source), len(target))
    if len(configs) == 1:
        result = register(target, source, configs[0])
    else:
        result = register_pipeline(target, source, configs)
    write_result(args.out, result, include_timing=not args.no_timing)
    if args.out_cloud:
        write_cloud(args.out_cloud, apply_transform(result.transform, source))
    return EXIT_OK


def cmd_bench(args):
    try:
        with open(args.spec) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{args.spec}: invalid JSON: {exc}") from None
    spec = ExperimentSpec.from_dict(raw)
    if not spec.variants:
        raise ValueError(f"{args.spec}: no variants listed")
    report = run_experiment(spec)
    write_report_csv(args.out, report)
    if args.out_json:
        write_report_json(args.out_json, report, include_timing=not args.no_timing)
    for name, agg in report.aggregates().items():
        log.info("%s: median angular error %.4g deg, failure fraction %.3g",
                 name, agg["angular"]["median"], agg["angular"]["failure_fraction"])
    return EXIT_OK


def cmd_normals(args):
    cloud = read_cloud(args.inp, args.format)
    out = estimate_normals(PointCloud(cloud.points), args.k)
    write_cloud(args.out, out)
    return EXIT_OK


COMMANDS = {"register": cmd_register, "bench": cmd_bench, "normals": cmd_normals}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DegenerateLossError as exc:
        print(f"bbreg: degenerate registration: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (CloudFormatError, DegenerateNeighborhoodError, ValueError, OSError) as exc:
        print(f"bbreg: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
