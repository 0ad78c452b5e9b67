"""
``tp``: the command line front end.
"""
import argparse
import logging
import sys
from typing import List, Optional, Sequence, Tuple

from mkdocs.exceptions import ConfigurationError

from tensor_programs import __version__
from tensor_programs.config import METHODS, Settings, load_settings
from tensor_programs.demos import DEMOS, run_demo
from tensor_programs.detranspose import RULES, detranspose
from tensor_programs.errors import NumericError, ProgramError
from tensor_programs.limits import SamplingSpec
from tensor_programs.program import (
    ExprDag,
    Skeleton,
    compute_cdc,
    load_program,
    parse_expression,
    render_program,
    validate,
)
from tensor_programs.report import ReportRow, build_report, dumps, write_csv, write_report
from tensor_programs.simulator import ROUTES, convergence_study, theory_value

log = logging.getLogger("tensor_programs")

LOG_FORMAT = "%(levelname)-8s-  %(message)s"


def _widths(text: str) -> List[int]:
    try:
        widths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got '{text}'")
    if not widths:
        raise argparse.ArgumentTypeError("the width list is empty")
    return widths


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML settings file")
    common.add_argument("--seed", type=int, help="root seed (default 0)")
    common.add_argument("--trials", type=int, help="trials per width (default 10)")
    common.add_argument("--mc-samples", type=int, help="Monte Carlo samples per expectation (default 200000)")
    common.add_argument("--quad-points", type=int, help="Gauss-Hermite points per dimension (default 40)")
    common.add_argument("--method", choices=list(METHODS), help="expectation method (default auto)")
    common.add_argument("--coupled", action="store_true", default=None, help="nest the draws of all widths")
    common.add_argument("--threads", type=int, help="simulation workers, 0 for every CPU")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--csv", help="also write the report rows as CSV")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog="tp", description="Limits and simulations of tensor programs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def program_command(name, help_text):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("program", help="program file")
        return sub

    program_command("check", "validate a program and summarize its dimension classes")
    program_command("cdc", "print the dimension classes of a program")
    limit = program_command("limit", "limits of the measured quantities")
    limit.add_argument("--phi", action="append", default=[], help="extra quantity, NAME=EXPRESSION")
    limit.add_argument("--route", choices=ROUTES, default="auto")
    detrans = program_command("detranspose", "print the transpose-free check program")
    detrans.add_argument("--rule", choices=RULES, default="pinv")
    for name, help_text in (
        ("simulate", "simulate the measured quantities at finite widths"),
        ("compare", "simulate and set the results against the limits"),
    ):
        sub = program_command(name, help_text)
        sub.add_argument("--widths", type=_widths, required=True, help="comma separated widths")
        sub.add_argument("--phi", action="append", default=[], help="extra quantity, NAME=EXPRESSION")
        sub.add_argument("--reference", help="dimension class the widths apply to")
        if name == "compare":
            sub.add_argument("--route", action="append", choices=ROUTES, help="limit routes, repeatable")
    demo = commands.add_parser("demo", parents=[common], help="run a ready-made comparison")
    demo.add_argument("name", choices=list(DEMOS))
    demo.add_argument("--n", type=int, help="width or dimension")
    demo.add_argument("--k", type=int, help="depth, steps or highest moment")
    return parser


def _configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _settings(args) -> Settings:
    return load_settings(
        args.config,
        seed=args.seed,
        trials=args.trials,
        mc_samples=args.mc_samples,
        quad_points=args.quad_points,
        method=args.method,
        coupled=args.coupled,
        threads=args.threads,
    )


def _quantities(sk: Skeleton, extra: Sequence[str]) -> List[Tuple[str, ExprDag]]:
    phis = [(name, parse_expression(sk, text)) for name, text in sk.measures]
    for i, item in enumerate(extra, 1):
        name, sep, text = item.partition("=")
        if not sep:
            name, text = f"phi{i}", item
        phis.append((name.strip(), parse_expression(sk, text)))
    if not phis:
        raise ProgramError("nothing to compute: the program has no measure and no --phi was given")
    return phis


def _load(path, settings):
    sk = load_program(path)
    diagnostics = validate(sk)
    if diagnostics:
        raise ProgramError("; ".join(diagnostics))
    cdc = compute_cdc(sk)
    return sk, cdc, SamplingSpec.from_skeleton(sk, cdc, settings.psd_tol)


def _emit(args, report: dict):
    text = write_report(report, args.out)
    if args.out is None:
        sys.stdout.write(text)
    if args.csv:
        write_csv(report["rows"], args.csv)


def _check(args, settings):
    sk, cdc, _ = _load(args.program, settings)
    print(f"{args.program}: {len(sk)} lines, {sk.syntax_mode} syntax")
    for cls in cdc.class_ids:
        members = [sk.name_of(v) for v in cdc.members(cls)]
        print(f"  {cls}: {', '.join(members) if members else '(matrix side only)'}")
    if sk.has_transpose:
        print("  uses transposes")


def _cdc(args, settings):
    sk = load_program(args.program)
    text = dumps(compute_cdc(sk).to_dict(sk))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as stream:
            stream.write(text)
    else:
        sys.stdout.write(text)


def _limit(args, settings):
    sk, cdc, spec = _load(args.program, settings)
    method = settings.expectation_method()
    rows = []
    for name, phi in _quantities(sk, args.phi):
        value, route = theory_value(sk, cdc, spec, phi, method=method, route=args.route, rcond=settings.pinv_rcond)
        rows.append(ReportRow(name, theory=value, route=route))
    _emit(args, build_report(rows, render_program(sk), spec.to_dict(sk)))


def _detranspose(args, settings):
    sk, cdc, spec = _load(args.program, settings)
    result = detranspose(sk, cdc, spec, settings.expectation_method(), args.rule, settings.pinv_rcond)
    text = render_program(result.check_sk, result.comments)
    diagnostics = [
        f"numeric rank of the Gram matrix of '{name}' depends on the cutoff"
        for name, record in sorted(result.diagnostics.records.items())
        if not record.stable
    ]
    report = build_report(
        [],
        text,
        {"coefficients": result.coefficients(sk), "check": result.check_spec.to_dict(result.check_sk)},
        diagnostics,
    )
    if args.out or args.csv:
        _emit(args, report)
    else:
        sys.stdout.write(text)


def _simulate(args, settings, routes=()):
    sk, cdc, spec = _load(args.program, settings)
    study = convergence_study(
        sk,
        cdc,
        spec,
        _quantities(sk, args.phi),
        args.widths,
        trials=settings.trials,
        seed=settings.seed,
        coupled=settings.coupled,
        workers=settings.threads,
        routes=routes,
        reference=args.reference,
        width_cap=settings.width_cap,
        method=settings.expectation_method(),
        rcond=settings.pinv_rcond,
    )
    spec_dict = spec.to_dict(sk)
    spec_dict["study"] = study.to_dict()
    _emit(args, build_report(study.rows, render_program(sk), spec_dict))


def _compare(args, settings):
    routes = args.route
    if not routes:
        sk = load_program(args.program)
        routes = ["naive", "detranspose"] if sk.backward_start is not None else ["auto"]
    _simulate(args, settings, routes)


def _demo(args, settings):
    _emit(args, run_demo(args.name, settings, args.n, args.k))


COMMANDS = {
    "check": _check,
    "cdc": _cdc,
    "limit": _limit,
    "detranspose": _detranspose,
    "simulate": _simulate,
    "compare": _compare,
    "demo": _demo,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Runs one command and returns the exit status: 0 on success, 1 for invalid
    programs or settings, 2 when a numeric routine fails.
    """
    args = _parser().parse_args(argv)
    _configure_logging(args)
    try:
        settings = _settings(args)
        COMMANDS[args.command](args, settings)
    except (ProgramError, ConfigurationError, ValueError, OSError) as error:
        log.error(str(error))
        return 1
    except NumericError as error:
        log.error(str(error))
        return 2
    return 0


def main():
    sys.exit(run())
