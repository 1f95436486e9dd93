"""Command-line entry point.

    capflow run --config cfg.json --out DIR       exit 0 converged, 2 horizon, 4 breakdown
    capflow check-condition --config cfg.json     exit 0 pass, 1 fail
    capflow oracle --p 3 --f 1 --u0 0.5 --n 1 --t 0.693147
    capflow residual --config cfg.json --snapshot snap_3.csv

Invalid configuration or arguments exit 3; I/O failures exit 5.  The
environment variable CAPFLOW_THREADS caps BLAS/OpenMP threads (0 = auto).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

from .diagnostics import cap_ode_oracle
from .flow import run, stationary_residual
from .io import ConfigError, emit_outputs, load_config, read_snapshot
from .orlicz import make_from_expr, make_power

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_HORIZON = 2
EXIT_INVALID = 3
EXIT_BREAKDOWN = 4
EXIT_IO = 5

_RUN_CODES = {"converged": EXIT_OK, "horizon": EXIT_HORIZON, "oscillating": EXIT_HORIZON, "breakdown": EXIT_BREAKDOWN}

log = logging.getLogger("capflow")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")

    parser = _Parser(prog="capflow", description="Capillary Gauss curvature flow simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="evolve a configuration and write outputs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("check-condition", parents=[common], help="sampled barrier condition check")
    p.add_argument("--config", required=True)

    p = sub.add_parser("oracle", parents=[common], help="cap-family ODE solution u(t)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--p", type=float, help="power weight phi = s^(1-p)")
    g.add_argument("--phi", help="xi-independent expression in s")
    p.add_argument("--f", type=float, required=True)
    p.add_argument("--u0", type=float, required=True)
    p.add_argument("--n", type=int, choices=(1, 2), required=True)
    p.add_argument("--t", type=float, required=True)

    p = sub.add_parser("residual", parents=[common], help="stationary residual of a snapshot")
    p.add_argument("--config", required=True)
    p.add_argument("--snapshot", required=True)
    return parser


def _thread_limit():
    raw = os.environ.get("CAPFLOW_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CAPFLOW_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("CAPFLOW_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(args):
    try:
        return load_config(args.config, seed=args.seed)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None


def _cmd_run(args) -> int:
    cfg = _load(args)
    out = args.out or cfg.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set \"out\"")

    def progress(row):
        if not args.quiet:
            print(f"t={row.t:.6g} dt={row.dt:.3g} J={row.J:.10g} residual={row.residual_inf:.3e}", flush=True)

    # cadence 0 keeps only the initial and final fields
    every = cfg.snapshot_cadence or cfg.flow.max_steps + 1
    report = run(cfg.flow, progress=progress, snapshot_every=every)
    try:
        emit_outputs(report, cfg, out)
    except OSError as exc:
        print(f"capflow: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    if not args.quiet:
        print(f"status={report.status} t={report.state.t:.6g} residual_inf={report.residual_inf:.3e} steps={report.n_steps}")
    return _RUN_CODES[report.status]


def _cmd_check(args) -> int:
    from .orlicz import check_barrier_condition

    cfg = _load(args)
    P = cfg.flow.problem
    fc = cfg.flow
    rep = check_barrier_condition(P.phi, P.f, P.grid, fc.s_lo, fc.s_hi, fc.barrier_samples)
    print(json.dumps(rep.as_dict(), indent=2))
    return EXIT_OK if rep.passes else EXIT_FAIL


def _cmd_oracle(args) -> int:
    if args.phi is not None:
        phi = make_from_expr(args.phi, dim_n=args.n)
        if not phi.xi_independent:
            raise ConfigError("the oracle needs phi independent of xi")
    else:
        phi = make_power(args.p, dim_n=args.n)
    try:
        u = cap_ode_oracle(args.u0, args.f, phi, args.n, args.t)
    except ArithmeticError as exc:
        print(f"capflow: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    print(f"{u:.6f}")
    return EXIT_OK


def _cmd_residual(args) -> int:
    cfg = _load(args)
    P = cfg.flow.problem
    h = read_snapshot(args.snapshot, P.grid)
    _, max_norm, l2 = stationary_residual(P.grid, h, P.f, P.phi)
    print(json.dumps({"max_norm": max_norm, "l2_norm": l2}))
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "check-condition": _cmd_check, "oracle": _cmd_oracle, "residual": _cmd_residual}


def run_command(argv=None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with _thread_limit():
            return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"capflow: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"capflow: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
