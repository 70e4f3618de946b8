"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .dynamics import NumericalFailure
from .experiments import REGISTRY, ConfigError, get_experiment, make_config, run_experiment
from .io import load_config, resolve_output_dir, write_run

__all__ = ["main", "cli_run", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that code means numerical failure
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfsense", description="Differential phase sensing experiments.")
    p.add_argument("--version", action="version", version=f"dfsense {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("list", help="registered experiments")
    run = sub.add_parser("run", help="run one experiment and write CSV output")
    run.add_argument("--experiment", required=True)
    run.add_argument("--config", help="INI file with [run] and [options] sections")
    run.add_argument("--seed", type=int, help="64-bit root seed (overrides the config)")
    run.add_argument("--out", help="output directory (else $DFSENSE_OUT, the config, ./dfsense_out)")
    sub.add_parser("validate", help="run the quick invariant suite")
    desc = sub.add_parser("describe", help="print an experiment's parameter schema")
    desc.add_argument("--experiment", required=True)
    return p


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _cmd_list(args, out) -> int:
    width = max(map(len, REGISTRY))
    for name, exp in REGISTRY.items():
        print(f"{name:<{width}}  {exp.description}", file=out)
    return EXIT_OK


def _cmd_describe(args, out) -> int:
    exp = get_experiment(args.experiment)
    print(f"{exp.name}: {exp.description}", file=out)
    print("[run]", file=out)
    schema = exp.schema()
    for key in ("n_values", "phase_grid", "cooperativity", "budget", "seed", "output"):
        kind, default = schema.pop(key)
        print(f"  {key} = {_show(default)}    # {kind}", file=out)
    if schema:
        print("[options]", file=out)
        for key, (kind, default) in schema.items():
            print(f"  {key} = {_show(default)}    # {kind}", file=out)
    return EXIT_OK


def _show(v) -> str:
    if isinstance(v, tuple):
        if len(v) > 8:
            return ", ".join(map(str, v[:3])) + f", ... ({len(v)} values)"
        return ", ".join(map(str, v))
    return str(v)


def _cmd_run(args, out) -> int:
    if args.config:
        config = load_config(args.config, args.experiment)
    else:
        config = make_config(args.experiment)
    if args.seed is not None:
        config = make_config(config.name, n_values=config.n_values, phase_grid=config.phase_grid,
                             cooperativity=config.cooperativity, budget=config.budget,
                             seed=args.seed, output=config.output, **config.options)
    out_dir = resolve_output_dir(args.out, config)
    started = _now()
    result = run_experiment(config)
    manifest = write_run(result, config, out_dir, started, _now())
    print(f"{config.name}: {len(result.rows)} rows -> {out_dir}", file=out)
    print(f"manifest: {manifest}", file=out)
    return EXIT_OK


def _cmd_validate(args, out) -> int:
    from .validation import run_checks

    def show(r):
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark}  {r.name}: deviation {r.deviation:.2e} (tol {r.tolerance:.0e}, "
              f"{r.seconds:.2f} s)", file=out)

    results = run_checks(report=show)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


_COMMANDS = {"list": _cmd_list, "run": _cmd_run, "validate": _cmd_validate, "describe": _cmd_describe}


def cli_run(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = _parser().parse_args(argv)
        return _COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_CONFIG
    except (NumericalFailure, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=err)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
