"""Command line driver.

    autosketch fme CONFIG [--output PATH]
    autosketch fedopt CONFIG [--output PATH]
    autosketch sweep CONFIG [--output PATH]
    autosketch selftest

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Failures
print one JSON object on stderr, e.g.
``{"error": "config", "message": "...", "keys": ["fme.n"]}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .experiments import (
    FEDOPT_COLUMNS,
    FME_COLUMNS,
    GENIE_COLUMNS,
    SUMMARY_COLUMNS,
    RunFailure,
    run_fedopt_experiment,
    run_fme_experiment,
    run_sweep,
    write_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(kind: str, message: str, code: int, keys=None) -> int:
    payload = {"error": kind, "message": message}
    if keys is not None:
        payload["keys"] = list(keys)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def sibling(path: str, suffix: str) -> Path:
    """``runs/out.csv`` -> ``runs/out_<suffix>.csv``."""
    p = Path(path)
    return p.with_name(f"{p.stem}_{suffix}{p.suffix or '.csv'}")


def _run(mode: str, args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        return _fail("config", f"cannot read {args.config}: {exc.strerror}", EXIT_CONFIG, [])
    try:
        cfg = parse_config(text, mode)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, exc.keys)
    if args.output:
        cfg.output = args.output

    try:
        if mode == "fme":
            write_csv(cfg.output, FME_COLUMNS, run_fme_experiment(cfg))
        elif mode == "fedopt":
            write_csv(cfg.output, FEDOPT_COLUMNS, run_fedopt_experiment(cfg))
        else:
            rows, summary, genie = run_sweep(cfg)
            write_csv(cfg.output, SUMMARY_COLUMNS, summary)
            write_csv(sibling(cfg.output, "rounds"), FEDOPT_COLUMNS, rows)
            if cfg.genie:
                write_csv(sibling(cfg.output, "genie"), GENIE_COLUMNS, genie)
    except RunFailure as exc:
        write_csv(cfg.output, FEDOPT_COLUMNS, exc.rows)
        return _fail("runtime", str(exc), EXIT_RUNTIME)
    except (ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    print(f"wrote {cfg.output}")
    return EXIT_OK


def _selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(verbose=not args.quiet)
    if failures:
        return _fail("runtime", f"{failures} selftest check(s) failed", EXIT_RUNTIME)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autosketch", description="Adaptive sketching for private federated learning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("fme", "run a federated mean estimation experiment"),
                            ("fedopt", "run federated training"),
                            ("sweep", "run a grid of federated training runs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="INI config file")
        p.add_argument("--output", help="override experiment.output")
    p = sub.add_parser("selftest", help="run fast invariant checks")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which matches EXIT_CONFIG
        return int(exc.code or 0)
    if args.command == "selftest":
        return _selftest(args)
    return _run(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
