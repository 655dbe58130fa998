"""Command line front end: ``mobility-ot <subcommand> --config cfg.json --out dir``.

Exit codes: 0 success, 1 study verdict failed, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor

from .config import load_config, parse_config
from .errors import ConfigError
from .selftest import run_selftest
from .studies import run_study, summary_line, write_report

STUDIES = ("distance", "geodesic", "gamma", "jko", "ftl")

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG = 0, 1, 2


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="mobility-ot",
                                     description="Discrete transport with nonlinear mobility.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STUDIES:
        p = sub.add_parser(name, help=f"run a {name} study")
        p.add_argument("--config", required=True, help="study configuration (JSON)")
        p.add_argument("--out", default=None, help="output directory for CSV and JSON")
        p.add_argument("--threads", type=int, default=1, help="worker threads across N_list")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p = sub.add_parser("selftest", help="run the embedded invariant suite")
    p.add_argument("--seed", type=int, default=0)
    return parser.parse_args(argv)


def run_subcommand(argv) -> int:
    args = _parse_args(argv)
    if args.command == "selftest":
        return EXIT_OK if run_selftest(args.seed) else EXIT_VERDICT
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed", "must fit in an unsigned 64-bit integer")
        raw = load_config(args.config)
        if raw.get("kind", args.command) != args.command:
            raise ConfigError("kind", f"config is for {raw['kind']!r}, not {args.command!r}")
        cfg = parse_config({**raw, "kind": args.command}, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            report = run_study(cfg, pool.map)
    else:
        report = run_study(cfg)
    if args.out:
        for path in write_report(report, args.out):
            print(f"wrote {path}")
    print(summary_line(report))
    for note in report.notes:
        print(f"note: {note}")
    return EXIT_OK if report.verdict else EXIT_VERDICT


def main(argv=None) -> int:
    return run_subcommand(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
