"""Command-line entry point: ``ebprde {diagnose,risk-check,table1} [options]``."""

from __future__ import annotations

import argparse
import sys

from .harness import COMMANDS, EXIT_CONFIG, ConfigError, build_config, read_config_file, run, write_outputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebprde", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="INI file with [run], [prior], [truth] and per-command sections")
    parser.add_argument("--case", dest="cases", help="comma-separated case ids (A-F)")
    parser.add_argument("--n-grid", dest="n_grid", help="comma-separated sample sizes")
    parser.add_argument("--h-policy", dest="h_policies", help="comma-separated thresholds: 1, log, n^0.25, n^0.5 or k")
    parser.add_argument("--reps", help="replications per (case, n)")
    parser.add_argument("--seed", help="master seed")
    parser.add_argument("--mode", choices=("known", "estimated"))
    parser.add_argument("--out", help="output path (default: stdout)")
    parser.add_argument("--nodes", help="Gauss-Hermite nodes for exact risk integrals")
    parser.add_argument("--rb-nodes", dest="rb_nodes", help="Gauss-Hermite nodes for the fission noise expectation")
    parser.add_argument("--format", choices=("csv", "json"))
    parser.add_argument("--scarce", choices=("auto", "on", "off"))
    parser.add_argument("--workers", help="worker processes (default 1)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(args.command, file_values, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run(cfg)
    try:
        write_outputs(cfg, result, sys.stdout)
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if result.failed_cells:
        print(f"{result.failed_cells} cell(s) failed", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
