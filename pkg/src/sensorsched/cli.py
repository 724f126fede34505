"""Command line entry point: ``sensorsched {solve,learn,verify}``.

Exit codes: 0 ok, 1 configuration error, 2 property failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .config import PRESETS, ExperimentConfig, load, load_preset, parse_config
from .errors import ConfigError, DivergentTail, NonConvergence, UnstableLadder

EXIT_OK, EXIT_CONFIG, EXIT_PROPERTY, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensorsched", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_source=True):
        src = p.add_mutually_exclusive_group(required=need_source)
        src.add_argument("--config", metavar="PATH", help="TOML experiment file")
        src.add_argument("--preset", choices=PRESETS)
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--workers", type=int, help="parallel worker processes")

    common(sub.add_parser("solve", help="solve the known-channel problem"))
    common(sub.add_parser("learn", help="run the configured learners over all seeds"))
    p = sub.add_parser("verify", help="run the structural property battery")
    common(p, need_source=False)
    p.add_argument("--inject-fault", action="store_true",
                   help="flip the sign of one monotonicity row (the battery must then fail)")
    return parser


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = load(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = parse_config({"problem": {"kind": "costly", "lam": 20.0}})
    if args.workers is not None and args.workers < 1:
        raise ConfigError("--workers", "must be >= 1")
    if args.seed is not None or args.out is not None or args.workers is not None:
        cfg = cfg.with_overrides(seed=args.seed, out=args.out, workers=args.workers)
    return cfg


def cmd_solve(cfg: ExperimentConfig, out: str | None) -> int:
    report = experiments.solve_report(cfg)
    print(experiments.format_solve(report))
    if out:
        experiments.write_solve(report, out)
    return EXIT_OK


def cmd_learn(cfg: ExperimentConfig) -> int:
    rows = experiments.learn(cfg)
    print(f"# config digest {cfg.digest}; outputs in {cfg.out}")
    for row in rows:
        print(f"{row['algorithm']:>16s} seed {row['seed']:>3}  J_e {row['J_e']:>12s}  "
              f"J_r {row['J_r']:>8s}  J_r_win {row['J_r_win']:>8s}  threshold {row['threshold'] or '-'}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, inject_fault: bool) -> int:
    results = experiments.verify_suite(cfg, fault_row=0 if inject_fault else None)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}  {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "solve":
            return cmd_solve(cfg, args.out)
        if args.command == "learn":
            return cmd_learn(cfg)
        return cmd_verify(cfg, args.inject_fault)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence, UnstableLadder, DivergentTail) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
