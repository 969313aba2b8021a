"""Command line: ``mmfl run | compare | validate``.

Exit codes: 0 ok, 2 usage, 3 invalid config, 4 runtime failure,
5 expected ordering violated, 6 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as cfgmod
from . import experiment as ex

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORDERING, EXIT_IO = 0, 2, 3, 4, 5, 6

log = logging.getLogger("mmfl")


def _fail(category: str, message: str, code: int) -> int:
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def _load(path):
    try:
        cfg = cfgmod.load_config(path)
    except cfgmod.ConfigError as exc:
        return None, exc.errors
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        return None, [f"cannot read {path}: {exc}"]
    return cfg, cfgmod.validate(cfg)


def cmd_validate(args) -> int:
    cfg, errors = _load(args.config)
    if errors:
        for e in errors:
            print(f"  - {e}", file=sys.stderr)
        return _fail("config", f"{len(errors)} problem(s) in {args.config}", EXIT_CONFIG)
    print(f"ok: {args.config}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, errors = _load(args.config)
    if not errors:
        try:
            ex.parse_scenario(args.scenario)
        except ex.ScenarioError as exc:
            errors = [str(exc)]
    if errors:
        for e in errors:
            print(f"  - {e}", file=sys.stderr)
        return _fail("config", "refusing to run an invalid configuration", EXIT_CONFIG)
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
    if args.episodes is not None:
        cfg.episodes = args.episodes

    def progress(rep, ep, episode_log):
        log.info("rep %d episode %d reward %.4f", rep, ep, episode_log.cumulative_reward)

    try:
        record = ex.run_scenario(cfg, args.scenario, seed=args.seed, progress=progress)
    except cfgmod.ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    try:
        paths = ex.emit_metrics(record, args.out)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    acc = record.accuracy_curve()
    print(f"{record.label}: final accuracy {acc[-1]:.4f}, mean T_Int {sum(record.timing_curve()) / len(acc):.6g} s")
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        records = [ex.load_record(d) for d in args.runs]
        expect = None
        if args.expect:
            with open(args.expect) as fh:
                expect = json.load(fh)
            if isinstance(expect, dict):
                expect = [expect]
    except (OSError, KeyError, ValueError) as exc:
        return _fail("io", str(exc), EXIT_IO)
    try:
        summary = ex.compare_scenarios(records, expect)
    except ex.CompareError as exc:
        return _fail("compare", str(exc), EXIT_RUNTIME)
    print(summary.table())
    if summary.violations:
        return _fail("ordering", f"{len(summary.violations)} expected-ordering violation(s)", EXIT_ORDERING)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfl", description="Multi-model federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--scenario", required=True,
                     help=f"one of {', '.join(ex.SCENARIOS)}, optionally suffixed @<master id>")
    run.add_argument("--seed", type=int, default=None, help="master seed (default: config seed)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--repetitions", type=int, default=None)
    run.add_argument("--episodes", type=int, default=None)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare emitted runs")
    cmp_.add_argument("--runs", nargs="+", required=True)
    cmp_.add_argument("--expect", help="JSON file with expected orderings")
    cmp_.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", None) is not None and args.seed < 0:
        return _fail("config", "seed must be >= 0", EXIT_CONFIG)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
