"""Command-line entry point: ``sdesim run`` and ``sdesim validate``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .experiment import effective_scenario, run_experiment
from .scenario import ScenarioError, bundled_scenarios, parse_scenario, resolve_scenario_text

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNRECOVERED = 3


def _load(ref: str):
    try:
        text = resolve_scenario_text(ref)
    except FileNotFoundError as exc:
        raise ScenarioError([str(exc)]) from None
    return parse_scenario(text)


def _report_errors(exc: ScenarioError) -> int:
    for err in exc.errors:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_INVALID


def cmd_validate(args) -> int:
    try:
        sc = _load(args.scenario)
    except ScenarioError as exc:
        return _report_errors(exc)
    print(f"ok: {sc.name}: {len(sc.nodes)} nodes, {len(sc.links)} links, "
          f"{len(sc.services)} services, {len(sc.workloads)} workloads, "
          f"{len(sc.events)} events")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        sc = _load(args.scenario)
    except ScenarioError as exc:
        return _report_errors(exc)
    sc = effective_scenario(sc, seed=args.seed,
                            duplication=False if args.no_duplication else None,
                            threshold=args.threshold)
    started = time.perf_counter()
    result = run_experiment(sc, args.out)
    m = result.metrics
    print(f"scenario {sc.name} seed {sc.seed}: {result.world.sim.events_processed} events "
          f"in {time.perf_counter() - started:.1f}s")
    if m.failure_time_seconds is not None:
        det = ("not detected" if m.detection_time_seconds is None
               else f"{m.detection_time_seconds:.3f}s")
        print(f"failure at {m.failure_time_seconds:.3f}s, detection {det}, "
              f"rto {m.rto_seconds:.3f}s{'' if m.recovered else ' (unrecovered)'}")
    print(f"rpo_lost_updates {m.rpo_lost_updates} of {m.critical_puts_acked} critical puts acked")
    print(f"outputs written to {args.out}")
    if m.recovered is False:
        return EXIT_UNRECOVERED
    return EXIT_OK


def cmd_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdesim",
                                description="Edge-switch disaster recovery simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its outputs")
    run.add_argument("--scenario", required=True, help="scenario file or bundled name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--no-duplication", action="store_true",
                     help="do not duplicate critical flows (baseline)")
    run.add_argument("--threshold", type=int, default=None,
                     help="override the detection threshold")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True, help="scenario file or bundled name")
    val.set_defaults(func=cmd_validate)

    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "threshold", None) is not None and args.threshold < 1:
        print("error: --threshold must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
