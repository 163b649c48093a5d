"""Command line: run, check, fuzz and metrics."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .fuzz import check_seed
from .metrics import compare_metrics
from .oracles import check_scenario_serializable, leftovers, orphan_problems
from .runner import DEFAULT_STEP_LIMIT, Livelock, Runner
from .scenario import ScenarioError, load


def _run(args, path):
    sc = load(path)
    runner = Runner(sc, step_limit=args.step_limit, page_size=args.page_size,
                    retry_limit=args.retry_limit)
    result = runner.run()
    if args.trace:
        if args.trace == "-":
            sys.stdout.write(result.trace)
        else:
            Path(args.trace).write_text(result.trace)
    return result


def cmd_run(args) -> int:
    result = _run(args, args.scenario)
    for f in result.failures:
        print(f"FAIL {f}")
    c = result.counters()
    print(f"{result.scenario.name}: {result.steps} steps, "
          f"{c['remote_messages']} remote messages, {c['local_calls']} local calls, "
          f"{c['durable_writes']} durable page writes")
    print("ok" if result.ok else f"{len(result.failures)} expectation(s) failed")
    return 0 if result.ok else 1


def cmd_check(args) -> int:
    result = _run(args, args.scenario)
    problems = list(result.failures) + list(result.early_writes)
    problems += orphan_problems(result.engine)
    merged = len(result.engine.net.groups()) == 1
    if merged:
        problems += leftovers(result.engine)
    ser = check_scenario_serializable(result)
    if ser.ok:
        order = " ".join(str(t) for t in ser.order) or "(none committed)"
        print(f"serial witness: {order}")
        if ser.unchecked:
            print(f"not checked (several physical copies used): {', '.join(ser.unchecked)}")
    else:
        problems.append(ser.reason)
    for p in problems:
        print(f"FAIL {p}")
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 1


def cmd_fuzz(args) -> int:
    bad = 0
    for seed in range(args.seed, args.seed + args.count):
        out = check_seed(seed, step_limit=args.step_limit)
        if not out.ok:
            bad += 1
            print(f"seed {seed}: " + "; ".join(out.problems))
        elif args.verbose:
            print(f"seed {seed}: ok, witness {' '.join(out.order) or '-'}")
    print(f"{args.count - bad}/{args.count} seeds clean")
    return 0 if bad == 0 else 1


def cmd_metrics(args) -> int:
    base = _run(args, args.base)
    txn = _run(args, args.txn)
    for line in compare_metrics(base, txn).lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestxn", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--trace", metavar="PATH", help="write the trace here ('-' for stdout)")
    common.add_argument("--step-limit", type=int, default=DEFAULT_STEP_LIMIT)
    common.add_argument("--page-size", type=int, default=None, help="override the scenario's page size")
    common.add_argument("--retry-limit", type=int, default=None, help="override open retries")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", parents=[common], help="run a scenario and check its expectations")
    r.add_argument("scenario")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", parents=[common], help="run with all oracles enabled")
    c.add_argument("scenario")
    c.set_defaults(func=cmd_check)

    f = sub.add_parser("fuzz", parents=[common], help="random scenarios through every oracle")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--count", type=int, default=100)
    f.add_argument("-v", "--verbose", action="store_true")
    f.set_defaults(func=cmd_fuzz, step_limit=50_000)

    m = sub.add_parser("metrics", parents=[common], help="compare commit costs of two scenarios")
    m.add_argument("base")
    m.add_argument("txn")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return 2
    except Livelock as e:
        print(f"livelock: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
