"""Command-line entry point: run, compare, gen-trace, validate."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ScenarioConfig, parse_bytes
from .errors import ConfigError, SimError
from .scenario import compare, run_scenario
from .workload import Pattern, Reserve, gen_trace, write_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("hugesim")


def _load(path, overrides):
    return ScenarioConfig.load(path, overrides or ())


def cmd_run(args) -> int:
    cfg = _load(args.config, args.set)
    res = run_scenario(cfg)
    if args.out:
        paths = res.write(args.out)
        log.info("wrote %s", ", ".join(sorted(paths.values())))
    sys.stdout.write(res.metrics.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [_load(p, args.set) for p in args.configs]
    _, csv_text, text = compare(cfgs, args.out)
    sys.stdout.write(csv_text if args.csv else text)
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    try:
        pattern = Pattern.parse(args.pattern)
        footprint = parse_bytes(args.footprint)
        base = parse_bytes(args.base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.accesses < 0:
        raise ConfigError("accesses must be non-negative")
    if footprint <= 0 or footprint % 4096 or base % 4096:
        raise ConfigError("footprint and base must be positive multiples of 4KB")
    ops = gen_trace(pattern, footprint, args.accesses, args.seed, base=base, pid=args.pid)
    head = [Reserve(args.pid, base, footprint)]
    out = open(args.output, "w", encoding="ascii") if args.output else sys.stdout
    try:
        write_trace(head, out)
        write_trace(ops, out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args.config, args.set)
    sys.stdout.write(f"ok: {cfg.label} ({cfg.policy_enum.value}, {cfg.memory >> 30}GB)\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hugesim", description="Multi-size page management simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override a config field, e.g. khugepaged.budget=4")

    r = sub.add_parser("run", help="run one scenario and print its metrics JSON")
    r.add_argument("config")
    r.add_argument("--out", help="directory for metrics JSON and CSV files")
    overrides(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several configs on the same trace")
    c.add_argument("configs", nargs="+")
    c.add_argument("--out", help="directory for per-run reports and the comparison table")
    c.add_argument("--csv", action="store_true", help="print CSV instead of an aligned table")
    overrides(c)
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-trace", help="write a synthetic access trace")
    g.add_argument("pattern", help="sequential | uniform | zipf:S")
    g.add_argument("--footprint", default="1GB")
    g.add_argument("--accesses", type=int, default=100_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--base", default="1GB")
    g.add_argument("--pid", type=int, default=1)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen_trace)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    overrides(v)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
