"""Command-line front end: run traces, symbolize logs, summarize reports, run demos."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .demo import DEMOS, run_demo
from .engine import BACKENDS, Engine
from .errors import ParseError, SimulatorError
from .formats import load_config, load_trace, parse_report
from .logkit import SymbolMap, symbolize, write_log

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_HALTED = 2

COUNTERS = ("accesses", "ept_violations", "mtf_exits", "page_faults", "view_switches")


def cmd_run(args) -> int:
    machine, ranges = load_config(args.config)
    if args.backend:
        machine = type(machine)(args.backend, machine.cpus, machine.phys_mib)
    report = Engine(machine, ranges).run(load_trace(args.trace))
    write_log(args.log, report.logs)
    Path(args.report).write_text(report.to_text(), encoding="utf-8", newline="\n")
    print(summary(parse_report(report.to_text())))
    if report.fault:
        print(f"error: {report.fault}", file=sys.stderr)
        return EXIT_ERROR
    if report.halted is not None:
        h = report.halted
        print(f"guest halted: vCPU {h.cpu} rip {h.rip:X} {h.access} {h.va:X} ({h.reason})")
        return EXIT_HALTED
    return EXIT_OK


def cmd_parse(args) -> int:
    symbols = SymbolMap.load(args.symbols) if args.symbols else SymbolMap()
    with open(args.log, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                print(symbolize(line, symbols, n))
    return EXIT_OK


def summary(report: dict[str, str], title: str | None = None) -> str:
    cpus = int(report.get("cpus", "0"))
    width = max(len(c) for c in COUNTERS)
    rows = [title] if title else []
    rows.append(f"{'':8}" + "".join(f"{c:>{width + 2}}" for c in COUNTERS))
    for cpu in range(cpus):
        rows.append(f"{'cpu' + str(cpu):8}" + "".join(
            f"{report.get(f'cpu{cpu}.{c}', '0'):>{width + 2}}" for c in COUNTERS))
    rows.append(f"{'total':8}" + "".join(f"{report.get(f'total.{c}', '0'):>{width + 2}}" for c in COUNTERS))
    accesses = int(report.get("total.accesses", "0"))
    exits = sum(int(report.get(f"total.{c}", "0")) for c in ("ept_violations", "mtf_exits", "page_faults"))
    ratio = exits / accesses if accesses else 0.0
    rows.append(f"exits={exits} accesses={accesses} exits_per_access={ratio:.4f} logs={report.get('logs', '0')}")
    return "\n".join(rows)


def cmd_report(args) -> int:
    for i, path in enumerate(args.reports):
        report = parse_report(Path(path).read_text(encoding="utf-8"))
        if i:
            print()
        print(summary(report, f"{path} (backend {report.get('backend', '?')})"))
    return EXIT_OK


def cmd_demo(args) -> int:
    result = run_demo(args.name, args.backend)
    for line in result.details:
        print(line)
    for rec_line in result.report.log_text().splitlines():
        print(rec_line)
    print(f"{args.name}: {result.verdict}")
    if not result.ok:
        return EXIT_ERROR
    return result.status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eptmon", description="Trace-driven EPT memory-access monitor simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a trace against a scenario config")
    p.add_argument("config")
    p.add_argument("trace")
    p.add_argument("-o", "--log", default="memorymon.log", help="raw log output (default: %(default)s)")
    p.add_argument("--report", default="memorymon.report", help="key=value report (default: %(default)s)")
    p.add_argument("--backend", choices=BACKENDS, help="override the config's backend")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("parse", help="symbolize a raw log")
    p.add_argument("log")
    p.add_argument("symbols", nargs="?", help="symbol map: '<base-hex> <size-hex> <name>' per line")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("report", help="print exit counters from one or more reports")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("demo", help="run a bundled scenario")
    p.add_argument("name", choices=DEMOS)
    p.add_argument("--backend", choices=BACKENDS)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, SimulatorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
