"""Bundled, self-checking scenarios: integrity, confidentiality, hidden execution."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources

from .engine import Engine, MachineConfig, RunReport
from .formats import parse_config, parse_trace
from .logkit import LogKind, SymbolMap, symbolize_record
from .ranges import RangeConfig

DEMOS = ("integrity", "confidentiality", "hidden-exec")


@dataclass
class DemoResult:
    name: str
    ok: bool
    verdict: str
    details: list[str]
    report: RunReport

    @property
    def status(self) -> int:
        """Same contract as ``run``: 2 when the guest was halted."""
        return 2 if self.report.halted is not None else 0


def demo_text(name: str, suffix: str) -> str:
    return resources.files("eptmon.demos").joinpath(f"{name}{suffix}").read_text(encoding="utf-8")


def demo_inputs(name: str, backend: str | None = None) -> tuple[MachineConfig, RangeConfig, list]:
    if name not in DEMOS:
        raise ValueError(f"unknown demo {name!r}; choose from {', '.join(DEMOS)}")
    machine, ranges = parse_config(demo_text(name, ".cfg"))
    if backend is not None:
        machine = dataclasses.replace(machine, backend=backend)
    return machine, ranges, parse_trace(demo_text(name, ".trace"))


def run_demo(name: str, backend: str | None = None) -> DemoResult:
    machine, ranges, trace = demo_inputs(name, backend)
    engine = Engine(machine, ranges)
    report = engine.run(trace)
    check = {"integrity": _integrity, "confidentiality": _confidentiality, "hidden-exec": _hidden_exec}[name]
    return check(name, engine, engine.cfg, report)


def _dst_bytes(engine: Engine, ranges: RangeConfig) -> bytes:
    rng, _ = ranges.dst[0]
    gpa = engine.tables.resolve(rng.start)
    if gpa is None:  # the pf backend may hold the page not-present
        gpa = (engine.pf.watches[rng.start & ~0xFFF].saved_bits.pfn << 12) | (rng.start & 0xFFF)
    return engine.memory.read_phys(gpa, rng.end - rng.start)


def _integrity(name, engine, ranges, report) -> DemoResult:
    slot = _dst_bytes(engine, ranges)
    h = report.halted
    ok = h is not None and slot == bytes.fromhex("E0D2E30200F8FFFF")
    if h is not None:
        verdict = f"HALTED: write by rip {h.rip:X} to {h.va:X} stopped; slot still {slot.hex().upper()}"
    else:
        verdict = f"NOT HALTED: slot is now {slot.hex().upper()}"
    return DemoResult(name, ok, verdict, [], report)


def _confidentiality(name, engine, ranges, report) -> DemoResult:
    src_reads = [o for o in report.observations if ranges.in_src(o.rip)]
    other_reads = [o for o in report.observations if not ranges.in_src(o.rip)]
    secret = _dst_bytes(engine, ranges)
    ok = (bool(src_reads) and all(o.data == bytes(len(o.data)) for o in src_reads)
          and any(o.data == secret for o in other_reads) and any(secret))
    details = [f"{'SRC' if ranges.in_src(o.rip) else 'other'} reader {o.rip:X} saw {o.data.hex().upper()}"
               for o in report.observations]
    details.append(f"real frame holds {secret.hex().upper()}")
    verdict = "secret not disclosed" if ok else "SECRET DISCLOSED"
    return DemoResult(name, ok, verdict, details, report)


def _hidden_exec(name, engine, ranges, report) -> DemoResult:
    symbols = SymbolMap.parse(demo_text(name, ".sym"))
    hidden = [r for r in report.logs
              if r.kind is LogKind.EXEC and engine.cfg.module_containing(r.va) is None]
    details = [symbolize_record(r, symbols) for r in report.logs]
    ok = bool(hidden)
    verdict = (f"hidden execution detected: {len(hidden)} EXEC record(s) outside loaded modules"
               if ok else "no hidden execution observed")
    return DemoResult(name, ok, verdict, details, report)
