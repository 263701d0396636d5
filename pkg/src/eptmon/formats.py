"""Line-oriented config, trace and report files.

Config::

    backend ept            # or pf
    cpus 2
    phys_mib 16
    src FFFFF80002A5A000 FFFFF80003000000
    dst FFFFF80002C4B000 FFFFF80002C4B008 writeprotect-halt

Trace (addresses hex without ``0x``; cpu and access size decimal; LOAD size hex)::

    R <cpu> <rip> <va> <size>
    W <cpu> <rip> <va> <size> <hexbytes>
    X <cpu> <rip> <size> <rsp>
    LOAD <name> <base> <size>
    MAPIN <vapage> <gpapage> <P><RW><NX>
    MAPOUT <vapage>
    TLBFLUSH

``#`` starts a comment in both formats.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .common import Access
from .engine import AccessEvent, Load, MachineConfig, MapIn, MapOut, TlbFlush, TraceEvent
from .errors import ConfigError, OverlappingRanges, ParseError
from .ranges import AddressRange, Policy, RangeConfig


def _lines(text: str):
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield n, raw, line.split()


def _hex(word: str, n: int, raw: str) -> int:
    if word.lower().startswith("0x"):
        raise ParseError(f"hex values are written without 0x: {word!r}", n, raw)
    try:
        return int(word, 16)
    except ValueError:
        raise ParseError(f"bad hex number {word!r}", n, raw) from None


def _dec(word: str, n: int, raw: str) -> int:
    try:
        return int(word, 10)
    except ValueError:
        raise ParseError(f"bad decimal number {word!r}", n, raw) from None


def _arity(parts: list[str], count: int, usage: str, n: int, raw: str) -> None:
    if len(parts) != count:
        raise ParseError(f"expected '{usage}'", n, raw)


def parse_config(text: str) -> tuple[MachineConfig, RangeConfig]:
    settings: dict = {}
    src: list[AddressRange] = []
    dst: list[tuple[AddressRange, Policy]] = []
    for n, raw, parts in _lines(text):
        key = parts[0].lower()
        try:
            if key == "backend":
                _arity(parts, 2, "backend ept|pf", n, raw)
                settings["backend"] = parts[1].lower()
            elif key in ("cpus", "phys_mib"):
                _arity(parts, 2, f"{key} N", n, raw)
                settings[key] = _dec(parts[1], n, raw)
            elif key == "src":
                _arity(parts, 3, "src <start> <end>", n, raw)
                src.append(AddressRange(_hex(parts[1], n, raw), _hex(parts[2], n, raw)))
            elif key == "dst":
                _arity(parts, 4, "dst <start> <end> <policy>", n, raw)
                dst.append((AddressRange(_hex(parts[1], n, raw), _hex(parts[2], n, raw)),
                            Policy.parse(parts[3])))
            else:
                raise ParseError(f"unknown directive {parts[0]!r}", n, raw)
        except ParseError:
            raise
        except ConfigError as exc:
            raise ParseError(str(exc), n, raw) from None
    try:
        machine = MachineConfig(**settings)
        ranges = RangeConfig(src, dst)
    except (ConfigError, OverlappingRanges) as exc:
        raise ParseError(str(exc)) from None
    return machine, ranges


def _flags(word: str, n: int, raw: str) -> tuple[bool, bool, bool]:
    if len(word) != 3 or set(word) - {"0", "1"}:
        raise ParseError(f"MAPIN flags are three 0/1 digits <P><RW><NX>, got {word!r}", n, raw)
    return word[0] == "1", word[1] == "1", word[2] == "1"


def parse_trace_line(parts: list[str], n: int, raw: str) -> TraceEvent:
    op = parts[0].upper()
    if op == "R":
        _arity(parts, 5, "R <cpu> <rip> <va> <size>", n, raw)
        return AccessEvent(_dec(parts[1], n, raw), Access.READ, _hex(parts[2], n, raw),
                           _hex(parts[3], n, raw), _dec(parts[4], n, raw))
    if op == "W":
        _arity(parts, 6, "W <cpu> <rip> <va> <size> <hexbytes>", n, raw)
        try:
            data = bytes.fromhex(parts[5])
        except ValueError:
            raise ParseError(f"bad hex bytes {parts[5]!r}", n, raw) from None
        return AccessEvent(_dec(parts[1], n, raw), Access.WRITE, _hex(parts[2], n, raw),
                           _hex(parts[3], n, raw), _dec(parts[4], n, raw), data)
    if op == "X":
        _arity(parts, 5, "X <cpu> <rip> <size> <rsp>", n, raw)
        rip = _hex(parts[2], n, raw)
        return AccessEvent(_dec(parts[1], n, raw), Access.EXECUTE, rip, rip,
                           _dec(parts[3], n, raw), rsp=_hex(parts[4], n, raw))
    if op == "LOAD":
        _arity(parts, 4, "LOAD <name> <base> <size>", n, raw)
        return Load(parts[1], _hex(parts[2], n, raw), _hex(parts[3], n, raw))
    if op == "MAPIN":
        _arity(parts, 4, "MAPIN <vapage> <gpapage> <P><RW><NX>", n, raw)
        present, writable, nx = _flags(parts[3], n, raw)
        return MapIn(_hex(parts[1], n, raw), _hex(parts[2], n, raw), present, writable, nx)
    if op == "MAPOUT":
        _arity(parts, 2, "MAPOUT <vapage>", n, raw)
        return MapOut(_hex(parts[1], n, raw))
    if op == "TLBFLUSH":
        _arity(parts, 1, "TLBFLUSH", n, raw)
        return TlbFlush()
    raise ParseError(f"unknown event {parts[0]!r}", n, raw)


def parse_trace(text: str) -> list[TraceEvent]:
    events = []
    for n, raw, parts in _lines(text):
        try:
            events.append(parse_trace_line(parts, n, raw))
        except ConfigError as exc:
            raise ParseError(str(exc), n, raw) from None
    return events


def format_event(ev: TraceEvent) -> str:
    if isinstance(ev, AccessEvent):
        if ev.kind is Access.READ:
            return f"R {ev.cpu} {ev.rip:X} {ev.target_va:X} {ev.size}"
        if ev.kind is Access.WRITE:
            return f"W {ev.cpu} {ev.rip:X} {ev.target_va:X} {ev.size} {ev.data.hex().upper()}"
        return f"X {ev.cpu} {ev.rip:X} {ev.size} {ev.rsp:X}"
    if isinstance(ev, Load):
        return f"LOAD {ev.name} {ev.base:X} {ev.size:X}"
    if isinstance(ev, MapIn):
        return f"MAPIN {ev.va_page:X} {ev.gpa_page:X} {int(ev.present)}{int(ev.writable)}{int(ev.no_execute)}"
    if isinstance(ev, MapOut):
        return f"MAPOUT {ev.va_page:X}"
    if isinstance(ev, TlbFlush):
        return "TLBFLUSH"
    raise TypeError(f"not a trace event: {ev!r}")


def format_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(format_event(e) + "\n" for e in events)


def format_config(machine: MachineConfig, ranges: RangeConfig) -> str:
    lines = [f"backend {machine.backend}", f"cpus {machine.cpus}", f"phys_mib {machine.phys_mib}"]
    lines += [f"src {r.start:X} {r.end:X}" for r in ranges.src]
    lines += [f"dst {r.start:X} {r.end:X} {p}" for r, p in ranges.dst]
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> tuple[MachineConfig, RangeConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def load_trace(path: str | Path) -> list[TraceEvent]:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


def parse_report(text: str) -> dict[str, str]:
    """Read a ``key=value`` report back into a dict."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        key, sep, value = raw.partition("=")
        if not sep or not key:
            raise ParseError("expected key=value", n, raw)
        out[key] = value
    return out
