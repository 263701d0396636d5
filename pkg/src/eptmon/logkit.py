"""Log records, the raw ``MemoryMon.log`` line format, and the symbolizer.

Raw EXEC lines look like::

    [EXEC] *** VA = FFFFA800194A468, PA = 000000007fe89468, Return = FFFFF80002AD8C1C, ReturnBase = FFFFF80002A5A000

VA is printed without zero padding, PA as 16 lowercase digits, and the
return fields as 16 uppercase digits. READ/WRITE lines reuse the same prefix
and add the instruction pointer, size and the bytes involved.
"""

from __future__ import annotations

import bisect
import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .common import Access, canonicalize
from .errors import ParseError
from .ranges import Module


class LogKind(enum.Enum):
    EXEC = "EXEC"
    READ = "READ"
    WRITE = "WRITE"

    @property
    def access(self) -> Access:
        return {LogKind.EXEC: Access.EXECUTE, LogKind.READ: Access.READ, LogKind.WRITE: Access.WRITE}[self]

    @classmethod
    def for_access(cls, access: Access) -> LogKind:
        return {Access.EXECUTE: cls.EXEC, Access.READ: cls.READ, Access.WRITE: cls.WRITE}[access]


@dataclass(frozen=True)
class LogRecord:
    kind: LogKind
    va: int
    pa: int
    return_addr: int = 0
    return_base: int = 0
    src_rip: int = 0
    value: bytes = b""

    @property
    def triple(self) -> tuple[int, Access, int]:
        """(source, access type, destination); EXEC records are (va, Execute, va)."""
        return (self.src_rip, self.kind.access, self.va)

    @property
    def size(self) -> int:
        return len(self.value)


ReadGuest = Callable[[int, int], "bytes | None"]


def make_exec_record(rip: int, pa: int, rsp: int, read_guest: ReadGuest,
                     modules: Iterable[Module]) -> LogRecord:
    """EXEC record; the return address is the qword at RSP, 0 if unreadable."""
    raw = read_guest(rsp, 8)
    ret = int.from_bytes(raw, "little") if raw is not None and len(raw) == 8 else 0
    base = 0
    for m in modules:
        if m.base <= ret < m.end:
            base = m.base
            break
    return LogRecord(LogKind.EXEC, rip, pa, ret, base, src_rip=rip)


def make_access_record(access: Access, rip: int, va: int, pa: int, value: bytes) -> LogRecord:
    if access is Access.EXECUTE:
        raise ValueError("use make_exec_record for executions")
    return LogRecord(LogKind.for_access(access), va, pa, src_rip=rip, value=bytes(value))


def format_raw(record: LogRecord, strict: bool = False) -> str:
    va = f"{record.va:016X}" if strict else f"{record.va:X}"
    head = f"[{record.kind.value}] *** VA = {va}, PA = {record.pa:016x}"
    if record.kind is LogKind.EXEC:
        return f"{head}, Return = {record.return_addr:016X}, ReturnBase = {record.return_base:016X}"
    return f"{head}, RIP = {record.src_rip:016X}, Size = {record.size}, Value = {record.value.hex().upper()}"


_HEX = r"([0-9A-Fa-f]{1,16})"
_EXEC_RE = re.compile(
    rf"^\[EXEC\] \*\*\* VA = {_HEX}, PA = {_HEX}, Return = {_HEX}, ReturnBase = {_HEX}$")
_ACCESS_RE = re.compile(
    rf"^\[(READ|WRITE)\] \*\*\* VA = {_HEX}, PA = {_HEX}, RIP = {_HEX}, "
    r"Size = (\d+), Value = ((?:[0-9A-Fa-f]{2})*)$")


def parse_raw(line: str, line_no: int | None = None) -> LogRecord:
    text = line.rstrip("\r\n")
    m = _EXEC_RE.match(text)
    if m:
        va, pa, ret, base = (int(g, 16) for g in m.groups())
        return LogRecord(LogKind.EXEC, va, pa, ret, base, src_rip=va)
    m = _ACCESS_RE.match(text)
    if m:
        kind, va, pa, rip, size, value = m.groups()
        data = bytes.fromhex(value)
        if len(data) != int(size):
            raise ParseError(f"Size = {size} disagrees with {len(data)} value bytes", line_no, text)
        return LogRecord(LogKind(kind), int(va, 16), int(pa, 16), src_rip=int(rip, 16), value=data)
    raise ParseError("not a log record", line_no, text)


def read_log(path: str | Path) -> list[LogRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                records.append(parse_raw(line, n))
    return records


def write_log(path: str | Path, records: Iterable[LogRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(format_raw(r) + "\n")


@dataclass(frozen=True, order=True)
class Symbol:
    base: int
    size: int
    name: str

    @property
    def end(self) -> int:
        return self.base + self.size


class SymbolMap:
    """Sorted, non-overlapping ``(base, size, name)`` entries."""

    def __init__(self, entries: Iterable[Symbol] = ()):
        self.entries = sorted(entries)
        self._bases = [e.base for e in self.entries]
        for a, b in zip(self.entries, self.entries[1:]):
            if b.base < a.end:
                raise ParseError(f"symbols {a.name} and {b.name} overlap")

    @classmethod
    def parse(cls, text: str) -> SymbolMap:
        entries = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError("expected '<base-hex> <size-hex> <name>'", n, raw)
            try:
                base, size = int(parts[0], 16), int(parts[1], 16)
            except ValueError:
                raise ParseError("bad hex number", n, raw) from None
            if size <= 0:
                raise ParseError("symbol size must be positive", n, raw)
            entries.append(Symbol(base, size, parts[2]))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> SymbolMap:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def resolve(self, addr: int) -> str | None:
        i = bisect.bisect_right(self._bases, addr)
        if i:
            sym = self.entries[i - 1]
            if addr < sym.end:
                return f"{sym.name}+0x{addr - sym.base:x}"
        return None


def _with_symbol(text: str, addr: int, symbols: SymbolMap) -> str:
    name = symbols.resolve(addr)
    return f"{text} {name}" if name else text


def symbolize_record(record: LogRecord, symbols: SymbolMap) -> str:
    if record.kind is LogKind.EXEC:
        # the published raw VA column can lose a leading digit; recover the canonical form
        text = f"executed {canonicalize(record.va):x}, will return to {record.return_addr:x}"
        return _with_symbol(text, record.return_addr, symbols)
    verb = "read" if record.kind is LogKind.READ else "wrote"
    text = _with_symbol(f"{verb} {record.size} bytes at {record.va:x} by {record.src_rip:x}",
                        record.src_rip, symbols)
    return f"{text}, value {record.value.hex()}"


def symbolize(line: str, symbols: SymbolMap, line_no: int | None = None) -> str:
    return symbolize_record(parse_raw(line, line_no), symbols)
