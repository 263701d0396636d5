"""Legacy OS-resident monitoring: PTE bit manipulation plus a replaced #PF handler.

Reads (and executions) are trapped by clearing the present bit, writes by
clearing the dirty bit. The hook handler takes the saved instruction pointer
as the source and the faulting address as the destination; an execution is
recognised when the two are equal. After a permitted access the trap bit is
restored for one event and then cleared again.

The guest page tables and the IDT are really modified, so a guest inspecting
either one can tell the method is active, and every vCPU sees the change.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .common import PAGE_SHIFT, Access, page_base
from .errors import NoMapping, TraceFault
from .guest import PF_VECTOR, FaultCause, GuestPageTables, GuestPte, Idt, PageFault
from .logkit import LogRecord, make_access_record, make_exec_record
from .memory import HostPhysicalMemory
from .ranges import PolicyKind, RangeConfig, WriteAction, pages_of

PF_HOOK_HANDLER = 0xFFFFF88003F01000  # the monitoring driver's replacement handler


class PfMode(enum.Enum):
    READ_TRAP = "ReadTrap"    # P cleared
    WRITE_TRAP = "WriteTrap"  # D cleared
    EXEC_TRAP = "ExecTrap"    # P cleared


class PfOutcome(enum.Enum):
    SERVE_FAKE = "ServeFake"
    PERMIT = "Permit"
    BLOCK = "Block"
    HALT = "Halt"


@dataclass
class PfWatch:
    va_page: int
    mode: PfMode
    saved_bits: GuestPte


@dataclass(frozen=True)
class PfResult:
    outcome: PfOutcome
    access: Access
    record: LogRecord | None = None


class PfBackend:
    def __init__(self, memory: HostPhysicalMemory, tables: GuestPageTables, idt: Idt,
                 cfg: RangeConfig, fake_gpa_frame: int, log: list[LogRecord] | None = None):
        self.memory = memory
        self.tables = tables
        self.idt = idt
        self.cfg = cfg
        self.fake_frame = fake_gpa_frame
        self.log = log if log is not None else []
        self.watches: dict[int, PfWatch] = {}
        self.wanted: dict[int, PfMode] = {}
        self._stepping: list[tuple[int, bool]] = []
        self._saved_handler: int | None = None

    # -- installation ------------------------------------------------------

    def install(self) -> None:
        self._saved_handler = self.idt.read_vector(PF_VECTOR)
        self.idt.write_vector(PF_VECTOR, PF_HOOK_HANDLER)
        modes: dict[int, set[PolicyKind]] = {}
        for rng, policy in self.cfg.dst:
            for page in pages_of([rng]):
                modes.setdefault(page, set()).add(policy.kind)
        for page in sorted(modes):
            kinds = modes[page]
            if kinds == {PolicyKind.WRITE_PROTECT}:
                mode = PfMode.WRITE_TRAP
            elif kinds == {PolicyKind.EXEC_WATCH}:
                mode = PfMode.EXEC_TRAP
            else:
                mode = PfMode.READ_TRAP
            self.wanted[page] = mode
            self._activate(page)

    def uninstall(self) -> None:
        for page in list(self.watches):
            self.unprotect(page)
        self.wanted.clear()
        if self._saved_handler is not None:
            self.idt.write_vector(PF_VECTOR, self._saved_handler)
            self._saved_handler = None

    def _activate(self, va_page: int) -> None:
        pte = self.tables.lookup(va_page)
        if pte is None or not pte.present:
            return
        self._protect(va_page, self.wanted[va_page])

    def _protect(self, va_page: int, mode: PfMode) -> PfWatch:
        va_page = page_base(va_page)
        pte = self.tables.lookup(va_page)
        if pte is None or not pte.present:
            raise NoMapping(f"{va_page:#x} is not mapped")
        if mode is PfMode.WRITE_TRAP:
            saved = self.tables.set_pte_bits(va_page, dirty=False)
        else:
            saved = self.tables.set_pte_bits(va_page, present=False)
        watch = PfWatch(va_page, mode, saved)
        self.watches[va_page] = watch
        return watch

    def pf_protect_read(self, va_page: int) -> PfWatch:
        return self._protect(va_page, PfMode.READ_TRAP)

    def pf_protect_write(self, va_page: int) -> PfWatch:
        return self._protect(va_page, PfMode.WRITE_TRAP)

    def pf_protect_exec(self, va_page: int) -> PfWatch:
        return self._protect(va_page, PfMode.EXEC_TRAP)

    def unprotect(self, va_page: int) -> GuestPte:
        watch = self.watches.pop(page_base(va_page))
        self.tables.write_pte(watch.va_page, watch.saved_bits)
        return watch.saved_bits

    # guest remapping of a watched page
    def on_unmap(self, va_page: int) -> None:
        va_page = page_base(va_page)
        if va_page in self.watches:
            self.unprotect(va_page)

    def on_map(self, va_page: int) -> None:
        va_page = page_base(va_page)
        self.watches.pop(va_page, None)  # the new leaf replaced the trapped one
        if va_page in self.wanted:
            self._activate(va_page)

    # -- fault handling ----------------------------------------------------

    def handles(self, fault: PageFault) -> bool:
        watch = self.watches.get(page_base(fault.faulting_va))
        if watch is None or page_base(fault.faulting_va) in (p for p, _ in self._stepping):
            return False
        if watch.mode is PfMode.WRITE_TRAP:
            return fault.cause is FaultCause.WRITE_TO_CLEAN and watch.saved_bits.writable
        return fault.cause is FaultCause.NOT_PRESENT and watch.saved_bits.present

    def _read_guest(self, va: int, n: int) -> bytes | None:
        gpa = self.tables.resolve(va)
        if gpa is None or page_base(gpa) != page_base(gpa + n - 1):
            return None
        return self.memory.read_phys(gpa, n)

    def pf_handle(self, fault: PageFault, size: int = 1, data: bytes = b"", rsp: int = 0) -> PfResult:
        """Classify, log and decide; the engine then retries or stops the event."""
        if not self.handles(fault):
            raise TraceFault(f"unhandled #PF {fault.cause.value} at {fault.faulting_va:#x} rip={fault.saved_rip:#x}")
        watch = self.watches[page_base(fault.faulting_va)]
        va, rip = fault.faulting_va, fault.saved_rip
        access = Access.EXECUTE if rip == va else fault.access
        pa = (watch.saved_bits.pfn << PAGE_SHIFT) | (va & 0xFFF)

        hit = self.cfg.dst_hit(va, size)
        if access is not Access.EXECUTE and not self.cfg.in_src(rip):
            hit = None
        record = None
        outcome = PfOutcome.PERMIT
        if hit is not None:
            _, policy = hit
            if access is Access.EXECUTE:
                record = make_exec_record(va, pa, rsp, self._read_guest, self.cfg.modules)
            elif policy.kind is not PolicyKind.EXEC_WATCH:
                value = self.memory.read_phys(pa, size) if access is Access.READ else data
                record = make_access_record(access, rip, va, pa, value)
            if policy.kind is PolicyKind.READ_PROTECT:
                outcome = PfOutcome.SERVE_FAKE
            elif policy.kind is PolicyKind.WRITE_PROTECT and access is Access.WRITE:
                outcome = PfOutcome.HALT if policy.write_protect_action is WriteAction.HALT else PfOutcome.BLOCK
        if record is not None:
            self.log.append(record)
        if outcome is PfOutcome.PERMIT:
            self._open(watch, fake=False)
        elif outcome is PfOutcome.SERVE_FAKE:
            self._open(watch, fake=True)
        return PfResult(outcome, access, record)

    def _open(self, watch: PfWatch, fake: bool) -> None:
        if fake:
            self.tables.set_pte_bits(watch.va_page, present=True, writable=True, dirty=True, pfn=self.fake_frame)
        elif watch.mode is PfMode.WRITE_TRAP:
            self.tables.set_pte_bits(watch.va_page, dirty=True)
        else:
            self.tables.set_pte_bits(watch.va_page, present=True)
        self._stepping.append((watch.va_page, fake))

    def rearm(self) -> None:
        """Clear the trap bits again once the stepped event has completed."""
        for va_page, fake in reversed(self._stepping):
            watch = self.watches.get(va_page)
            if watch is None:
                continue
            saved = watch.saved_bits
            if fake:
                self.tables.set_pte_bits(va_page, present=False, writable=saved.writable,
                                         dirty=saved.dirty, pfn=saved.pfn)
                self.memory.zero_frame(self.fake_frame)
            elif watch.mode is PfMode.WRITE_TRAP:
                self.tables.set_pte_bits(va_page, dirty=False)
            else:
                self.tables.set_pte_bits(va_page, present=False)
        self._stepping.clear()


def detectable(tables: GuestPageTables, idt: Idt, va_page: int, baseline: GuestPte,
               baseline_handler: int) -> bool:
    """Guest-side check: has anyone touched my PTE or my #PF vector?"""
    pte = tables.guest_inspect_pte(va_page)
    return replace(pte, accessed=baseline.accessed) != baseline or idt.read_vector(PF_VECTOR) != baseline_handler
