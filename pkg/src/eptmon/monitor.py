"""EPT controller: two views per vCPU and the five-step trap-and-log cycle.

Normal view traps execution of SRC pages. The first such exit switches the
vCPU to its Monitor view, where DST pages are fully closed and execution
anywhere outside SRC exits again. DST exits are logged (when the accessed
bytes really hit a DST range and the instruction pointer is in SRC), the
policy is applied, and the page is temporarily opened, possibly redirected
to the fake zero frame, for exactly one single-stepped instruction. The MTF
exit that follows restores the page and applies any deferred view switch.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

from .common import PAGE_SIZE, Access, page_base
from .ept import VIEW_TABLE, EptHierarchy, EptViolation, PageClass, ViewKind, build_identity
from .errors import OverlappingRanges, ProtocolViolation, SpuriousMtf
from .guest import GuestPageTables
from .logkit import LogRecord, make_access_record, make_exec_record
from .memory import HostPhysicalMemory
from .ranges import PolicyKind, RangeConfig, WriteAction, pages_of
from .v2p import Delta, V2PMap


@dataclass
class CpuCounters:
    accesses: int = 0
    ept_violations: int = 0
    mtf_exits: int = 0
    page_faults: int = 0
    view_switches: int = 0
    to_monitor: int = 0  # SRC execution entered the monitor view
    to_normal: int = 0   # left SRC, or after an execute on DST

    @property
    def exits(self) -> int:
        return self.ept_violations + self.mtf_exits + self.page_faults


class ExitKind(enum.Enum):
    EPT_VIOLATION = "EptViolation"
    MTF = "MtfExit"


@dataclass(frozen=True)
class VmExit:
    kind: ExitKind
    rip: int
    rsp: int = 0
    violation: EptViolation | None = None
    write_data: bytes = b""

    def __post_init__(self):
        if (self.kind is ExitKind.MTF) != (self.violation is None):
            raise ValueError("MTF exits carry no violation; EPT exits must carry one")


class ActionKind(enum.Enum):
    SWITCH_TO_MONITOR_AND_RETRY = "SwitchToMonitorAndRetry"
    SWITCH_TO_NORMAL_AND_RETRY = "SwitchToNormalAndRetry"
    SINGLE_STEP_THEN_RESTORE = "SingleStepThenRestore"
    HALT_GUEST = "HaltGuest"
    DENY_AND_SKIP = "DenyAndSkip"
    RESUME = "Resume"


@dataclass(frozen=True)
class HaltReport:
    cpu: int
    rip: int
    va: int
    access: Access
    reason: str


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    halt: HaltReport | None = None


_SWITCH_MONITOR = Action(ActionKind.SWITCH_TO_MONITOR_AND_RETRY)
_SWITCH_NORMAL = Action(ActionKind.SWITCH_TO_NORMAL_AND_RETRY)
_STEP = Action(ActionKind.SINGLE_STEP_THEN_RESTORE)
_DENY = Action(ActionKind.DENY_AND_SKIP)
_RESUME = Action(ActionKind.RESUME)


@dataclass(frozen=True)
class PendingRestore:
    view: ViewKind
    gpa_page: int
    saved_rwx: tuple[bool, bool, bool]
    saved_pfn: int | None = None


@dataclass
class MonitorState:
    cpu: int
    normal: EptHierarchy
    monitor: EptHierarchy
    view: ViewKind = ViewKind.NORMAL
    pending_restore: list[PendingRestore] = field(default_factory=list)
    switch_after_step: ViewKind | None = None

    @property
    def mtf_armed(self) -> bool:
        return bool(self.pending_restore)

    @property
    def active(self) -> EptHierarchy:
        return self.hierarchy(self.view)

    def hierarchy(self, view: ViewKind) -> EptHierarchy:
        return self.normal if view is ViewKind.NORMAL else self.monitor


class EptController:
    def __init__(self, memory: HostPhysicalMemory, guest_phys_size: int, cpus: int,
                 cfg: RangeConfig, tables: GuestPageTables,
                 counters: list[CpuCounters] | None = None,
                 log: list[LogRecord] | None = None):
        self.memory = memory
        self.cfg = cfg
        self.tables = tables
        self.counters = counters if counters is not None else [CpuCounters() for _ in range(cpus)]
        self.log = log if log is not None else []
        self.states: list[MonitorState] = []
        for cpu in range(cpus):
            normal = build_identity(memory, guest_phys_size, ViewKind.NORMAL)
            # the same leaves configure_view(monitor, MONITOR, (), ()) would produce
            monitor = build_identity(memory, guest_phys_size, ViewKind.MONITOR,
                                     VIEW_TABLE[ViewKind.MONITOR][PageClass.OTH])
            self.states.append(MonitorState(cpu, normal, monitor))
        self.fake_frame = memory.alloc_frame()
        self.v2p = V2PMap(tables)
        self._refs: dict[PageClass, Counter[int]] = {PageClass.SRC: Counter(), PageClass.DST: Counter()}
        for page in sorted(pages_of(r for r, _ in cfg.dst)):
            self.watch(page, PageClass.DST)
        for page in sorted(cfg.src_pages()):
            self.watch(page, PageClass.SRC)

    # -- watch bookkeeping -------------------------------------------------

    def page_class(self, gpa_page: int) -> PageClass:
        if self._refs[PageClass.DST][gpa_page]:
            return PageClass.DST
        if self._refs[PageClass.SRC][gpa_page]:
            return PageClass.SRC
        return PageClass.OTH

    def watched_pages(self, kind: PageClass) -> set[int]:
        return {p for p, n in self._refs[kind].items() if n > 0}

    def _retain(self, kind: PageClass, gpa_page: int, delta: int) -> None:
        before = self.page_class(gpa_page)
        refs = self._refs[kind]
        refs[gpa_page] += delta
        if refs[gpa_page] <= 0:
            del refs[gpa_page]
        if self._refs[PageClass.SRC][gpa_page] and self._refs[PageClass.DST][gpa_page]:
            raise OverlappingRanges(f"gpa page {gpa_page:#x} is both SRC and DST")
        after = self.page_class(gpa_page)
        if after is not before:
            for state in self.states:
                for view in ViewKind:
                    state.hierarchy(view).set_access(gpa_page, *VIEW_TABLE[view][after])

    def watch(self, va_page: int, kind: PageClass) -> None:
        va_page = page_base(va_page)
        known = self.v2p.get(va_page, kind) is not None
        entry = self.v2p.register(va_page, kind)
        if not known and entry.gpa_page is not None:
            self._retain(kind, entry.gpa_page, +1)

    def unwatch(self, va_page: int, kind: PageClass) -> None:
        entry = self.v2p.unregister(va_page, kind)
        if entry is not None and entry.gpa_page is not None:
            self._retain(kind, entry.gpa_page, -1)

    def watch_range_pages(self, pages, kind: PageClass) -> None:
        for page in sorted(pages):
            self.watch(page, kind)

    def apply_deltas(self, deltas: list[Delta]) -> None:
        for d in deltas:
            if d.old_gpa is not None:
                self._retain(d.kind, d.old_gpa, -1)
            if d.new_gpa is not None:
                self._retain(d.kind, d.new_gpa, +1)

    def on_tlb_flush(self) -> list[Delta]:
        deltas = self.v2p.on_tlb_flush()
        self.apply_deltas(deltas)
        return deltas

    def on_pf_completion(self, va_page: int) -> list[Delta]:
        deltas = self.v2p.on_pf_completion(va_page)
        self.apply_deltas(deltas)
        return deltas

    # -- views -------------------------------------------------------------

    def switch_view(self, state: MonitorState, to: ViewKind) -> None:
        if state.view is to:
            return
        state.view = to
        c = self.counters[state.cpu]
        c.view_switches += 1
        if to is ViewKind.MONITOR:
            c.to_monitor += 1
        else:
            c.to_normal += 1

    def read_guest(self, state: MonitorState, va: int, length: int) -> bytes | None:
        out = bytearray()
        while length:
            chunk = min(length, PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            gpa = self.tables.resolve(va)
            if gpa is None:
                return None
            out += self.memory.read_phys(state.active.resolve(gpa), chunk)
            va += chunk
            length -= chunk
        return bytes(out)

    def _open(self, state: MonitorState, gpa_page: int, fake: bool = False) -> None:
        h = state.active
        saved_rwx = h.set_access(gpa_page, True, True, True)
        saved_pfn = h.set_pfn(gpa_page, self.fake_frame) if fake else None
        state.pending_restore.append(PendingRestore(state.view, gpa_page, saved_rwx, saved_pfn))

    # -- exits -------------------------------------------------------------

    def on_ept_violation(self, state: MonitorState, exit: VmExit) -> Action:
        if exit.kind is not ExitKind.EPT_VIOLATION:
            raise ProtocolViolation(f"expected an EPT violation, got {exit.kind.value}")
        v = exit.violation
        page = page_base(v.gpa)
        cls = self.page_class(page)
        if state.view is ViewKind.NORMAL:
            # SRC execution enters the monitor view
            if v.access is Access.EXECUTE and cls is PageClass.SRC:
                self.switch_view(state, ViewKind.MONITOR)
                return _SWITCH_MONITOR
            raise ProtocolViolation(f"{v.access} violation on {cls.value} page {page:#x} in Normal view")

        if v.access is Access.EXECUTE:
            return self._monitor_execute(state, exit, page, cls)
        return self._monitor_data(state, exit, page, cls)

    def _monitor_execute(self, state: MonitorState, exit: VmExit, page: int, cls: PageClass) -> Action:
        v = exit.violation
        if cls is PageClass.SRC:
            raise ProtocolViolation(f"execute violation on SRC page {page:#x} in Monitor view")
        if cls is PageClass.DST:
            hit = self.cfg.dst_hit(v.va, v.size)
            if hit is not None:
                _, policy = hit
                pa = state.active.resolve(v.gpa)
                self.log.append(make_exec_record(
                    v.va, pa, exit.rsp, lambda va, n: self.read_guest(state, va, n), self.cfg.modules))
                self._open(state, page, fake=policy.kind is PolicyKind.READ_PROTECT)
                state.switch_after_step = ViewKind.NORMAL
                return _STEP
        if self.cfg.in_src(exit.rip):
            self._open(state, page)
            return _STEP
        if state.mtf_armed:
            raise ProtocolViolation("view switch requested inside a single-step window")
        # code outside SRC is not ours to follow
        self.switch_view(state, ViewKind.NORMAL)
        return _SWITCH_NORMAL

    def _monitor_data(self, state: MonitorState, exit: VmExit, page: int, cls: PageClass) -> Action:
        v = exit.violation
        if cls is not PageClass.DST:
            raise ProtocolViolation(f"{v.access} violation on {cls.value} page {page:#x} in Monitor view")
        hit = self.cfg.dst_hit(v.va, v.size)
        if hit is None or not self.cfg.in_src(exit.rip):
            # same page as a DST range but not its bytes (or not SRC code)
            self._open(state, page)
            return _STEP
        _, policy = hit
        if policy.kind is not PolicyKind.EXEC_WATCH:
            pa = state.active.resolve(v.gpa)
            if v.access is Access.READ:
                value = self.memory.read_phys(pa, v.size)
            else:
                value = exit.write_data
            self.log.append(make_access_record(v.access, exit.rip, v.va, pa, value))
        if policy.kind is PolicyKind.WRITE_PROTECT and v.access is Access.WRITE:
            if policy.write_protect_action is WriteAction.HALT:
                return Action(ActionKind.HALT_GUEST,
                              HaltReport(state.cpu, exit.rip, v.va, v.access, "write to write-protected range"))
            return _DENY
        self._open(state, page, fake=policy.kind is PolicyKind.READ_PROTECT)
        return _STEP

    def on_mtf_exit(self, state: MonitorState) -> Action:
        if not state.mtf_armed:
            raise SpuriousMtf(f"MTF exit on vCPU {state.cpu} with nothing armed")
        self.end_step(state)
        return _RESUME

    def end_step(self, state: MonitorState) -> None:
        """Restore every page opened for the current instruction."""
        for p in reversed(state.pending_restore):
            h = state.hierarchy(p.view)
            if p.saved_pfn is not None:
                h.set_pfn(p.gpa_page, p.saved_pfn)
                self.memory.zero_frame(self.fake_frame)
            h.set_access(p.gpa_page, *p.saved_rwx)
        state.pending_restore.clear()
        if state.switch_after_step is not None:
            self.switch_view(state, state.switch_after_step)
            state.switch_after_step = None
