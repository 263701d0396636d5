"""Deterministic trace executor.

Each access event is one guest instruction: an instruction fetch at ``rip``
followed, for reads and writes, by the data access. Both go through the guest
walk and then the active EPT view of the issuing vCPU. #PFs go to the
page-fault backend when it is active; EPT violations go to the monitor. The
event is retried after every handled exit, and the single-step window opened
by the monitor (or the pf backend) closes when the event completes.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

from .common import PAGE_SIZE, Access, page_base, require_canonical, spans_one_page
from .ept import EptViolation, PageClass, ViewKind, build_identity
from .errors import ConfigError, NoMapping, OverlappingRanges, ProtocolViolation, TraceFault
from .guest import GuestPageTables, GuestPte, Idt, PageFault
from .logkit import LogRecord, format_raw
from .memory import FRAME_SIZE, FramePool, HostPhysicalMemory
from .monitor import ActionKind, CpuCounters, EptController, ExitKind, HaltReport, VmExit
from .pfmon import PfBackend, PfOutcome
from .ranges import AddressRange, RangeConfig, pages_of

BACKENDS = ("ept", "pf")


@dataclass(frozen=True)
class MachineConfig:
    backend: str = "ept"
    cpus: int = 1
    phys_mib: int = 16

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, not {self.backend!r}")
        if self.cpus < 1:
            raise ConfigError("cpus must be >= 1")
        if self.phys_mib < 1:
            raise ConfigError("phys_mib must be >= 1")

    @property
    def frame_count(self) -> int:
        return self.phys_mib * (1 << 20) // FRAME_SIZE

    @property
    def guest_frames(self) -> int:
        """Lower half of host memory is guest-physical; the rest is hypervisor-private."""
        return self.frame_count // 2

    @property
    def data_limit(self) -> int:
        """Guest-physical bytes available to MAPIN; the top quarter holds guest tables."""
        return (self.guest_frames - self.guest_frames // 4) * PAGE_SIZE


@dataclass(frozen=True)
class AccessEvent:
    cpu: int
    kind: Access
    rip: int
    target_va: int
    size: int
    data: bytes = b""
    rsp: int = 0

    def __post_init__(self):
        require_canonical(self.rip)
        require_canonical(self.target_va)
        if self.kind is Access.EXECUTE and self.target_va != self.rip:
            raise ConfigError("execute events target their own rip")
        if not 1 <= self.size <= 8:
            raise ConfigError(f"access size {self.size} outside 1..8")
        if self.kind is Access.WRITE and len(self.data) != self.size:
            raise ConfigError(f"write of {self.size} bytes carries {len(self.data)} data bytes")
        if not spans_one_page(self.target_va, self.size):
            raise ConfigError(f"access [{self.target_va:#x}, +{self.size}) crosses a page boundary")

    @classmethod
    def read(cls, cpu: int, rip: int, va: int, size: int) -> AccessEvent:
        return cls(cpu, Access.READ, rip, va, size)

    @classmethod
    def write(cls, cpu: int, rip: int, va: int, data: bytes) -> AccessEvent:
        return cls(cpu, Access.WRITE, rip, va, len(data), bytes(data))

    @classmethod
    def execute(cls, cpu: int, rip: int, size: int = 1, rsp: int = 0) -> AccessEvent:
        return cls(cpu, Access.EXECUTE, rip, rip, size, rsp=rsp)


@dataclass(frozen=True)
class Load:
    name: str
    base: int
    size: int


@dataclass(frozen=True)
class TlbFlush:
    pass


@dataclass(frozen=True)
class MapIn:
    va_page: int
    gpa_page: int
    present: bool = True
    writable: bool = True
    no_execute: bool = False


@dataclass(frozen=True)
class MapOut:
    va_page: int


TraceEvent = Union[AccessEvent, Load, TlbFlush, MapIn, MapOut]


@dataclass(frozen=True)
class Observation:
    """Bytes a guest read returned."""

    index: int
    cpu: int
    rip: int
    va: int
    data: bytes


@dataclass
class RunReport:
    backend: str
    cpus: int
    logs: list[LogRecord] = field(default_factory=list)
    counters: list[CpuCounters] = field(default_factory=list)
    halted: HaltReport | None = None
    fault: str | None = None
    observations: list[Observation] = field(default_factory=list)
    events: int = 0
    views: list[str] = field(default_factory=list)
    memory_digest: str = ""
    tables_digest: str = ""

    @property
    def totals(self) -> CpuCounters:
        t = CpuCounters()
        for c in self.counters:
            for name in vars(t):
                setattr(t, name, getattr(t, name) + getattr(c, name))
        return t

    def log_text(self) -> str:
        return "".join(format_raw(r) + "\n" for r in self.logs)

    def to_text(self) -> str:
        """Machine-readable report: one ``key=value`` per line."""
        lines = [f"backend={self.backend}", f"cpus={self.cpus}", f"events={self.events}",
                 f"halted={int(self.halted is not None)}"]
        if self.halted is not None:
            h = self.halted
            lines += [f"halt.cpu={h.cpu}", f"halt.rip={h.rip:X}", f"halt.va={h.va:X}",
                      f"halt.access={h.access}", f"halt.reason={h.reason}"]
        lines.append(f"fault={self.fault or ''}")
        for cpu, c in enumerate(self.counters):
            for name, value in vars(c).items():
                lines.append(f"cpu{cpu}.{name}={value}")
            if cpu < len(self.views):
                lines.append(f"cpu{cpu}.view={self.views[cpu]}")
        for name, value in vars(self.totals).items():
            lines.append(f"total.{name}={value}")
        lines.append(f"logs={len(self.logs)}")
        lines.append(f"log_digest={hashlib.sha256(self.log_text().encode()).hexdigest()}")
        for i, ob in enumerate(self.observations):
            lines.append(f"observed.{i}={ob.index},{ob.cpu},{ob.rip:X},{ob.va:X},{ob.data.hex().upper()}")
        lines += [f"memory_digest={self.memory_digest}", f"tables_digest={self.tables_digest}"]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Transition:
    """One monitor exit as seen from outside: state before, stimulus, state after.

    A state is ``(view, stepping, switch_pending)``; the stimulus is the exit
    kind plus, for EPT violations, the access and the class of the page.
    """

    cpu: int
    before: tuple
    exit: str
    access: str | None
    page_class: str | None
    action: str
    after: tuple


class _Step(enum.Enum):
    DONE = 0
    RETRY = 1
    SKIPPED = 2
    HALTED = 3


class Engine:
    MAX_RETRIES = 4

    def __init__(self, machine: MachineConfig = MachineConfig(), ranges: RangeConfig | None = None,
                 record_transitions: bool = False):
        self.machine = machine
        self.transitions: list[Transition] | None = [] if record_transitions else None
        self.cfg = ranges.copy() if ranges is not None else RangeConfig()
        guest_frames = machine.guest_frames
        self.guest_phys_size = guest_frames * PAGE_SIZE
        self.memory = HostPhysicalMemory(machine.frame_count, first_free_frame=guest_frames)
        self.guest_pool = FramePool(machine.data_limit // PAGE_SIZE, guest_frames)
        self.tables = GuestPageTables(self.memory, self.guest_pool, self.guest_phys_size)
        self.idt = Idt(self.memory, self.guest_pool.alloc())
        self.counters = [CpuCounters() for _ in range(machine.cpus)]
        self.log: list[LogRecord] = []
        self.observations: list[Observation] = []
        self.halted: HaltReport | None = None
        self.events = 0
        self.ept: EptController | None = None
        self.pf: PfBackend | None = None
        if machine.backend == "ept":
            self.ept = EptController(self.memory, self.guest_phys_size, machine.cpus, self.cfg,
                                     self.tables, self.counters, self.log)
        else:
            self.identity = build_identity(self.memory, self.guest_phys_size)
            self.pf = PfBackend(self.memory, self.tables, self.idt, self.cfg, self.guest_pool.alloc(), self.log)
            self.pf.install()

    # -- events ------------------------------------------------------------

    def step(self, event: TraceEvent) -> None:
        if self.halted is not None:
            raise ProtocolViolation("guest is halted")
        if isinstance(event, AccessEvent):
            self._access(event)
        elif isinstance(event, Load):
            self.cfg.on_image_load(event.name, event.base, event.size)
            if self.ept is not None:
                self.ept.watch_range_pages(pages_of([AddressRange(event.base, event.base + event.size)]),
                                           PageClass.SRC)
        elif isinstance(event, TlbFlush):
            if self.ept is not None:
                self.ept.on_tlb_flush()
        elif isinstance(event, MapIn):
            self._map_in(event)
        elif isinstance(event, MapOut):
            if self.pf is not None:
                self.pf.on_unmap(event.va_page)
            self.tables.set_pte_bits(event.va_page, present=False)
            if self.ept is not None:
                # unmapping invalidates the page's translation (invlpg)
                self.ept.on_pf_completion(event.va_page)
        else:
            raise TypeError(f"not a trace event: {event!r}")
        self.events += 1

    def _map_in(self, ev: MapIn) -> None:
        if not 0 <= ev.gpa_page < self.machine.data_limit:
            raise ConfigError(f"gpa page {ev.gpa_page:#x} outside guest data memory "
                              f"[0, {self.machine.data_limit:#x})")
        self.tables.map_page(ev.va_page, ev.gpa_page,
                             GuestPte(present=ev.present, writable=ev.writable, dirty=ev.writable,
                                      no_execute=ev.no_execute))
        if self.pf is not None:
            self.pf.on_map(ev.va_page)
        if self.ept is not None:
            self.ept.on_pf_completion(ev.va_page)

    def _access(self, ev: AccessEvent) -> None:
        if not 0 <= ev.cpu < self.machine.cpus:
            raise ConfigError(f"event for vCPU {ev.cpu} but machine has {self.machine.cpus}")
        c = self.counters[ev.cpu]
        c.accesses += 1
        phases = [(ev.rip, Access.EXECUTE, ev.size if ev.kind is Access.EXECUTE else 1)]
        if ev.kind is not Access.EXECUTE:
            phases.append((ev.target_va, ev.kind, ev.size))
        for _ in range(self.MAX_RETRIES + 1):
            outcome = self._attempt(ev, phases, c)
            if outcome is not _Step.RETRY:
                break
        else:
            raise ProtocolViolation(f"event did not complete after {self.MAX_RETRIES} retries: {ev}")
        if outcome is _Step.HALTED:
            return
        if self.ept is not None:
            state = self.ept.states[ev.cpu]
            if state.mtf_armed:
                if outcome is _Step.DONE:
                    c.mtf_exits += 1
                    before = self._state_key(state)
                    action = self.ept.on_mtf_exit(state)
                    self._record(state, before, ExitKind.MTF.value, None, None, action.kind.value)
                else:
                    self.ept.end_step(state)
        if self.pf is not None:
            self.pf.rearm()

    def _attempt(self, ev: AccessEvent, phases, c: CpuCounters) -> _Step:
        hosts = []
        for va, access, size in phases:
            gpa = self.tables.walk(va, access, ev.rip)
            if isinstance(gpa, PageFault):
                return self._page_fault(ev, gpa, size, c)
            if self.ept is not None:
                state = self.ept.states[ev.cpu]
                hpa = state.active.translate(gpa, access)
            else:
                hpa = self.identity.translate(gpa, access)
            if isinstance(hpa, EptViolation):
                c.ept_violations += 1
                violation = replace(hpa, rip=ev.rip, va=va, size=size)
                before = self._state_key(state)
                page_class = self.ept.page_class(page_base(gpa)).value
                action = self.ept.on_ept_violation(
                    state, VmExit(ExitKind.EPT_VIOLATION, ev.rip, ev.rsp, violation, ev.data))
                self._record(state, before, ExitKind.EPT_VIOLATION.value, access.value, page_class,
                             action.kind.value)
                if action.kind is ActionKind.HALT_GUEST:
                    self.halted = action.halt
                    return _Step.HALTED
                if action.kind is ActionKind.DENY_AND_SKIP:
                    return _Step.SKIPPED
                return _Step.RETRY
            hosts.append(hpa)
        if ev.kind is Access.READ:
            data = self.memory.read_phys(hosts[1], ev.size)
            self.observations.append(Observation(self.events, ev.cpu, ev.rip, ev.target_va, data))
        elif ev.kind is Access.WRITE:
            self.memory.write_phys(hosts[1], ev.data)
        return _Step.DONE

    @staticmethod
    def _state_key(state) -> tuple:
        pending = state.switch_after_step.value if state.switch_after_step is not None else None
        return (state.view.value, state.mtf_armed, pending)

    def _record(self, state, before, exit_kind, access, page_class, action) -> None:
        if self.transitions is not None:
            self.transitions.append(Transition(state.cpu, before, exit_kind, access, page_class,
                                               action, self._state_key(state)))

    def _page_fault(self, ev: AccessEvent, fault: PageFault, size: int, c: CpuCounters) -> _Step:
        if self.pf is None or not self.pf.handles(fault):
            raise TraceFault(f"unhandled #PF {fault.cause.value} at {fault.faulting_va:X} "
                             f"(rip {fault.saved_rip:X}, vCPU {ev.cpu})")
        c.page_faults += 1
        result = self.pf.pf_handle(fault, size, ev.data, ev.rsp)
        if result.outcome is PfOutcome.HALT:
            self.halted = HaltReport(ev.cpu, ev.rip, fault.faulting_va, result.access,
                                     "write to write-protected range")
            return _Step.HALTED
        if result.outcome is PfOutcome.BLOCK:
            return _Step.SKIPPED
        return _Step.RETRY

    # -- whole traces ------------------------------------------------------

    def run(self, trace: Iterable[TraceEvent]) -> RunReport:
        fault = None
        for i, event in enumerate(trace):
            if self.halted is not None:
                break
            try:
                self.step(event)
            except (TraceFault, ConfigError, NoMapping, OverlappingRanges) as exc:
                fault = f"event {i}: {exc}"
                break
        return self.report(fault)

    def report(self, fault: str | None = None) -> RunReport:
        views = [s.view.value for s in self.ept.states] if self.ept is not None else []
        return RunReport(
            backend=self.machine.backend,
            cpus=self.machine.cpus,
            logs=list(self.log),
            counters=[replace(c) for c in self.counters],
            halted=self.halted,
            fault=fault,
            observations=list(self.observations),
            events=self.events,
            views=views,
            memory_digest=self.memory.digest(),
            tables_digest=hashlib.sha256(self.tables.table_image()).hexdigest(),
        )

    def view_of(self, cpu: int) -> ViewKind | None:
        return self.ept.states[cpu].view if self.ept is not None else None


def run_trace(machine: MachineConfig, ranges: RangeConfig, trace: Iterable[TraceEvent]) -> RunReport:
    return Engine(machine, ranges).run(trace)
