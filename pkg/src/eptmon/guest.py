"""Guest paging: x86-64 style 4-level tables (PML4 -> PDPT -> PD -> PT).

Tables live in guest-physical frames, which the EPT identity mapping places
at the same host frames, so the walker reads them straight from
``HostPhysicalMemory``. Only 4 KiB pages exist.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

from .common import PAGE_MASK, PAGE_SHIFT, PAGE_SIZE, Access, require_canonical
from .errors import ConfigError, NoMapping
from .memory import FramePool, HostPhysicalMemory

PTE_P = 1 << 0
PTE_RW = 1 << 1
PTE_A = 1 << 5
PTE_D = 1 << 6
PTE_NX = 1 << 63
PFN_MASK = ((1 << 40) - 1) << PAGE_SHIFT

_INTERIOR = PTE_P | PTE_RW
LEVELS = 4


def table_indices(va: int) -> tuple[int, int, int, int]:
    """PML4, PDPT, PD and PT indices of a virtual address."""
    return ((va >> 39) & 511, (va >> 30) & 511, (va >> 21) & 511, (va >> 12) & 511)


@dataclass(frozen=True)
class GuestPte:
    present: bool = False
    writable: bool = False
    dirty: bool = False
    accessed: bool = False
    no_execute: bool = False
    pfn: int = 0

    def encode(self) -> int:
        raw = (self.pfn << PAGE_SHIFT) & PFN_MASK
        if self.present:
            raw |= PTE_P
        if self.writable:
            raw |= PTE_RW
        if self.accessed:
            raw |= PTE_A
        if self.dirty:
            raw |= PTE_D
        if self.no_execute:
            raw |= PTE_NX
        return raw

    @classmethod
    def decode(cls, raw: int) -> GuestPte:
        return cls(
            present=bool(raw & PTE_P),
            writable=bool(raw & PTE_RW),
            dirty=bool(raw & PTE_D),
            accessed=bool(raw & PTE_A),
            no_execute=bool(raw & PTE_NX),
            pfn=(raw & PFN_MASK) >> PAGE_SHIFT,
        )


_PTE_FIELDS = frozenset(f.name for f in fields(GuestPte))


class FaultCause(enum.Enum):
    NOT_PRESENT = "NotPresent"
    WRITE_TO_CLEAN = "WriteToClean"
    WRITE_TO_READ_ONLY = "WriteToReadOnly"
    EXECUTE_NX = "ExecuteNX"


@dataclass(frozen=True)
class PageFault:
    """A modeled #PF. ``access`` plays the role of the hardware error code."""

    faulting_va: int
    cause: FaultCause
    saved_rip: int
    access: Access


class GuestPageTables:
    """One guest address space shared by every vCPU (a single CR3)."""

    def __init__(self, memory: HostPhysicalMemory, pool: FramePool, guest_phys_size: int):
        self.memory = memory
        self.pool = pool
        self.guest_phys_size = guest_phys_size
        self._frames: list[int] = []
        self.root_gpa = self._new_table()

    def _new_table(self) -> int:
        frame = self.pool.alloc()
        self.memory.zero_frame(frame)
        self._frames.append(frame)
        return frame << PAGE_SHIFT

    def _leaf_address(self, va: int, create: bool = False) -> int | None:
        table = self.root_gpa
        idx = table_indices(va)
        for level in range(LEVELS - 1):
            entry_pa = table + idx[level] * 8
            raw = self.memory.read_qword(entry_pa)
            if not raw & PTE_P:
                if not create:
                    return None
                child = self._new_table()
                self.memory.write_qword(entry_pa, child | _INTERIOR)
                table = child
            else:
                table = raw & PFN_MASK
        return table + idx[LEVELS - 1] * 8

    def map_page(self, va: int, gpa: int, flags: GuestPte) -> None:
        require_canonical(va)
        if va & PAGE_MASK or gpa & PAGE_MASK:
            raise ConfigError(f"map_page needs page-aligned addresses, got va={va:#x} gpa={gpa:#x}")
        if not 0 <= gpa < self.guest_phys_size:
            raise ConfigError(f"gpa {gpa:#x} outside guest-physical memory")
        entry_pa = self._leaf_address(va, create=True)
        pte = replace(flags, pfn=gpa >> PAGE_SHIFT)
        self.memory.write_qword(entry_pa, pte.encode())

    def set_pte_bits(self, va: int, **patch) -> GuestPte:
        """Change only the named leaf fields; returns the previous entry."""
        unknown = set(patch) - _PTE_FIELDS
        if unknown:
            raise TypeError(f"unknown PTE fields {sorted(unknown)}")
        entry_pa = self._require_leaf(va)
        old = GuestPte.decode(self.memory.read_qword(entry_pa))
        if patch:
            self.memory.write_qword(entry_pa, replace(old, **patch).encode())
        return old

    def write_pte(self, va: int, pte: GuestPte) -> None:
        self.memory.write_qword(self._require_leaf(va), pte.encode())

    def _require_leaf(self, va: int) -> int:
        require_canonical(va)
        entry_pa = self._leaf_address(va)
        if entry_pa is None:
            raise NoMapping(f"no leaf entry for {va:#x}")
        return entry_pa

    def guest_inspect_pte(self, va: int) -> GuestPte:
        """What guest code reading its own page tables observes."""
        return GuestPte.decode(self.memory.read_qword(self._require_leaf(va)))

    def lookup(self, va: int) -> GuestPte | None:
        """Side-effect-free leaf lookup; None when an interior level is absent."""
        entry_pa = self._leaf_address(va)
        if entry_pa is None:
            return None
        return GuestPte.decode(self.memory.read_qword(entry_pa))

    def resolve(self, va: int) -> int | None:
        """Hypervisor-side translation: no permission checks, no A/D updates."""
        pte = self.lookup(va)
        if pte is None or not pte.present:
            return None
        return (pte.pfn << PAGE_SHIFT) | (va & PAGE_MASK)

    def walk(self, va: int, access: Access, rip: int = 0) -> int | PageFault:
        require_canonical(va)
        entry_pa = self._leaf_address(va)
        raw = 0 if entry_pa is None else self.memory.read_qword(entry_pa)
        if not raw & PTE_P:
            return PageFault(va, FaultCause.NOT_PRESENT, rip, access)
        if access is Access.WRITE:
            if not raw & PTE_RW:
                return PageFault(va, FaultCause.WRITE_TO_READ_ONLY, rip, access)
            if not raw & PTE_D:
                return PageFault(va, FaultCause.WRITE_TO_CLEAN, rip, access)
        elif access is Access.EXECUTE and raw & PTE_NX:
            return PageFault(va, FaultCause.EXECUTE_NX, rip, access)
        updated = raw | PTE_A
        if access is Access.WRITE:
            updated |= PTE_D
        if updated != raw:
            self.memory.write_qword(entry_pa, updated)
        return (raw & PFN_MASK) | (va & PAGE_MASK)

    def table_frames(self) -> list[int]:
        return list(self._frames)

    def table_image(self) -> bytes:
        """Concatenated bytes of every guest page-table frame."""
        return b"".join(self.memory.frame_bytes(f) for f in self._frames)


PF_VECTOR = 14
DEFAULT_PF_HANDLER = 0xFFFFF80002A8BD00  # stands in for nt!KiTrap0E


class Idt:
    """Guest-resident interrupt table: one 8-byte handler address per vector."""

    VECTORS = 256

    def __init__(self, memory: HostPhysicalMemory, frame: int):
        self.memory = memory
        self.base = frame * PAGE_SIZE
        memory.zero_frame(frame)
        self.write_vector(PF_VECTOR, DEFAULT_PF_HANDLER)

    def read_vector(self, vector: int) -> int:
        return self.memory.read_qword(self.base + vector * 8)

    def write_vector(self, vector: int, handler: int) -> None:
        self.memory.write_qword(self.base + vector * 8, handler)

    def image(self) -> bytes:
        return self.memory.read_phys(self.base, self.VECTORS * 8)
