"""EPT hierarchies: guest-physical -> host-physical with per-page R/W/X bits.

Interior levels (PML4, PDPT, PD) always allow everything; permissions are
enforced at the PT leaf only. A hierarchy is built once as a 1:1 identity map
over guest-physical memory and afterwards only leaves are rewritten.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .common import PAGE_MASK, PAGE_SHIFT, PAGE_SIZE, Access
from .errors import OverlappingRanges, Uncovered
from .memory import HostPhysicalMemory

EPT_R = 1 << 0
EPT_W = 1 << 1
EPT_X = 1 << 2
EPT_RWX = EPT_R | EPT_W | EPT_X
PFN_MASK = ((1 << 40) - 1) << PAGE_SHIFT
ENTRIES = 512

_ACCESS_BIT = {Access.READ: EPT_R, Access.WRITE: EPT_W, Access.EXECUTE: EPT_X}

Rwx = tuple[bool, bool, bool]


class ViewKind(enum.Enum):
    NORMAL = "Normal"
    MONITOR = "Monitor"


class PageClass(enum.Enum):
    SRC = "SRC"
    DST = "DST"
    OTH = "OTH"


# Leaf permissions (R, W, X) for each view and page class.
VIEW_TABLE: dict[ViewKind, dict[PageClass, Rwx]] = {
    ViewKind.NORMAL: {
        PageClass.SRC: (True, True, False),
        PageClass.DST: (True, True, True),
        PageClass.OTH: (True, True, True),
    },
    ViewKind.MONITOR: {
        PageClass.SRC: (True, True, True),
        PageClass.DST: (False, False, False),
        PageClass.OTH: (True, True, False),
    },
}


@dataclass(frozen=True)
class EptEntry:
    read_allowed: bool
    write_allowed: bool
    execute_allowed: bool
    pfn: int

    def encode(self) -> int:
        raw = (self.pfn << PAGE_SHIFT) & PFN_MASK
        if self.read_allowed:
            raw |= EPT_R
        if self.write_allowed:
            raw |= EPT_W
        if self.execute_allowed:
            raw |= EPT_X
        return raw

    @classmethod
    def decode(cls, raw: int) -> EptEntry:
        return cls(bool(raw & EPT_R), bool(raw & EPT_W), bool(raw & EPT_X), (raw & PFN_MASK) >> PAGE_SHIFT)

    @property
    def rwx(self) -> Rwx:
        return (self.read_allowed, self.write_allowed, self.execute_allowed)


@dataclass(frozen=True)
class EptViolation:
    """Raised (returned) when the leaf bit for ``access`` is clear.

    ``va`` and ``size`` are the guest-linear address and byte count of the
    access, which real hardware also reports on an EPT violation.
    """

    gpa: int
    access: Access
    rip: int = 0
    va: int = 0
    size: int = 1


def radix_table_count(frames: int) -> int:
    """Tables a 4-level radix tree needs to hold ``frames`` leaves."""
    pts = -(-frames // ENTRIES)
    pds = -(-pts // ENTRIES)
    pdpts = -(-pds // ENTRIES)
    return pts + pds + pdpts + 1


class EptHierarchy:
    def __init__(self, memory: HostPhysicalMemory, kind: ViewKind, guest_phys_size: int):
        if guest_phys_size <= 0 or guest_phys_size % PAGE_SIZE:
            raise ValueError(f"guest_phys_size must be a positive multiple of {PAGE_SIZE}")
        self.memory = memory
        self.kind = kind
        self.span = guest_phys_size
        self._frames: list[int] = []
        self.root = self._new_table()

    def _new_table(self) -> int:
        frame = self.memory.alloc_frame()
        self._frames.append(frame)
        return frame

    def _leaf_address(self, gpa: int) -> int:
        if not 0 <= gpa < self.span:
            raise Uncovered(f"gpa {gpa:#x} beyond EPT span {self.span:#x}")
        table = self.root << PAGE_SHIFT
        for shift in (39, 30, 21):
            raw = self.memory.read_qword(table + ((gpa >> shift) & 511) * 8)
            table = raw & PFN_MASK
        return table + ((gpa >> 12) & 511) * 8

    def _fill_identity(self, leaf_rwx: int = EPT_RWX) -> None:
        mem = self.memory
        frames = self.span >> PAGE_SHIFT
        pml4 = self.root << PAGE_SHIFT
        pdpt = pd = None
        for g in range(frames):
            if g % (ENTRIES ** 3) == 0:
                pdpt = self._new_table() << PAGE_SHIFT
                mem.write_qword(pml4 + (g >> 27) * 8, pdpt | EPT_RWX)
            if g % (ENTRIES ** 2) == 0:
                pd = self._new_table() << PAGE_SHIFT
                mem.write_qword(pdpt + ((g >> 18) & 511) * 8, pd | EPT_RWX)
            if g % ENTRIES == 0:
                pt = self._new_table() << PAGE_SHIFT
                mem.write_qword(pd + ((g >> 9) & 511) * 8, pt | EPT_RWX)
            mem.write_qword(pt + (g & 511) * 8, (g << PAGE_SHIFT) | leaf_rwx)

    def leaf(self, gpa: int) -> EptEntry:
        return EptEntry.decode(self.memory.read_qword(self._leaf_address(gpa)))

    def translate(self, gpa: int, access: Access) -> int | EptViolation:
        raw = self.memory.read_qword(self._leaf_address(gpa))
        if not raw & _ACCESS_BIT[access]:
            return EptViolation(gpa, access)
        return (raw & PFN_MASK) | (gpa & PAGE_MASK)

    def resolve(self, gpa: int) -> int:
        """Host address of ``gpa`` ignoring permissions (hypervisor reads)."""
        return (self.memory.read_qword(self._leaf_address(gpa)) & PFN_MASK) | (gpa & PAGE_MASK)

    def set_access(self, gpa_page: int, r: bool, w: bool, x: bool) -> Rwx:
        entry_pa = self._leaf_address(gpa_page)
        raw = self.memory.read_qword(entry_pa)
        old = EptEntry.decode(raw)
        new = (raw & ~EPT_RWX) | (EPT_R if r else 0) | (EPT_W if w else 0) | (EPT_X if x else 0)
        self.memory.write_qword(entry_pa, new)
        return old.rwx

    def set_pfn(self, gpa_page: int, new_host_frame: int) -> int:
        entry_pa = self._leaf_address(gpa_page)
        raw = self.memory.read_qword(entry_pa)
        self.memory.write_qword(entry_pa, (raw & ~PFN_MASK) | ((new_host_frame << PAGE_SHIFT) & PFN_MASK))
        return (raw & PFN_MASK) >> PAGE_SHIFT

    def table_frames(self) -> list[int]:
        return list(self._frames)

    def image(self) -> bytes:
        return b"".join(self.memory.frame_bytes(f) for f in self._frames)


def build_identity(memory: HostPhysicalMemory, guest_phys_size: int,
                   kind: ViewKind = ViewKind.NORMAL, leaf_rwx: Rwx = (True, True, True)) -> EptHierarchy:
    """Map every guest frame g to host frame g, R=W=X=1 unless ``leaf_rwx`` says otherwise."""
    r, w, x = leaf_rwx
    h = EptHierarchy(memory, kind, guest_phys_size)
    h._fill_identity((EPT_R if r else 0) | (EPT_W if w else 0) | (EPT_X if x else 0))
    return h


def translate(h: EptHierarchy, gpa: int, access: Access) -> int | EptViolation:
    return h.translate(gpa, access)


def set_access(h: EptHierarchy, gpa_page: int, r: bool, w: bool, x: bool) -> Rwx:
    return h.set_access(gpa_page, r, w, x)


def set_pfn(h: EptHierarchy, gpa_page: int, new_host_frame: int) -> int:
    return h.set_pfn(gpa_page, new_host_frame)


def configure_view(h: EptHierarchy, kind: ViewKind,
                   src_pages: Iterable[int], dst_pages: Iterable[int]) -> None:
    """Rewrite every leaf's permissions per ``VIEW_TABLE`` for ``kind``."""
    src = {p & ~PAGE_MASK for p in src_pages}
    dst = {p & ~PAGE_MASK for p in dst_pages}
    both = src & dst
    if both:
        raise OverlappingRanges(f"pages both SRC and DST: {sorted(hex(p) for p in both)}")
    table = VIEW_TABLE[kind]
    oth = table[PageClass.OTH]
    for g in range(0, h.span, PAGE_SIZE):
        h.set_access(g, *oth)
    for p in src:
        h.set_access(p, *table[PageClass.SRC])
    for p in dst:
        h.set_access(p, *table[PageClass.DST])
    h.kind = kind
