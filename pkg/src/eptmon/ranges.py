"""SRC/DST range manager and image-load detector.

Ranges are half-open byte intervals of guest-virtual addresses. Everything not
in a SRC or DST range is OTH. Classification is byte-precise; ``pages_of``
bridges to the page granularity EPT works at.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Iterable

from .common import PAGE_SIZE, page_base, require_canonical
from .errors import ConfigError, OverlappingRanges


@dataclass(frozen=True, order=True)
class AddressRange:
    start: int
    end: int

    def __post_init__(self):
        if self.start >= self.end:
            raise ConfigError(f"empty or inverted range [{self.start:#x}, {self.end:#x})")

    @classmethod
    def at(cls, va: int, size: int = 1) -> AddressRange:
        """A fixed address, optionally widened to ``size`` bytes."""
        return cls(va, va + size)

    def __contains__(self, va: int) -> bool:
        return self.start <= va < self.end

    def overlaps(self, start: int, end: int) -> bool:
        return self.start < end and start < self.end

    def __str__(self) -> str:
        return f"[{self.start:X}, {self.end:X})"


class PolicyKind(enum.Enum):
    LOG = "log"
    READ_PROTECT = "readprotect"
    WRITE_PROTECT = "writeprotect"
    EXEC_WATCH = "execwatch"


class WriteAction(enum.Enum):
    HALT = "halt"
    DENY = "deny"


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind = PolicyKind.LOG
    write_protect_action: WriteAction = WriteAction.HALT

    @classmethod
    def parse(cls, word: str) -> Policy:
        word = word.lower()
        if word == "writeprotect-halt":
            return cls(PolicyKind.WRITE_PROTECT, WriteAction.HALT)
        if word == "writeprotect-deny":
            return cls(PolicyKind.WRITE_PROTECT, WriteAction.DENY)
        try:
            return cls(PolicyKind(word))
        except ValueError:
            raise ConfigError(f"unknown policy {word!r}") from None

    def __str__(self) -> str:
        if self.kind is PolicyKind.WRITE_PROTECT:
            return f"writeprotect-{self.write_protect_action.value}"
        return self.kind.value


LOG = Policy()


class RangeClass(enum.Enum):
    SRC = "SRC"
    DST = "DST"
    OTH = "OTH"


@dataclass(frozen=True)
class Classification:
    cls: RangeClass
    range: AddressRange | None = None
    policy: Policy | None = None


OTH = Classification(RangeClass.OTH)


@dataclass(frozen=True)
class Module:
    name: str
    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size


class _SortedRanges:
    """Disjoint ranges kept sorted by start for O(log n) lookups."""

    def __init__(self):
        self._starts: list[int] = []
        self._items: list[tuple[AddressRange, Policy | None]] = []

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def find_overlap(self, start: int, end: int) -> AddressRange | None:
        i = bisect.bisect_left(self._starts, end)
        if i and self._items[i - 1][0].overlaps(start, end):
            return self._items[i - 1][0]
        return None

    def add(self, rng: AddressRange, policy: Policy | None) -> None:
        i = bisect.bisect_left(self._starts, rng.start)
        self._starts.insert(i, rng.start)
        self._items.insert(i, (rng, policy))

    def lookup(self, va: int) -> tuple[AddressRange, Policy | None] | None:
        i = bisect.bisect_right(self._starts, va)
        if i and va in self._items[i - 1][0]:
            return self._items[i - 1]
        return None

    def first_overlap(self, start: int, end: int) -> tuple[AddressRange, Policy | None] | None:
        i = bisect.bisect_right(self._starts, start)
        if i and self._items[i - 1][0].overlaps(start, end):
            return self._items[i - 1]
        if i < len(self._items) and self._items[i][0].overlaps(start, end):
            return self._items[i]
        return None


class RangeConfig:
    """SRC ranges, DST ranges with their policies, and loaded modules."""

    def __init__(self, src: Iterable[AddressRange] = (),
                 dst: Iterable[tuple[AddressRange, Policy]] = ()):
        self._src = _SortedRanges()
        self._dst = _SortedRanges()
        self.modules: list[Module] = []
        for rng, policy in dst:
            self.add_dst(rng, policy)
        for rng in src:
            self.add_src(rng)

    @property
    def src(self) -> list[AddressRange]:
        return [r for r, _ in self._src]

    @property
    def dst(self) -> list[tuple[AddressRange, Policy]]:
        return [(r, p) for r, p in self._dst]

    def _check_new(self, rng: AddressRange) -> None:
        require_canonical(rng.start)
        require_canonical(rng.end - 1)
        for lst, label in ((self._src, "SRC"), (self._dst, "DST")):
            hit = lst.find_overlap(rng.start, rng.end)
            if hit is not None:
                raise OverlappingRanges(f"{rng} overlaps {label} range {hit}")

    def add_src(self, rng: AddressRange) -> None:
        self._check_new(rng)
        self._src.add(rng, None)

    def add_dst(self, rng: AddressRange, policy: Policy = LOG) -> None:
        self._check_new(rng)
        self._dst.add(rng, policy)

    def on_image_load(self, name: str, base: int, size: int) -> RangeConfig:
        """A freshly loaded driver becomes a SRC range."""
        self.add_src(AddressRange(base, base + size))
        self.modules.append(Module(name, base, size))
        return self

    def classify(self, va: int) -> Classification:
        hit = self._dst.lookup(va)
        if hit is not None:
            return Classification(RangeClass.DST, hit[0], hit[1])
        hit = self._src.lookup(va)
        if hit is not None:
            return Classification(RangeClass.SRC, hit[0])
        return OTH

    def in_src(self, va: int) -> bool:
        return self._src.lookup(va) is not None

    def dst_hit(self, va: int, size: int) -> tuple[AddressRange, Policy] | None:
        """First DST range intersecting the byte span ``[va, va + size)``."""
        return self._dst.first_overlap(va, va + size)

    def module_containing(self, addr: int) -> Module | None:
        for m in self.modules:
            if m.base <= addr < m.end:
                return m
        return None

    def src_pages(self) -> set[int]:
        return pages_of(self.src)

    def dst_pages(self) -> set[int]:
        return pages_of(r for r, _ in self._dst)

    def copy(self) -> RangeConfig:
        cfg = RangeConfig()
        for rng, pol in self._dst:
            cfg._dst.add(rng, pol)
        for rng, _ in self._src:
            cfg._src.add(rng, None)
        cfg.modules = list(self.modules)
        return cfg


def classify(cfg: RangeConfig, va: int) -> Classification:
    return cfg.classify(va)


def on_image_load(cfg: RangeConfig, name: str, base: int, size: int) -> RangeConfig:
    return cfg.on_image_load(name, base, size)


def pages_of(ranges: Iterable[AddressRange]) -> set[int]:
    """Minimal set of page addresses covering every byte of every range."""
    pages: set[int] = set()
    for rng in ranges:
        pages.update(range(page_base(rng.start), rng.end, PAGE_SIZE))
    return pages
