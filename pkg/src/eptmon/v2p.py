"""V2P map manager: keeps watched VA pages bound to their current GPA pages.

An entry whose guest leaf is not present is ``PENDING`` (None). Refresh
triggers are a TLB flush (re-walk everything) and the completion of a page-in
(re-walk one page). Each refresh reports deltas that the EPT controller turns
into unwatch/watch operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .common import page_base
from .ept import PageClass
from .guest import GuestPageTables

PENDING = None


@dataclass
class V2PEntry:
    va_page: int
    kind: PageClass
    gpa_page: int | None = PENDING


class Delta(NamedTuple):
    va_page: int
    kind: PageClass
    old_gpa: int | None
    new_gpa: int | None


class V2PMap:
    def __init__(self, tables: GuestPageTables):
        self.tables = tables
        self._entries: dict[tuple[int, PageClass], V2PEntry] = {}

    def _current(self, va_page: int) -> int | None:
        gpa = self.tables.resolve(va_page)
        return PENDING if gpa is None else page_base(gpa)

    def register(self, va_page: int, kind: PageClass) -> V2PEntry:
        va_page = page_base(va_page)
        key = (va_page, kind)
        entry = self._entries.get(key)
        if entry is None:
            entry = V2PEntry(va_page, kind, self._current(va_page))
            self._entries[key] = entry
        return entry

    def get(self, va_page: int, kind: PageClass) -> V2PEntry | None:
        return self._entries.get((page_base(va_page), kind))

    def unregister(self, va_page: int, kind: PageClass) -> V2PEntry | None:
        return self._entries.pop((page_base(va_page), kind), None)

    def _refresh(self, entry: V2PEntry) -> Delta | None:
        new = self._current(entry.va_page)
        if new == entry.gpa_page:
            return None
        delta = Delta(entry.va_page, entry.kind, entry.gpa_page, new)
        entry.gpa_page = new
        return delta

    def on_tlb_flush(self) -> list[Delta]:
        deltas = []
        for entry in self._entries.values():
            d = self._refresh(entry)
            if d is not None:
                deltas.append(d)
        return deltas

    def on_pf_completion(self, va_page: int) -> list[Delta]:
        """Re-walk one page (both kinds, if watched as both)."""
        va_page = page_base(va_page)
        deltas = []
        for kind in PageClass:
            entry = self._entries.get((va_page, kind))
            if entry is not None:
                d = self._refresh(entry)
                if d is not None:
                    deltas.append(d)
        return deltas

    def entries(self) -> list[V2PEntry]:
        return list(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)
