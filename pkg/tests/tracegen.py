"""Random scenario and trace generator for property and fuzz tests.

A scenario is a handful of contiguous VA pages, each given a role: SRC code,
DST data, or plain OTH. SRC and DST ranges are carved out of their pages at
byte granularity, so pages also hold OTH bytes; SRC and DST never share a
page. The guest maps every page up front.
"""

import random
from dataclasses import dataclass, field

from eptmon.common import Access
from eptmon.engine import AccessEvent, Load, MachineConfig, MapIn, MapOut, TlbFlush
from eptmon.ranges import AddressRange, Policy, RangeConfig

PAGE = 4096
BASE = 0xFFFFF80000100000
STACK = 0xFFFFF80000F00000
LOAD_BASE = 0xFFFFF80000800000
GPA_LIMIT = 0x60000  # data limit of a 1 MiB machine


@dataclass
class Scenario:
    machine: MachineConfig
    pages: list
    roles: dict
    src: list = field(default_factory=list)             # (start, end)
    dst: list = field(default_factory=list)             # (start, end, policy word)
    mapping: dict = field(default_factory=dict)         # va page -> gpa page
    setup: list = field(default_factory=list)

    def ranges(self) -> RangeConfig:
        return RangeConfig([AddressRange(s, e) for s, e in self.src],
                           [(AddressRange(s, e), Policy.parse(p)) for s, e, p in self.dst])


def _carve(rng, page, count):
    """Up to ``count`` disjoint sub-ranges of one page."""
    cuts = sorted(rng.sample(range(1, PAGE), 2 * count))
    out = []
    for i in range(count):
        lo, hi = cuts[2 * i], cuts[2 * i + 1]
        if rng.random() < 0.2:
            lo, hi = lo, lo + 1  # single byte
        out.append((page + lo, page + hi))
    if rng.random() < 0.25:
        out = [(page, page + PAGE)]
    return out


def make_scenario(rng, policies=("log",), cpus=None, backend="ept", n_pages=None):
    n_pages = n_pages or rng.randint(3, 6)
    pages = [BASE + i * PAGE for i in range(n_pages)]
    roles = {}
    order = ["src", "dst"] + [rng.choice(["src", "dst", "oth"]) for _ in range(n_pages - 2)]
    rng.shuffle(order)
    sc = Scenario(MachineConfig(backend, cpus or rng.randint(1, 2), 1), pages, roles)
    gpas = rng.sample(range(0x10000, GPA_LIMIT, PAGE), n_pages + 1)
    for page, role, gpa in zip(pages, order, gpas):
        roles[page] = role
        sc.mapping[page] = gpa
        sc.setup.append(MapIn(page, gpa))
        if role == "src":
            sc.src += _carve(rng, page, rng.randint(1, 2))
        elif role == "dst":
            sc.dst += [(s, e, rng.choice(policies)) for s, e in _carve(rng, page, rng.randint(1, 2))]
    sc.mapping[STACK] = gpas[-1]
    sc.setup.append(MapIn(STACK, gpas[-1]))
    return sc


def _in(ranges, va):
    return any(r[0] <= va < r[1] for r in ranges)


def _hits(ranges, va, n):
    return any(r[0] < va + n and va < r[1] for r in ranges)


def pick_rip(rng, sc, allow_dst_exec=False):
    """A SRC byte or an OTH byte; fetch spans stay clear of DST unless allowed."""
    if rng.random() < 0.55:
        s, e = rng.choice(sc.src)
        return rng.randrange(s, e)
    for _ in range(50):
        va = rng.choice(sc.pages) + rng.randrange(PAGE - 8)
        if _in(sc.src, va):
            continue
        if allow_dst_exec or not _hits(sc.dst, va, 8):
            return va
    s, e = rng.choice(sc.src)
    return rng.randrange(s, e)


def pick_target(rng, sc, size):
    if rng.random() < 0.5 and sc.dst:
        s, e, _ = rng.choice(sc.dst)
        va = rng.randrange(max(s - size + 1, s & ~0xFFF), e)
    else:
        va = rng.choice(sc.pages) + rng.randrange(PAGE)
    return min(va, (va & ~0xFFF) + PAGE - size)


def random_access(rng, sc, allow_dst_exec=False):
    cpu = rng.randrange(sc.machine.cpus)
    kind = rng.choice([Access.READ, Access.WRITE, Access.EXECUTE])
    size = rng.choice([1, 1, 2, 4, 8, rng.randint(1, 8)])
    rsp = STACK + rng.randrange(0, PAGE - 8, 8)
    if kind is Access.EXECUTE:
        if allow_dst_exec and sc.dst and rng.random() < 0.3:
            s, e, _ = rng.choice(sc.dst)
            rip = min(rng.randrange(s, e), (s & ~0xFFF) + PAGE - size)
        else:
            rip = pick_rip(rng, sc, allow_dst_exec)
            size = min(size, (rip & ~0xFFF) + PAGE - rip)
        return AccessEvent(cpu, kind, rip, rip, size, rsp=rsp)
    rip = pick_rip(rng, sc, allow_dst_exec)
    va = pick_target(rng, sc, size)
    data = bytes(rng.randrange(256) for _ in range(size)) if kind is Access.WRITE else b""
    return AccessEvent(cpu, kind, rip, va, size, data)


def access_trace(rng, sc, n=None, allow_dst_exec=False):
    n = n if n is not None else rng.randint(5, 40)
    return list(sc.setup) + [random_access(rng, sc, allow_dst_exec) for _ in range(n)]


def system_trace(rng, sc, n=None):
    """Accesses mixed with LOAD, MAPOUT/MAPIN relocation and TLBFLUSH."""
    n = n if n is not None else rng.randint(5, 40)
    events = list(sc.setup)
    free = [g for g in range(0x10000, GPA_LIMIT, PAGE) if g not in sc.mapping.values()]
    rng.shuffle(free)
    unmapped = set()
    loads = 0
    for _ in range(n):
        roll = rng.random()
        if roll < 0.08 and free:
            page = rng.choice(sc.pages)
            if page in unmapped:
                events.append(MapIn(page, free.pop()))
                unmapped.discard(page)
            else:
                events.append(MapOut(page))
                unmapped.add(page)
        elif roll < 0.12 and free:
            page = rng.choice([p for p in sc.pages if p not in unmapped] or sc.pages)
            events.append(MapIn(page, free.pop()))
            unmapped.discard(page)
        elif roll < 0.16:
            events.append(TlbFlush())
        elif roll < 0.18 and loads < 2:
            base = LOAD_BASE + loads * PAGE
            events.append(MapIn(base, free.pop() if free else 0x10000 - PAGE * (loads + 1)))
            events.append(Load(f"drv{loads}.sys", base, PAGE))
            loads += 1
        else:
            ev = random_access(rng, sc, allow_dst_exec=True)
            for _ in range(20):
                touched = {ev.rip & ~0xFFF, ev.target_va & ~0xFFF}
                if not touched & unmapped:
                    break
                ev = random_access(rng, sc, allow_dst_exec=True)
            else:
                continue
            events.append(ev)
    return events
