import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eptmon.common import Access
from eptmon.errors import ConfigError, NoMapping
from eptmon.guest import (
    DEFAULT_PF_HANDLER, PF_VECTOR, FaultCause, GuestPageTables, GuestPte, Idt, PageFault, table_indices,
)
from eptmon.memory import FramePool, HostPhysicalMemory
from oracles import naive_guest_walk, radix_tables_for_span

RW = GuestPte(present=True, writable=True, dirty=True)
KBASE = 0xFFFFF80000000000


def make_tables(frames=1024, pool=(512, 1024)):
    mem = HostPhysicalMemory(frames)
    return mem, GuestPageTables(mem, FramePool(*pool), 512 * 4096)


class TestPte:
    @given(st.booleans(), st.booleans(), st.booleans(), st.booleans(), st.booleans(),
           st.integers(0, (1 << 40) - 1))
    def test_encode_decode(self, p, rw, d, a, nx, pfn):
        pte = GuestPte(p, rw, d, a, nx, pfn)
        assert GuestPte.decode(pte.encode()) == pte

    def test_bit_positions(self):
        raw = GuestPte(True, True, True, True, True, 0x123).encode()
        assert raw == (1 << 0) | (1 << 1) | (1 << 5) | (1 << 6) | (1 << 63) | (0x123 << 12)


class TestWalk:
    def test_indices(self):
        assert table_indices(0xFFFFF80002AD8C1C) == (0x1F0, 0x0, 0x15, 0xD8)

    def test_walk_preserves_offset_and_sets_ad(self):
        mem, t = make_tables()
        t.map_page(KBASE, 0x5000, GuestPte(present=True, writable=True, dirty=False))
        assert t.walk(KBASE + 0x123, Access.READ) == 0x5123
        pte = t.lookup(KBASE)
        assert pte.accessed and not pte.dirty
        t.set_pte_bits(KBASE, dirty=True)
        assert t.walk(KBASE + 7, Access.WRITE) == 0x5007
        pte = t.lookup(KBASE)
        assert pte.accessed and pte.dirty

    @pytest.mark.parametrize("flags,access,cause", [
        (GuestPte(), Access.READ, FaultCause.NOT_PRESENT),
        (GuestPte(present=True, writable=False, dirty=True), Access.WRITE, FaultCause.WRITE_TO_READ_ONLY),
        (GuestPte(present=True, writable=True, dirty=False), Access.WRITE, FaultCause.WRITE_TO_CLEAN),
        (GuestPte(present=True, no_execute=True), Access.EXECUTE, FaultCause.EXECUTE_NX),
    ])
    def test_fault_causes(self, flags, access, cause):
        _, t = make_tables()
        t.map_page(KBASE, 0x5000, flags)
        fault = t.walk(KBASE + 8, access, rip=0xFFFFF80000001000)
        assert fault == PageFault(KBASE + 8, cause, 0xFFFFF80000001000, access)

    def test_unmapped_interior_faults_not_present(self):
        _, t = make_tables()
        fault = t.walk(KBASE, Access.READ)
        assert isinstance(fault, PageFault) and fault.cause is FaultCause.NOT_PRESENT

    def test_lookup_and_resolve_are_pure(self):
        mem, t = make_tables()
        t.map_page(KBASE, 0x5000, GuestPte(present=True))
        before = t.table_image()
        assert t.resolve(KBASE + 1) == 0x5001
        assert t.lookup(KBASE).present
        assert t.table_image() == before

    def test_errors(self):
        _, t = make_tables()
        with pytest.raises(ConfigError):
            t.map_page(0x0000800000000000, 0, RW)  # non-canonical
        with pytest.raises(ConfigError):
            t.map_page(KBASE + 1, 0, RW)
        with pytest.raises(ConfigError):
            t.map_page(KBASE, 512 * 4096, RW)
        with pytest.raises(NoMapping):
            t.guest_inspect_pte(KBASE)
        with pytest.raises(ConfigError):
            t.walk(0x0000800000000000, Access.READ)

    def test_512_contiguous_pages_use_one_pt(self):
        _, t = make_tables()
        for i in range(512):
            t.map_page(KBASE + i * 4096, (i % 256) * 4096, RW)
        assert len(t.table_frames()) == radix_tables_for_span(512) == 4

    def test_513_pages_need_a_second_pt(self):
        _, t = make_tables()
        for i in range(513):
            t.map_page(KBASE + i * 4096, (i % 256) * 4096, RW)
        assert len(t.table_frames()) == radix_tables_for_span(513) == 5

    def test_walk_matches_naive_oracle_on_1000_random_mappings(self):
        rng = random.Random(7)
        mem, t = make_tables(frames=2048, pool=(512, 2048))
        vas = set()
        regions = [0x0000000000400000, 0x00007FFF00000000, KBASE, 0xFFFFFA8001800000]
        while len(vas) < 1000:
            vas.add(rng.choice(regions) + rng.randrange(1 << 18) * 4096)
        for va in sorted(vas):
            flags = GuestPte(present=rng.random() < 0.9, writable=True, dirty=True)
            gpa = rng.randrange(512) * 4096
            t.map_page(va, gpa, flags)
        raw = mem.snapshot()
        probes = list(vas) + [rng.randrange(1 << 47) for _ in range(200)]
        for va in probes:
            va_off = va | rng.randrange(4096) if va in vas else va
            expect = naive_guest_walk(raw, t.root_gpa, va_off)
            got = t.walk(va_off, Access.READ)
            if expect is None:
                assert isinstance(got, PageFault)
            else:
                assert got == expect[0]
                assert got % 4096 == va_off % 4096


class TestIdt:
    def test_default_and_rewrite(self):
        mem = HostPhysicalMemory(16)
        idt = Idt(mem, 3)
        assert idt.read_vector(PF_VECTOR) == DEFAULT_PF_HANDLER
        before = idt.image()
        idt.write_vector(PF_VECTOR, 0x1234)
        assert idt.image() != before
        assert mem.read_qword(3 * 4096 + PF_VECTOR * 8) == 0x1234


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 255)), min_size=1, max_size=40))
def test_written_leaf_is_what_walk_uses(pairs):
    _, t = make_tables()
    final = {}
    for page, frame in pairs:
        t.map_page(KBASE + page * 4096, frame * 4096, RW)
        final[page] = frame
    for page, frame in final.items():
        assert t.walk(KBASE + page * 4096 + 5, Access.READ) == frame * 4096 + 5
