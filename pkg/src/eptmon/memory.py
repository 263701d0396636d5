"""Host physical memory: a flat, zero-initialized array of 4 KiB frames.

Everything that has bytes lives here: guest data, guest page tables, EPT
hierarchies and the hypervisor's fake zero frame. Frames are handed out by
monotonic allocators and never freed.
"""

from __future__ import annotations

import hashlib

from .common import PAGE_SIZE
from .errors import OutOfBounds, OutOfMemory

FRAME_SIZE = PAGE_SIZE
DEFAULT_FRAME_COUNT = 4096  # 16 MiB


class FramePool:
    """Monotonic allocator over the frame interval ``[start, stop)``."""

    def __init__(self, start: int, stop: int):
        if not 0 <= start <= stop:
            raise ValueError(f"bad frame interval [{start}, {stop})")
        self.start = start
        self.stop = stop
        self.next_free = start

    def alloc(self) -> int:
        if self.next_free >= self.stop:
            raise OutOfMemory(f"frame pool [{self.start}, {self.stop}) exhausted")
        frame = self.next_free
        self.next_free += 1
        return frame

    def __contains__(self, frame: int) -> bool:
        return self.start <= frame < self.stop

    @property
    def allocated(self) -> range:
        return range(self.start, self.next_free)


class HostPhysicalMemory:
    def __init__(self, frame_count: int = DEFAULT_FRAME_COUNT, first_free_frame: int = 0):
        if frame_count <= 0:
            raise ValueError("frame_count must be positive")
        self.frame_count = frame_count
        self._bytes = bytearray(frame_count * FRAME_SIZE)
        self._qwords = memoryview(self._bytes).cast("Q")
        self._pool = FramePool(first_free_frame, frame_count)

    @property
    def size(self) -> int:
        return self.frame_count * FRAME_SIZE

    @property
    def next_free_frame(self) -> int:
        return self._pool.next_free

    def _check(self, pa: int, length: int) -> None:
        if pa < 0 or length < 0 or pa + length > self.size:
            raise OutOfBounds(f"physical range [{pa:#x}, {pa + length:#x}) outside {self.size:#x} bytes")

    def read_phys(self, pa: int, length: int) -> bytes:
        self._check(pa, length)
        return bytes(self._bytes[pa:pa + length])

    def write_phys(self, pa: int, data: bytes) -> None:
        self._check(pa, len(data))
        self._bytes[pa:pa + len(data)] = data

    def alloc_frame(self) -> int:
        frame = self._pool.alloc()
        self.zero_frame(frame)
        return frame

    def zero_frame(self, frame: int) -> None:
        base = frame * FRAME_SIZE
        self._check(base, FRAME_SIZE)
        self._bytes[base:base + FRAME_SIZE] = bytes(FRAME_SIZE)

    def frame_bytes(self, frame: int) -> bytes:
        return self.read_phys(frame * FRAME_SIZE, FRAME_SIZE)

    # 8-byte aligned table entries; used by both page-table formats.
    def read_qword(self, pa: int) -> int:
        if pa & 7:
            raise ValueError(f"unaligned qword at {pa:#x}")
        self._check(pa, 8)
        return self._qwords[pa >> 3]

    def write_qword(self, pa: int, value: int) -> None:
        if pa & 7:
            raise ValueError(f"unaligned qword at {pa:#x}")
        self._check(pa, 8)
        self._qwords[pa >> 3] = value

    def snapshot(self) -> bytes:
        return bytes(self._bytes)

    def digest(self) -> str:
        """sha256 of all of host memory, without copying it."""
        return hashlib.sha256(self._bytes).hexdigest()
