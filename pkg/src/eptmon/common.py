"""Address helpers and the access-kind enum used by both translation layers."""

from __future__ import annotations

import enum

from .errors import ConfigError

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1

VA_BITS = 48
_LOW48 = (1 << VA_BITS) - 1
_HIGH16 = 0xFFFF << VA_BITS
U64_MASK = (1 << 64) - 1


class Access(enum.Enum):
    READ = "R"
    WRITE = "W"
    EXECUTE = "X"

    def __str__(self) -> str:
        return self.name.capitalize()


def page_base(addr: int) -> int:
    return addr & ~PAGE_MASK


def page_offset(addr: int) -> int:
    return addr & PAGE_MASK


def is_canonical(va: int) -> bool:
    if not 0 <= va <= U64_MASK:
        return False
    top = va >> (VA_BITS - 1)
    return top == 0 or top == (1 << (64 - VA_BITS + 1)) - 1


def canonicalize(value: int) -> int:
    """Sign-extend bit 47 over the upper 16 bits of a 64-bit value."""
    low = value & _LOW48
    if low >> (VA_BITS - 1):
        return low | _HIGH16
    return low


def require_canonical(va: int) -> int:
    if not is_canonical(va):
        raise ConfigError(f"non-canonical virtual address {va:#x}")
    return va


def spans_one_page(addr: int, size: int) -> bool:
    return size >= 1 and page_base(addr) == page_base(addr + size - 1)
