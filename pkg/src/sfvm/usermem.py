"""Sparse model of a process address space.

Memory exists in 4096-byte pages mapped on demand.  Each page carries
three permissions:

  writable          page-table write permission; read-only pages
                    (argument staging regions) refuse all stores
  user_accessible   readable through the user-access helpers
  may_write         whether simulated application writers may target
                    the page; cleared on pages the snapshot layer owns

Writes report a status instead of raising, because the interesting
outcomes are the non-OK ones: a STALL means the page is currently
write-protected by an in-progress argument snapshot and the writer must
retry after release, which is exactly the window a time-of-check attack
needs closed.
"""

from __future__ import annotations

from enum import Enum

PAGE_SIZE = 4096
PAGE_SHIFT = 12


class WriteStatus(Enum):
    OK = "ok"
    STALL = "stall"
    FAULT = "fault"
    DENIED = "denied"


class _Page:
    __slots__ = ("data", "writable", "user_accessible", "may_write")

    def __init__(self, writable=True, user_accessible=True, may_write=True):
        self.data = bytearray(PAGE_SIZE)
        self.writable = writable
        self.user_accessible = user_accessible
        self.may_write = may_write


def page_base(addr: int) -> int:
    return addr & ~(PAGE_SIZE - 1)


def pages_spanning(addr: int, size: int):
    """Bases of every page touched by [addr, addr+size)."""
    if size <= 0:
        return []
    first = page_base(addr)
    last = page_base(addr + size - 1)
    return list(range(first, last + 1, PAGE_SIZE))


class UserMemory:
    def __init__(self):
        self._pages: dict[int, _Page] = {}
        self._protected: set[int] = set()

    # -- mapping -------------------------------------------------------

    def map_region(self, addr: int, size: int, writable=True,
                   user_accessible=True, may_write=True):
        for base in pages_spanning(addr, size):
            if base not in self._pages:
                self._pages[base] = _Page(writable, user_accessible, may_write)

    def is_mapped(self, addr: int, size: int = 1) -> bool:
        return all(b in self._pages for b in pages_spanning(addr, size))

    def runs(self, addr: int, size: int):
        """Contiguous (addr, size, mapped) spans covering [addr, addr+size)."""
        out = []
        pos = addr
        end = addr + size
        while pos < end:
            base = page_base(pos)
            chunk = min(end, base + PAGE_SIZE) - pos
            mapped = base in self._pages
            if out and out[-1][2] == mapped:
                prev = out[-1]
                out[-1] = (prev[0], prev[1] + chunk, mapped)
            else:
                out.append((pos, chunk, mapped))
            pos += chunk
        return out

    # -- access --------------------------------------------------------

    def read(self, addr: int, size: int) -> bytes | None:
        """None if any byte is unmapped or not user-accessible."""
        if size <= 0:
            return b""
        out = bytearray()
        pos = addr
        end = addr + size
        while pos < end:
            base = page_base(pos)
            page = self._pages.get(base)
            if page is None or not page.user_accessible:
                return None
            chunk = min(end, base + PAGE_SIZE) - pos
            off = pos - base
            out += page.data[off:off + chunk]
            pos += chunk
        return bytes(out)

    def write(self, addr: int, data: bytes, demand_map=False) -> WriteStatus:
        """Apply a store, or report why it cannot happen (atomically:
        a refused multi-page store changes nothing)."""
        bases = pages_spanning(addr, len(data))
        for base in bases:
            if base not in self._pages:
                if not demand_map:
                    return WriteStatus.FAULT
        for base in bases:
            page = self._pages.get(base)
            if page is not None and not (page.writable and page.may_write):
                return WriteStatus.DENIED
        for base in bases:
            if base in self._protected:
                return WriteStatus.STALL
        for base in bases:
            if base not in self._pages:
                self._pages[base] = _Page()
        pos = addr
        end = addr + len(data)
        while pos < end:
            base = page_base(pos)
            chunk = min(end, base + PAGE_SIZE) - pos
            off = pos - base
            self._pages[base].data[off:off + chunk] = \
                data[pos - addr:pos - addr + chunk]
            pos += chunk
        return WriteStatus.OK

    def poke(self, addr: int, data: bytes):
        """Privileged store for the snapshot layer; target must be mapped."""
        pos = addr
        end = addr + len(data)
        while pos < end:
            base = page_base(pos)
            page = self._pages[base]
            chunk = min(end, base + PAGE_SIZE) - pos
            off = pos - base
            page.data[off:off + chunk] = data[pos - addr:pos - addr + chunk]
            pos += chunk

    # -- write protection ------------------------------------------------

    def protect(self, addr: int, size: int) -> tuple[int, ...]:
        """Register write protection; returns the affected page bases."""
        bases = tuple(b for b in pages_spanning(addr, size) if b in self._pages)
        self._protected.update(bases)
        return bases

    def unprotect(self, bases) -> None:
        self._protected.difference_update(bases)

    def is_protected(self, addr: int, size: int = 1) -> bool:
        return any(b in self._protected for b in pages_spanning(addr, size))

    # -- introspection ----------------------------------------------------

    def state_key(self):
        return (
            tuple(sorted((b, bytes(p.data), p.writable, p.user_accessible,
                          p.may_write) for b, p in self._pages.items())),
            tuple(sorted(self._protected)),
        )

    def __deepcopy__(self, memo):
        clone = object.__new__(UserMemory)
        memo[id(self)] = clone
        clone._pages = {}
        for base, page in self._pages.items():
            p = _Page(page.writable, page.user_accessible, page.may_write)
            p.data = bytearray(page.data)
            clone._pages[base] = p
        clone._protected = set(self._protected)
        return clone
