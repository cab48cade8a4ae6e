"""Shared state tables for filter programs.

Four kinds, mirroring the helper-visible semantics:

  array         fixed-size, preallocated and zeroed; keys are 8-byte
                little-endian indexes; entries can be overwritten but
                never deleted
  hash          grow-on-insert up to max_entries
  task_storage  per-process values keyed by thread-group leader id,
                reachable only through the task-storage helpers
  prog_array    verified programs for tail handoff, populated at load

Values are held as live bytearrays.  A lookup hands out the storage
itself, which is what makes value pointers in filter code write-through:
a store via a looked-up pointer is immediately visible to every thread
sharing the map.

Lifetime is reference counted.  Loading a program pins each map it
declares; the creator's descriptor is a separate pin that the owning
process can drop (`fd_open = False`).  Once the descriptor is closed the
map lives on for as long as installed filters reference it, but it is
no longer reachable from outside, so not even the loading process can
retune a policy after locking itself down.
"""

from __future__ import annotations

import errno
from copy import deepcopy

from .isa import FilterProgram, MapDecl, MapKind

EPERM = errno.EPERM
ENOENT = errno.ENOENT
E2BIG = errno.E2BIG
EACCES = errno.EACCES
EFAULT = errno.EFAULT
EINVAL = errno.EINVAL


class PolicyMap:
    """One instantiated map. See the module docstring for semantics."""

    def __init__(self, decl: MapDecl):
        decl.validate()
        self.decl = decl
        self.name = decl.name
        self.kind = decl.kind
        self.key_size = decl.key_size
        self.value_size = decl.value_size
        self.max_entries = decl.max_entries
        self.refcount = 0
        self.fd_open = True
        self._array: list[bytearray] | None = None
        self._table: dict[bytes, bytearray] = {}
        self._programs: dict[int, FilterProgram] = {}
        if self.kind == MapKind.ARRAY:
            self._array = [bytearray(self.value_size)
                           for _ in range(self.max_entries)]
        for key, value in sorted(decl.initial_entries.items()):
            rc = self.update(key, value, check_size=True)
            if rc != 0:
                raise ValueError(f"map {self.name}: initial entry rejected ({rc})")
        for idx, prog in sorted(decl.initial_programs.items()):
            self.set_program(idx, prog)

    @property
    def alive(self) -> bool:
        return self.refcount > 0 or self.fd_open

    def pin(self):
        self.refcount += 1

    def unpin(self):
        if self.refcount <= 0:
            raise RuntimeError(f"map {self.name}: unbalanced unpin")
        self.refcount -= 1

    # -- data plane ----------------------------------------------------

    def _array_index(self, key: bytes) -> int:
        return int.from_bytes(key, "little")

    def lookup(self, key: bytes) -> bytearray | None:
        """Live value storage, or None when absent / out of range."""
        if self.kind == MapKind.PROG_ARRAY:
            raise TypeError("program arrays hold programs, not values")
        if len(key) != self.key_size:
            return None
        if self.kind == MapKind.ARRAY:
            idx = self._array_index(key)
            if idx >= self.max_entries:
                return None
            return self._array[idx]
        return self._table.get(bytes(key))

    def update(self, key: bytes, value: bytes, flags: int = 0,
               check_size: bool = True) -> int:
        """0 on success, negated errno on failure. `flags` is reserved."""
        if self.kind == MapKind.PROG_ARRAY:
            raise TypeError("program arrays hold programs, not values")
        if check_size and (len(key) != self.key_size
                           or len(value) != self.value_size):
            return -EINVAL
        if self.kind == MapKind.ARRAY:
            idx = self._array_index(key)
            if idx >= self.max_entries:
                return -E2BIG
            self._array[idx][:] = value
            return 0
        key = bytes(key)
        if key not in self._table and len(self._table) >= self.max_entries:
            return -E2BIG
        if key in self._table:
            self._table[key][:] = value
        else:
            self._table[key] = bytearray(value)
        return 0

    def delete(self, key: bytes) -> int:
        if self.kind == MapKind.PROG_ARRAY:
            raise TypeError("program arrays hold programs, not values")
        if self.kind == MapKind.ARRAY:
            return -EINVAL
        if self._table.pop(bytes(key), None) is None:
            return -ENOENT
        return 0

    # task storage reuses the hash plane with the leader id as key

    def storage_key(self, leader_tid: int) -> bytes:
        return leader_tid.to_bytes(self.key_size, "little")

    def storage_get(self, leader_tid: int, create: bool) -> bytearray | None:
        key = self.storage_key(leader_tid)
        value = self._table.get(key)
        if value is None and create and len(self._table) < self.max_entries:
            value = self._table[key] = bytearray(self.value_size)
        return value

    def storage_delete(self, leader_tid: int) -> int:
        return self.delete(self.storage_key(leader_tid))

    # -- program plane ---------------------------------------------------

    def set_program(self, idx: int, prog: FilterProgram) -> int:
        if self.kind != MapKind.PROG_ARRAY:
            raise TypeError(f"map {self.name} is not a program array")
        if idx < 0 or idx >= self.max_entries:
            return -E2BIG
        if not prog.verified:
            raise ValueError("only verified programs may enter a program array")
        self._programs[idx] = prog
        return 0

    def get_program(self, idx: int) -> FilterProgram | None:
        if self.kind != MapKind.PROG_ARRAY:
            raise TypeError(f"map {self.name} is not a program array")
        return self._programs.get(idx)

    # -- introspection ---------------------------------------------------

    def items(self):
        """Snapshot of (key, value bytes) pairs in canonical order."""
        if self.kind == MapKind.ARRAY:
            return [(i.to_bytes(8, "little"), bytes(v))
                    for i, v in enumerate(self._array)]
        if self.kind == MapKind.PROG_ARRAY:
            raise TypeError("program arrays hold programs, not values")
        return sorted((k, bytes(v)) for k, v in self._table.items())

    def state_key(self):
        """Hashable content fingerprint for interleaving deduplication."""
        if self.kind == MapKind.ARRAY:
            return (self.name, tuple(bytes(v) for v in self._array))
        if self.kind == MapKind.PROG_ARRAY:
            return (self.name, tuple(sorted(
                (i, id(p)) for i, p in self._programs.items())))
        return (self.name, tuple(sorted(
            (k, bytes(v)) for k, v in self._table.items())))

    def __deepcopy__(self, memo):
        clone = object.__new__(PolicyMap)
        memo[id(self)] = clone
        clone.decl = self.decl
        clone.name = self.name
        clone.kind = self.kind
        clone.key_size = self.key_size
        clone.value_size = self.value_size
        clone.max_entries = self.max_entries
        clone.refcount = self.refcount
        clone.fd_open = self.fd_open
        clone._array = (None if self._array is None
                        else [bytearray(v) for v in self._array])
        clone._table = {k: bytearray(v) for k, v in self._table.items()}
        clone._programs = dict(self._programs)  # programs are immutable
        return clone

    def __repr__(self):
        return (f"PolicyMap({self.name!r}, {self.kind.name.lower()}, "
                f"refs={self.refcount}, fd={'open' if self.fd_open else 'closed'})")
