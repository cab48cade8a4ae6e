"""Entry-time capture of pointed-to syscall arguments.

Register arguments are copied by value when a syscall is entered, but
an argument that is a pointer can have its target rewritten by another
thread between the filter's check and the kernel's use.  This module
closes that window.  A descriptor table says, per syscall number, which
arguments point where and how many bytes matter; at entry the engine
takes a snapshot of those ranges in one of two modes:

  copy           the ranges are copied into a staging region mapped
                 read-only high in the address space; helper reads of
                 a snapshotted source address are redirected into the
                 staging copy, so later writes to the live buffer are
                 invisible to both the filter and the decision
  write_protect  the source pages themselves are write-protected until
                 the syscall completes; helper reads go to live memory
                 (which cannot change), and a writer targeting those
                 pages stalls until release

Either way the verdict is a pure function of entry-time memory.

A range that is unmapped at snapshot time becomes a fault marker.  A
sleepable program that reads into a marker blocks once for fault
service, which re-captures the range from live memory if it has since
been mapped; a plain program just gets -EFAULT, like a failed user
copy in atomic context.  Reads outside every described range fall
through to live memory: the table only promises stability for the
bytes the kernel itself will use.

Per-syscall snapshots are capped at 4096 bytes, checked when the
descriptor table is loaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .usermem import UserMemory, pages_spanning

SNAPSHOT_LIMIT = 4096
REGION_BASE = 0x7F0000000000
REGION_STRIDE = 0x10000

COPY = "copy"
WRITE_PROTECT = "write_protect"
MODES = (COPY, WRITE_PROTECT)


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class FieldDesc:
    """A pointer field inside a snapshotted record."""
    offset: int
    kind: str            # "user_buffer" | "user_string"
    size: int            # byte count, or string capacity


@dataclass(frozen=True)
class ArgDesc:
    kind: str            # "scalar" | "user_buffer" | "user_string" | "user_record"
    size: int = 0
    fields: tuple = ()

    @property
    def snapshot_bytes(self) -> int:
        if self.kind == "scalar":
            return 0
        return self.size + sum(f.size for f in self.fields)


def _parse_field(raw: dict, where: str) -> FieldDesc:
    kind = raw.get("kind")
    if kind not in ("user_buffer", "user_string"):
        raise DescriptorError(f"{where}: record fields may only be "
                              f"user_buffer or user_string, got {kind!r}")
    offset = raw.get("offset")
    size = raw.get("max" if kind == "user_string" else "size")
    if not isinstance(offset, int) or offset < 0:
        raise DescriptorError(f"{where}: bad field offset")
    if not isinstance(size, int) or size <= 0:
        raise DescriptorError(f"{where}: bad field size")
    return FieldDesc(offset, kind, size)


def _parse_arg(raw: dict, where: str) -> ArgDesc:
    kind = raw.get("kind")
    if kind == "scalar":
        return ArgDesc("scalar")
    if kind in ("user_buffer", "user_string"):
        size = raw.get("max" if kind == "user_string" else "size")
        if not isinstance(size, int) or size <= 0:
            raise DescriptorError(f"{where}: bad size")
        return ArgDesc(kind, size)
    if kind == "user_record":
        size = raw.get("size")
        if not isinstance(size, int) or size <= 0:
            raise DescriptorError(f"{where}: bad record size")
        fields = []
        for i, f in enumerate(raw.get("fields", [])):
            fd = _parse_field(f, f"{where}.fields[{i}]")
            if fd.offset + 8 > size:
                raise DescriptorError(
                    f"{where}.fields[{i}]: pointer at offset {fd.offset} "
                    f"does not fit in a {size}-byte record")
            fields.append(fd)
        return ArgDesc(kind, size, tuple(fields))
    raise DescriptorError(f"{where}: unknown descriptor kind {kind!r}")


class DescriptorTable:
    """Per-syscall argument descriptions, loaded from JSON."""

    def __init__(self, table: dict[int, dict[int, ArgDesc]] | None = None):
        self._table = table or {}

    @classmethod
    def from_json(cls, data) -> "DescriptorTable":
        if isinstance(data, (str, bytes)):
            data = json.loads(data)
        table: dict[int, dict[int, ArgDesc]] = {}
        for nr_key, entry in data.items():
            try:
                nr = int(nr_key)
            except ValueError:
                raise DescriptorError(f"bad syscall number {nr_key!r}") from None
            args: dict[int, ArgDesc] = {}
            total = 0
            for idx_key, raw in entry.get("args", {}).items():
                idx = int(idx_key)
                if not 0 <= idx <= 5:
                    raise DescriptorError(
                        f"syscall {nr}: argument index {idx} out of range")
                desc = _parse_arg(raw, f"syscall {nr} arg {idx}")
                args[idx] = desc
                total += desc.snapshot_bytes
            if total > SNAPSHOT_LIMIT:
                raise DescriptorError(
                    f"syscall {nr}: snapshot would be {total} bytes, "
                    f"limit is {SNAPSHOT_LIMIT}")
            table[nr] = args
        return cls(table)

    @classmethod
    def load(cls, path) -> "DescriptorTable":
        with open(path, "rb") as fh:
            return cls.from_json(fh.read())

    def get(self, nr: int) -> dict[int, ArgDesc]:
        return self._table.get(nr, {})

    def __contains__(self, nr: int) -> bool:
        return nr in self._table


@dataclass
class _Range:
    src: int
    size: int
    region: int | None   # staging address in copy mode, None in wp mode


@dataclass
class ArgSnapshot:
    tid: int
    mode: str
    region_base: int
    region_len: int = 0
    ranges: list = field(default_factory=list)
    fault_markers: list = field(default_factory=list)   # (addr, size)
    protected_pages: set = field(default_factory=set)
    released: bool = False

    def read(self, mem: UserMemory, addr: int, size: int):
        """Resolve a helper read byte by byte.

        ("ok", bytes)        all bytes available
        ("marker", (a, s))   hit a fault marker (service candidate)
        ("fault", None)      unmapped live memory
        """
        out = bytearray()
        for i in range(size):
            a = addr + i
            hit = None
            for r in self.ranges:
                if r.src <= a < r.src + r.size:
                    hit = r
                    break
            if hit is not None:
                if self.mode == COPY:
                    b = mem.read(hit.region + (a - hit.src), 1)
                else:
                    b = mem.read(a, 1)
                if b is None:
                    return ("fault", None)
                out += b
                continue
            marker = next((m for m in self.fault_markers
                           if m[0] <= a < m[0] + m[1]), None)
            if marker is not None:
                return ("marker", marker)
            b = mem.read(a, 1)
            if b is None:
                return ("fault", None)
            out += b
        return ("ok", bytes(out))

    def service_fault(self, mem: UserMemory, marker) -> bool:
        """Re-capture one marker from live memory. True if any part of it
        is now mapped and was absorbed into the snapshot."""
        if marker not in self.fault_markers:
            return False
        addr, size = marker
        self.fault_markers.remove(marker)
        progress = False
        for run_addr, run_size, mapped in mem.runs(addr, size):
            if not mapped:
                self.fault_markers.append((run_addr, run_size))
                continue
            progress = True
            if self.mode == COPY:
                data = mem.read(run_addr, run_size)
                dst = self.region_base + self.region_len
                mem.map_region(dst, run_size, writable=False,
                               user_accessible=True, may_write=False)
                mem.poke(dst, data)
                self.ranges.append(_Range(run_addr, run_size, dst))
                self.region_len += run_size
            else:
                self.protected_pages.update(mem.protect(run_addr, run_size))
                self.ranges.append(_Range(run_addr, run_size, None))
        return progress


class Snapshotter:
    def __init__(self, descriptors: DescriptorTable, mode: str = COPY):
        if mode not in MODES:
            raise ValueError(f"unknown snapshot mode {mode!r}")
        self.descriptors = descriptors
        self.mode = mode

    def snapshot(self, mem: UserMemory, tid: int, ctx) -> ArgSnapshot:
        snap = ArgSnapshot(tid=tid, mode=self.mode,
                           region_base=REGION_BASE + tid * REGION_STRIDE)
        for idx, desc in sorted(self.descriptors.get(ctx.nr).items()):
            if desc.kind == "scalar":
                continue
            ptr = ctx.args[idx]
            if ptr == 0:
                continue
            self._capture(mem, snap, ptr, desc.size)
            if desc.kind == "user_record":
                record = snap.read(mem, ptr, desc.size)
                if record[0] != "ok":
                    continue
                blob = record[1]
                for fd in desc.fields:
                    inner = int.from_bytes(blob[fd.offset:fd.offset + 8],
                                           "little")
                    if inner:
                        self._capture(mem, snap, inner, fd.size)
        return snap

    def _capture(self, mem: UserMemory, snap: ArgSnapshot, addr: int,
                 size: int):
        for run_addr, run_size, mapped in mem.runs(addr, size):
            if not mapped:
                snap.fault_markers.append((run_addr, run_size))
            elif self.mode == COPY:
                data = mem.read(run_addr, run_size)
                dst = snap.region_base + snap.region_len
                mem.map_region(dst, run_size, writable=False,
                               user_accessible=True, may_write=False)
                mem.poke(dst, data)
                snap.ranges.append(_Range(run_addr, run_size, dst))
                snap.region_len += run_size
            else:
                snap.protected_pages.update(mem.protect(run_addr, run_size))
                snap.ranges.append(_Range(run_addr, run_size, None))

    def release(self, mem: UserMemory, snap: ArgSnapshot):
        if snap.released:
            return
        snap.released = True
        if self.mode == WRITE_PROTECT:
            mem.unprotect(snap.protected_pages)
            snap.protected_pages.clear()
