"""Filter program interpreter.

Threads of execution are plain-data state machines rather than
generators so that an in-progress evaluation can be deep-copied,
resumed, and compared; the interleaving explorer depends on all three.
`VmThread.run` executes instructions until the program exits, faults,
or blocks.  A blocked thread parks *before* completing the current
instruction: the step counter only moves on completion, the program
counter stays put, and resuming simply re-dispatches the same
instruction (whose helper re-checks its wake condition).

Every structural rule the static checker enforces is re-checked here
and raised as a fault, so an interpreter bug or a forged "verified"
flag degrades to the configured bad-filter action instead of silently
corrupting state.  On a genuinely verified program none of these
checks can fire.

A handoff (`tail_call`) replaces the running program, registers, and
stack but keeps the accumulated step and helper counts, and at most 32
handoffs may occur in one evaluation.  That bound is real: the handoff
target comes from a map, so no static walk can see the whole chain.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import maps as m
from .isa import (
    ALU_BASE,
    CTX_FIELDS,
    FilterProgram,
    Helper,
    JUMP_BASE,
    LD_IMM64_MAP_REF,
    MapKind,
    NUM_REGS,
    Opcode,
    STACK_SIZE,
    SyscallContext,
    U64_MASK,
    eval_alu,
    eval_cond,
)

MAX_TAIL_CALLS = 32
STEP_LIMIT = 1_000_000

_UNSET = ("uninit",)
_CTX = ("ctx",)


class VmFault(Exception):
    pass


@dataclass(frozen=True)
class MapRef:
    map: object

    def __deepcopy__(self, memo):
        from copy import deepcopy
        return MapRef(deepcopy(self.map, memo))


@dataclass(frozen=True)
class MemPtr:
    """Pointer into a stack frame or a live map value.

    `origin` is stable provenance for state fingerprinting:
    ("stack",) or ("mapval", map_name, key_bytes).
    """
    buf: bytearray
    off: int
    origin: tuple

    def moved(self, delta: int) -> "MemPtr":
        return MemPtr(self.buf, self.off + delta, self.origin)


@dataclass(frozen=True)
class WaitBlock:
    target_nr: int


@dataclass(frozen=True)
class FaultServiceBlock:
    marker: tuple  # (addr, size)


@dataclass(frozen=True)
class VmOutcome:
    raw_action: int
    steps_executed: int
    helper_calls: int
    faulted: bool = False
    fault_reason: str = ""


class RuntimeEnv:
    """Everything an evaluation needs from the world around it.

    Supplied per run call and never stored on the thread, so threads
    stay plain data.
    """

    def __init__(self, *, clock_ns=0, usermem=None, snapshot=None,
                 user_access_allowed=False, leader_tid=0,
                 register_in_flight=None, in_flight_count=None,
                 maps_for_program=None, step_limit=STEP_LIMIT):
        self.clock_ns = clock_ns
        self.usermem = usermem
        self.snapshot = snapshot
        self.user_access_allowed = user_access_allowed
        self.leader_tid = leader_tid
        self._register = register_in_flight
        self._in_flight = in_flight_count
        self._maps_for = maps_for_program
        self.step_limit = step_limit

    def register_in_flight(self, nr: int):
        if self._register is not None:
            self._register(nr)

    def in_flight_count(self, nr: int) -> int:
        return self._in_flight(nr) if self._in_flight is not None else 0

    def maps_for_program(self, program: FilterProgram):
        if self._maps_for is None:
            raise VmFault("handoff target has no instantiated maps")
        return self._maps_for(program)

    def read_user(self, addr: int, size: int):
        if self.snapshot is not None:
            return self.snapshot.read(self.usermem, addr, size)
        if self.usermem is None:
            return ("fault", None)
        data = self.usermem.read(addr, size)
        return ("fault", None) if data is None else ("ok", data)


class VmThread:
    def __init__(self, program: FilterProgram, prog_maps, ctx: SyscallContext):
        if not program.verified:
            raise VmFault("refusing to run an unverified program")
        self.program = program
        self.maps = list(prog_maps)
        self.ctx = ctx
        self.pc = 0
        self.regs = [_UNSET] * NUM_REGS
        self.stack = bytearray(STACK_SIZE)
        self.stack_init = 0
        self.regs[1] = _CTX
        self.regs[10] = MemPtr(self.stack, STACK_SIZE, ("stack",))
        self.steps = 0
        self.helper_calls = 0
        self.tail_depth = 0
        self.block = None
        self.done = False
        self.outcome: VmOutcome | None = None
        self.fault_serviced: set = set()
        self.registered_waits: set = set()

    # -- plumbing -------------------------------------------------------

    def _get(self, idx: int):
        v = self.regs[idx]
        if v is _UNSET or v == _UNSET:
            raise VmFault(f"read of uninitialized register r{idx}")
        return v

    def _set(self, idx: int, value):
        if idx == 10:
            raise VmFault("frame register is read-only")
        self.regs[idx] = value

    def _scalar(self, idx: int) -> int:
        v = self._get(idx)
        if not isinstance(v, int):
            raise VmFault(f"r{idx}: expected a scalar")
        return v

    def _ptr(self, idx: int) -> MemPtr:
        v = self._get(idx)
        if not isinstance(v, MemPtr):
            raise VmFault(f"r{idx}: expected a memory pointer")
        return v

    def _map(self, idx: int, kinds) -> m.PolicyMap:
        v = self._get(idx)
        if not isinstance(v, MapRef):
            raise VmFault(f"r{idx}: expected a map reference")
        if v.map.kind not in kinds:
            raise VmFault(f"map {v.map.name}: kind not accepted here")
        return v.map

    def _check_window(self, ptr: MemPtr, at: int, size: int, for_write: bool):
        if at % 8 != 0 and size >= 8:
            raise VmFault("memory access not 8-byte aligned")
        if at < 0 or at + size > len(ptr.buf):
            raise VmFault("memory access out of bounds")
        if ptr.origin == ("stack",) and not for_write:
            first, last = at // 8, (at + size - 1) // 8
            for slot in range(first, last + 1):
                if not self.stack_init & (1 << slot):
                    raise VmFault("read of uninitialized stack slot")

    def _read_mem(self, ptr: MemPtr, size: int, at=None) -> bytes:
        pos = ptr.off if at is None else at
        self._check_window(ptr, pos, size, for_write=False)
        return bytes(ptr.buf[pos:pos + size])

    def _write_mem(self, ptr: MemPtr, data: bytes, at=None):
        pos = ptr.off if at is None else at
        self._check_window(ptr, pos, len(data), for_write=True)
        ptr.buf[pos:pos + len(data)] = data
        if ptr.origin == ("stack",):
            first, last = pos // 8, (pos + len(data) - 1) // 8
            for slot in range(first, last + 1):
                self.stack_init |= 1 << slot

    def _finish(self, raw: int):
        self.done = True
        self.outcome = VmOutcome(raw & 0xFFFFFFFF, self.steps,
                                 self.helper_calls)

    def _fault(self, reason: str):
        self.done = True
        self.outcome = VmOutcome(0, self.steps, self.helper_calls,
                                 faulted=True, fault_reason=reason)

    # -- execution -------------------------------------------------------

    def run(self, env: RuntimeEnv, fuel: int | None = None) -> str:
        """Advance until "done", "blocked", or fuel runs out ("running")."""
        while not self.done:
            if self.block is not None:
                return "blocked"
            if fuel is not None:
                if fuel == 0:
                    return "running"
                fuel -= 1
            try:
                self._dispatch(env)
            except VmFault as exc:
                self._fault(str(exc))
        return "done"

    def _dispatch(self, env: RuntimeEnv):
        if self.steps >= env.step_limit:
            raise VmFault("step limit exceeded")
        if not 0 <= self.pc < len(self.program.instructions):
            raise VmFault("control fell off the program")
        ins = self.program.instructions[self.pc]
        op = ins.opcode

        if op in ALU_BASE:
            self._exec_alu(ins)
        elif op in JUMP_BASE:
            self._exec_jump(ins)
        elif op == Opcode.JA:
            self.pc += 1 + ins.offset
        elif op == Opcode.LD_IMM64:
            if ins.src == LD_IMM64_MAP_REF:
                if not 0 <= ins.imm < len(self.maps):
                    raise VmFault("reference to undeclared map")
                self._set(ins.dst, MapRef(self.maps[ins.imm]))
            elif ins.src == 0:
                self._set(ins.dst, ins.imm & U64_MASK)
            else:
                raise VmFault("bad ld_imm64 source flag")
            self.pc += 1
        elif op == Opcode.LD_CTX:
            if CTX_FIELDS.get(ins.offset) is None:
                raise VmFault("context read is not field aligned")
            self._set(ins.dst, self.ctx.field(ins.offset))
            self.pc += 1
        elif op == Opcode.LD_MAP:
            ptr = self._ptr(ins.src)
            value = int.from_bytes(
                self._read_mem(ptr, 8, ptr.off + ins.offset), "little")
            self._set(ins.dst, value)
            self.pc += 1
        elif op == Opcode.ST_MAP:
            ptr = self._ptr(ins.dst)
            value = self._scalar(ins.src)
            self._write_mem(ptr, (value & U64_MASK).to_bytes(8, "little"),
                            ptr.off + ins.offset)
            self.pc += 1
        elif op == Opcode.CALL:
            finished = self._exec_call(ins, env)
            if not finished:
                return   # blocked: no step, no pc move
            self.pc += 1
        elif op == Opcode.TAIL_CALL:
            self._exec_tail_call(env)
        elif op == Opcode.EXIT:
            raw = self._scalar(0)
            self.steps += 1
            self._finish(raw)
            return
        else:
            raise VmFault(f"unhandled opcode {op!r}")

        self.steps += 1

    def _exec_alu(self, ins):
        base = ALU_BASE[ins.opcode]
        rhs = (ins.imm & U64_MASK) if ins.opcode.name.endswith("_IMM") \
            else self._get(ins.src)
        if base == "mov":
            self._set(ins.dst, rhs)
        else:
            lhs = self._get(ins.dst)
            if isinstance(lhs, MemPtr) and base in ("add", "sub"):
                if not isinstance(rhs, int):
                    raise VmFault("pointer arithmetic needs a scalar offset")
                delta = rhs if rhs < (1 << 63) else rhs - (1 << 64)
                self._set(ins.dst, lhs.moved(delta if base == "add" else -delta))
            elif isinstance(lhs, int) and isinstance(rhs, int):
                self._set(ins.dst, eval_alu(base, lhs, rhs))
            else:
                raise VmFault(f"{base} on non-scalar operands")
        self.pc += 1

    def _exec_jump(self, ins):
        base = JUMP_BASE[ins.opcode]
        lhs = self._get(ins.dst)
        rhs = (ins.imm & U64_MASK) if ins.opcode.name.endswith("_IMM") \
            else self._get(ins.src)
        if isinstance(lhs, (MemPtr, MapRef)) or lhs == _CTX:
            # only the null check on a maybe-null lookup result is legal
            if base not in ("jeq", "jne") or rhs != 0 \
                    or not isinstance(lhs, MemPtr):
                raise VmFault("comparison on non-scalar operands")
            taken = (base == "jne")
        elif isinstance(lhs, int) and isinstance(rhs, int):
            taken = eval_cond(base, lhs, rhs)
        else:
            raise VmFault("comparison on non-scalar operands")
        self.pc += 1 + (ins.offset if taken else 0)

    def _mapval_ptr(self, policy_map: m.PolicyMap, value: bytearray,
                    key: bytes) -> MemPtr:
        return MemPtr(value, 0, ("mapval", policy_map.name, key))

    def _clobber_caller_saved(self):
        for r in range(1, 6):
            self.regs[r] = _UNSET

    def _exec_call(self, ins, env: RuntimeEnv) -> bool:
        """True when the helper completed; False when it parked the thread."""
        try:
            helper = Helper(ins.imm)
        except ValueError:
            raise VmFault(f"unknown helper id {ins.imm}") from None

        if helper == Helper.MAP_LOOKUP_ELEM:
            pmap = self._map(1, (MapKind.ARRAY, MapKind.HASH))
            key = self._read_mem(self._ptr(2), pmap.key_size)
            value = pmap.lookup(key)
            result = 0 if value is None else self._mapval_ptr(pmap, value, key)
        elif helper == Helper.MAP_UPDATE_ELEM:
            pmap = self._map(1, (MapKind.ARRAY, MapKind.HASH))
            key = self._read_mem(self._ptr(2), pmap.key_size)
            value = self._read_mem(self._ptr(3), pmap.value_size)
            result = pmap.update(key, value, self._scalar(4)) & U64_MASK
        elif helper == Helper.MAP_DELETE_ELEM:
            pmap = self._map(1, (MapKind.ARRAY, MapKind.HASH))
            key = self._read_mem(self._ptr(2), pmap.key_size)
            result = pmap.delete(key) & U64_MASK
        elif helper == Helper.KTIME_GET_NS:
            result = env.clock_ns & U64_MASK
        elif helper == Helper.SAFE_READ_USER:
            done, result = self._read_user_buffer(env)
            if not done:
                return False
        elif helper == Helper.SAFE_READ_USER_STR:
            done, result = self._read_user_string(env)
            if not done:
                return False
        elif helper == Helper.SAFE_TASK_STORAGE_GET:
            pmap = self._map(1, (MapKind.TASK_STORAGE,))
            create = bool(self._scalar(2) & 1)
            value = pmap.storage_get(env.leader_tid, create)
            key = pmap.storage_key(env.leader_tid)
            result = 0 if value is None else self._mapval_ptr(pmap, value, key)
        elif helper == Helper.SAFE_TASK_STORAGE_DELETE:
            pmap = self._map(1, (MapKind.TASK_STORAGE,))
            result = pmap.storage_delete(env.leader_tid) & U64_MASK
        elif helper == Helper.WAIT_SYSCALL:
            curr, target = self._scalar(1), self._scalar(2)
            # Check before registering: the helper runs atomically, so
            # whichever of two mutually-serialized tasks gets here first
            # claims the window and the other waits, never both.  A
            # thread's own registration doesn't count against itself.
            busy = env.in_flight_count(target)
            if target in self.registered_waits:
                busy -= 1
            if busy > 0:
                self.block = WaitBlock(target)
                return False
            if curr not in self.registered_waits:
                env.register_in_flight(curr)
                self.registered_waits.add(curr)
            result = 0
        else:
            raise VmFault(f"helper {helper.name.lower()} not callable here")

        self.helper_calls += 1
        self._clobber_caller_saved()
        self.regs[0] = result
        return True

    def _read_user_buffer(self, env: RuntimeEnv):
        dst = self._ptr(1)
        size = self._scalar(2)
        addr = self._scalar(3)
        if size <= 0 or size % 8 != 0:
            raise VmFault("user read size must be a positive multiple of 8")
        self._check_window(dst, dst.off, size, for_write=True)
        if not env.user_access_allowed:
            return True, (-m.EPERM) & U64_MASK
        status, payload = env.read_user(addr, size)
        if status == "ok":
            self._write_mem(dst, payload)
            return True, 0
        if status == "marker" and self.program.sleepable \
                and payload not in self.fault_serviced:
            self.block = FaultServiceBlock(payload)
            return False, None
        self._write_mem(dst, bytes(size))
        return True, (-m.EFAULT) & U64_MASK

    def _read_user_string(self, env: RuntimeEnv):
        dst = self._ptr(1)
        cap = self._scalar(2)
        addr = self._scalar(3)
        if cap <= 0 or cap % 8 != 0:
            raise VmFault("string capacity must be a positive multiple of 8")
        self._check_window(dst, dst.off, cap, for_write=True)
        if not env.user_access_allowed:
            return True, (-m.EPERM) & U64_MASK
        collected = bytearray()
        for i in range(cap):
            status, payload = env.read_user(addr + i, 1)
            if status == "marker" and self.program.sleepable \
                    and payload not in self.fault_serviced:
                self.block = FaultServiceBlock(payload)
                return False, None
            if status != "ok":
                self._write_mem(dst, bytes(cap))
                return True, (-m.EFAULT) & U64_MASK
            if payload == b"\x00":
                out = bytes(collected) + b"\x00"
                self._write_mem(dst, out + bytes(cap - len(out)))
                return True, i + 1
            collected += payload
        out = bytes(collected[:cap - 1]) + b"\x00"
        self._write_mem(dst, out)
        return True, (-m.E2BIG) & U64_MASK

    def _exec_tail_call(self, env: RuntimeEnv):
        pmap = self._map(1, (MapKind.PROG_ARRAY,))
        idx = self._scalar(2)
        target = pmap.get_program(idx)
        if target is None:
            self.helper_calls += 1
            self._clobber_caller_saved()
            self.regs[0] = (-m.ENOENT) & U64_MASK
            self.pc += 1
            return
        if self.tail_depth + 1 > MAX_TAIL_CALLS:
            raise VmFault("handoff chain exceeds 32")
        self.tail_depth += 1
        self.helper_calls += 1
        self.program = target
        self.maps = list(env.maps_for_program(target))
        self.pc = 0
        self.regs = [_UNSET] * NUM_REGS
        self.stack = bytearray(STACK_SIZE)
        self.stack_init = 0
        self.regs[1] = _CTX
        self.regs[10] = MemPtr(self.stack, STACK_SIZE, ("stack",))

    # -- state fingerprinting ----------------------------------------------

    def state_key(self):
        regs = []
        for v in self.regs:
            if isinstance(v, int):
                regs.append(("k", v))
            elif isinstance(v, MemPtr):
                regs.append(("p", v.origin, v.off))
            elif isinstance(v, MapRef):
                regs.append(("m", v.map.name))
            elif v == _CTX:
                regs.append(("c",))
            else:
                regs.append(("x",))
        return (id(self.program), self.pc, tuple(regs), bytes(self.stack),
                self.stack_init, self.steps, self.helper_calls,
                self.tail_depth, self.block, self.done,
                tuple(sorted(self.registered_waits)),
                tuple(sorted(self.fault_serviced)))
