"""Static safety checker for filter programs.

A program is accepted only if an exhaustive abstract walk of its control
flow proves, within a configurable step budget, that every path:

  * reads the syscall context only in whole, naturally aligned fields,
  * calls only whitelisted helpers with correctly typed arguments
    (sleepable-only helpers require a sleepable program),
  * keeps every jump inside the program,
  * never reads an uninitialized register or stack slot,
  * terminates at `exit` with a scalar in r0 (a `tail_call` may hand off
    earlier; its fall-through edge, taken when the target entry is
    missing, is verified too),
  * passes program-array maps, and only those, to `tail_call`.

The abstract domain is deliberately small: registers are tracked as
unknown scalars, known constants, or typed pointers (context, frame,
map handle, map value), and stack slots carry one initialized bit per
8-byte unit.  Branches whose condition involves an unknown value fork
the walk in both directions; a branch over known constants follows the
one real edge, which is what lets counted loops verify.  If an abstract
state ever repeats on the current path the program cannot be proven
terminating and is rejected; likewise if the walk exhausts the step
budget.  Accepted programs therefore execute within the budget at run
time, at the price of rejecting some terminating programs (e.g. loops
bounded only by values unknown at verification time).

Pointer discipline matches the generated-policy subset rather than the
full kernel verifier: pointers may be copied and offset by known
constants, never spilled to the stack, compared (except null checks on
a map-lookup result), or returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import (
    ALU_BASE,
    CTX_FIELDS,
    FilterProgram,
    HELPER_NAMES,
    Helper,
    JUMP_BASE,
    LD_IMM64_MAP_REF,
    MapKind,
    NUM_REGS,
    Opcode,
    STACK_SIZE,
    eval_alu,
    eval_cond,
)

# abstract register tags
UNINIT = ("X",)
UNKNOWN = ("U",)
CTX_PTR = ("C",)


def known(v):
    return ("K", v)


def stack_ptr(off):
    return ("S", off)


def map_ref(idx):
    return ("M", idx)


def map_value(idx, off):
    return ("V", idx, off)


def null_or_value(idx):
    return ("N", idx)


_SCALARS = ("K", "U")


@dataclass(frozen=True)
class VerifierConfig:
    max_instructions: int = 100_000
    step_budget: int = 1_000_000
    helper_whitelist: frozenset = frozenset(Helper)
    sleepable_only_helpers: frozenset = frozenset()
    stack_size: int = STACK_SIZE


@dataclass
class VerifierReport:
    accepted: bool
    reason: str = ""
    offending_instruction: int | None = None
    notes: dict = field(default_factory=dict)
    abstract_steps: int = 0

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "reason": self.reason,
            "offending_instruction": self.offending_instruction,
            "abstract_steps": self.abstract_steps,
            "notes": {str(k): v for k, v in sorted(self.notes.items())},
        }


class _Violation(Exception):
    def __init__(self, pc: int, reason: str):
        super().__init__(reason)
        self.pc = pc
        self.reason = reason


_NUM_SLOTS = STACK_SIZE // 8

# helper id -> (arg spec, result)
#   arg spec entries: ("scalar",), ("map", allowed kinds),
#   ("stack", size source) where size source is "key"/"value" (from the
#   map in r1) or an int register index holding a known byte count
# result: "unknown" or "null_or_value"
_HELPER_SIGS = {
    Helper.MAP_LOOKUP_ELEM: (
        [("map", (MapKind.ARRAY, MapKind.HASH)), ("stack", "key")],
        "null_or_value",
    ),
    Helper.MAP_UPDATE_ELEM: (
        [("map", (MapKind.ARRAY, MapKind.HASH)), ("stack", "key"),
         ("stack", "value"), ("scalar",)],
        "unknown",
    ),
    Helper.MAP_DELETE_ELEM: (
        [("map", (MapKind.ARRAY, MapKind.HASH)), ("stack", "key")],
        "unknown",
    ),
    Helper.KTIME_GET_NS: ([], "unknown"),
    Helper.SAFE_READ_USER: (
        [("stack", 2), ("scalar",), ("scalar",)],
        "unknown",
    ),
    Helper.SAFE_READ_USER_STR: (
        [("stack", 2), ("scalar",), ("scalar",)],
        "unknown",
    ),
    Helper.SAFE_TASK_STORAGE_GET: (
        [("map", (MapKind.TASK_STORAGE,)), ("scalar",)],
        "null_or_value",
    ),
    Helper.SAFE_TASK_STORAGE_DELETE: (
        [("map", (MapKind.TASK_STORAGE,))],
        "unknown",
    ),
    Helper.WAIT_SYSCALL: ([("scalar",), ("scalar",)], "unknown"),
}


class _Walker:
    def __init__(self, program: FilterProgram, config: VerifierConfig):
        self.program = program
        self.insns = program.instructions
        self.config = config
        self.visits: dict[int, int] = {}
        self.steps = 0

    # -- state helpers ------------------------------------------------

    @staticmethod
    def entry_state():
        regs = [UNINIT] * NUM_REGS
        regs[1] = CTX_PTR
        regs[10] = stack_ptr(0)
        return (tuple(regs), 0)

    def read_reg(self, pc, state, idx):
        val = state[0][idx]
        if val == UNINIT:
            raise _Violation(pc, f"read of uninitialized register r{idx}")
        return val

    @staticmethod
    def write_reg(state, idx, val):
        regs, stack_init = state
        if idx == 10:
            raise _Violation(-1, "frame register is read-only")
        new = list(regs)
        new[idx] = val
        return (tuple(new), stack_init)

    def stack_window(self, pc, total_off, size, what):
        """Slot range for a [total_off, total_off+size) stack access."""
        if total_off % 8 != 0:
            raise _Violation(pc, f"{what}: stack access not 8-byte aligned")
        if total_off < -self.config.stack_size or total_off + size > 0:
            raise _Violation(pc, f"{what}: stack access out of bounds")
        first = (self.config.stack_size + total_off) // 8
        last = (self.config.stack_size + total_off + size - 1) // 8
        return range(first, last + 1)

    # -- the abstract step --------------------------------------------

    def successors(self, pc, state):
        """All (pc, state) continuations of one instruction.

        Raises _Violation when the instruction can misbehave.
        """
        if pc < 0 or pc >= len(self.insns):
            raise _Violation(pc, "control falls off program end")
        self.visits[pc] = self.visits.get(pc, 0) + 1
        ins = self.insns[pc]
        op = ins.opcode

        if op in ALU_BASE:
            return self._alu(pc, ins, state)
        if op in JUMP_BASE:
            return self._cond_jump(pc, ins, state)
        if op == Opcode.JA:
            return [(self._target(pc, ins.offset), state)]
        if op == Opcode.LD_IMM64:
            if ins.src == LD_IMM64_MAP_REF:
                if not 0 <= ins.imm < len(self.program.map_refs):
                    raise _Violation(pc, "reference to undeclared map")
                return [(pc + 1, self.write_reg(state, ins.dst, map_ref(ins.imm)))]
            if ins.src != 0:
                raise _Violation(pc, "bad ld_imm64 source flag")
            value = ins.imm & ((1 << 64) - 1)
            return [(pc + 1, self.write_reg(state, ins.dst, known(value)))]
        if op == Opcode.LD_CTX:
            width = CTX_FIELDS.get(ins.offset)
            if width is None:
                if 0 <= ins.offset < 64:
                    raise _Violation(pc, "context read is not field aligned")
                raise _Violation(pc, "context read out of bounds")
            return [(pc + 1, self.write_reg(state, ins.dst, UNKNOWN))]
        if op == Opcode.LD_MAP:
            return self._ld_map(pc, ins, state)
        if op == Opcode.ST_MAP:
            return self._st_map(pc, ins, state)
        if op == Opcode.CALL:
            return self._call(pc, ins, state)
        if op == Opcode.TAIL_CALL:
            return self._tail_call(pc, ins, state)
        if op == Opcode.EXIT:
            r0 = self.read_reg(pc, state, 0)
            if r0[0] not in _SCALARS:
                raise _Violation(pc, "r0 must hold a scalar at exit")
            return []
        raise _Violation(pc, f"unhandled opcode {op!r}")

    def _target(self, pc, offset):
        target = pc + 1 + offset
        if not 0 <= target < len(self.insns):
            raise _Violation(pc, "jump target out of range")
        return target

    def _alu(self, pc, ins, state):
        base = ALU_BASE[ins.opcode]
        is_imm = ins.opcode.name.endswith("_IMM")
        rhs = known(ins.imm & ((1 << 64) - 1)) if is_imm \
            else self.read_reg(pc, state, ins.src)

        if base == "mov":
            return [(pc + 1, self.write_reg(state, ins.dst, rhs))]

        lhs = self.read_reg(pc, state, ins.dst)
        if lhs[0] in ("S", "V") and base in ("add", "sub"):
            if rhs[0] != "K":
                raise _Violation(pc, "pointer arithmetic with unknown offset")
            delta = rhs[1] if rhs[1] < (1 << 63) else rhs[1] - (1 << 64)
            if base == "sub":
                delta = -delta
            if lhs[0] == "S":
                return [(pc + 1, self.write_reg(state, ins.dst,
                                                stack_ptr(lhs[1] + delta)))]
            return [(pc + 1, self.write_reg(state, ins.dst,
                                            map_value(lhs[1], lhs[2] + delta)))]
        if lhs[0] not in _SCALARS or rhs[0] not in _SCALARS:
            raise _Violation(pc, f"{base} on non-scalar operands")
        if lhs[0] == "K" and rhs[0] == "K":
            return [(pc + 1, self.write_reg(state, ins.dst,
                                            known(eval_alu(base, lhs[1], rhs[1]))))]
        return [(pc + 1, self.write_reg(state, ins.dst, UNKNOWN))]

    def _cond_jump(self, pc, ins, state):
        base = JUMP_BASE[ins.opcode]
        is_imm = ins.opcode.name.endswith("_IMM")
        lhs = self.read_reg(pc, state, ins.dst)
        rhs = known(ins.imm & ((1 << 64) - 1)) if is_imm \
            else self.read_reg(pc, state, ins.src)
        taken_pc = self._target(pc, ins.offset)

        # null-check refinement on a maybe-null map value
        if lhs[0] == "N" and rhs == known(0) and base in ("jeq", "jne"):
            as_null = self.write_reg(state, ins.dst, known(0))
            as_value = self.write_reg(state, ins.dst, map_value(lhs[1], 0))
            if base == "jeq":
                return [(pc + 1, as_value), (taken_pc, as_null)]
            return [(pc + 1, as_null), (taken_pc, as_value)]

        if lhs[0] not in _SCALARS or rhs[0] not in _SCALARS:
            raise _Violation(pc, "conditional jump on non-scalar operands")
        if lhs[0] == "K" and rhs[0] == "K":
            if eval_cond(base, lhs[1], rhs[1]):
                return [(taken_pc, state)]
            return [(pc + 1, state)]
        return [(pc + 1, state), (taken_pc, state)]

    def _deref_bounds(self, pc, ins, ptr, what):
        """Validate an 8-byte access through `ptr` + ins.offset."""
        if ptr[0] == "S":
            total = ptr[1] + ins.offset
            window = self.stack_window(pc, total, 8, what)
            return ("stack", (STACK_SIZE + total) // 8, window)
        if ptr[0] == "V":
            decl = self.program.map_refs[ptr[1]]
            total = ptr[2] + ins.offset
            if total % 8 != 0:
                raise _Violation(pc, f"{what}: map value access not 8-byte aligned")
            if total < 0 or total + 8 > decl.value_size:
                raise _Violation(pc, f"{what}: map value access out of bounds")
            return ("mapval", None, None)
        if ptr[0] == "N":
            raise _Violation(pc, f"{what}: possibly-null pointer dereference")
        raise _Violation(pc, f"{what}: not a memory pointer")

    def _ld_map(self, pc, ins, state):
        ptr = self.read_reg(pc, state, ins.src)
        kind, slot, window = self._deref_bounds(pc, ins, ptr, "ld_map")
        if kind == "stack":
            _, stack_init = state
            for s in window:
                if not stack_init & (1 << s):
                    raise _Violation(pc, "read of uninitialized stack slot")
        return [(pc + 1, self.write_reg(state, ins.dst, UNKNOWN))]

    def _st_map(self, pc, ins, state):
        ptr = self.read_reg(pc, state, ins.dst)
        val = self.read_reg(pc, state, ins.src)
        if val[0] not in _SCALARS:
            raise _Violation(pc, "pointer spill to memory is not supported")
        kind, slot, window = self._deref_bounds(pc, ins, ptr, "st_map")
        regs, stack_init = state
        if kind == "stack":
            for s in window:
                stack_init |= 1 << s
        return [(pc + 1, (regs, stack_init))]

    def _stack_arg(self, pc, state, reg_idx, size, helper_name, writes):
        ptr = self.read_reg(pc, state, reg_idx)
        if ptr[0] != "S":
            raise _Violation(
                pc, f"{helper_name}: r{reg_idx} must point into the stack"
            )
        window = self.stack_window(pc, ptr[1], size, helper_name)
        regs, stack_init = state
        if writes:
            for s in window:
                stack_init |= 1 << s
        else:
            for s in window:
                if not stack_init & (1 << s):
                    raise _Violation(
                        pc, f"{helper_name}: stack argument not fully initialized"
                    )
        return (regs, stack_init)

    def _call(self, pc, ins, state):
        try:
            helper = Helper(ins.imm)
        except ValueError:
            raise _Violation(pc, f"helper {ins.imm} is not in the whitelist") \
                from None
        if helper not in self.config.helper_whitelist:
            raise _Violation(
                pc, f"helper {HELPER_NAMES[helper]} is not in the whitelist"
            )
        if helper == Helper.TAIL_CALL:
            raise _Violation(pc, "tail_call must use its dedicated opcode")
        if (helper in self.config.sleepable_only_helpers
                and not self.program.sleepable):
            raise _Violation(
                pc,
                f"helper {HELPER_NAMES[helper]} requires a sleepable program",
            )

        args, result = _HELPER_SIGS[helper]
        name = HELPER_NAMES[helper]
        ref_decl_idx = None
        for i, spec in enumerate(args):
            reg_idx = i + 1
            if spec[0] == "map":
                val = self.read_reg(pc, state, reg_idx)
                if val[0] != "M":
                    raise _Violation(pc, f"{name}: r{reg_idx} must be a map reference")
                decl = self.program.map_refs[val[1]]
                if decl.kind not in spec[1]:
                    raise _Violation(
                        pc,
                        f"{name}: map kind {decl.kind.name.lower()} not accepted",
                    )
                ref_decl_idx = val[1]
            elif spec[0] == "scalar":
                val = self.read_reg(pc, state, reg_idx)
                if val[0] not in _SCALARS:
                    raise _Violation(pc, f"{name}: r{reg_idx} must be a scalar")
            elif spec[0] == "stack":
                size_src = spec[1]
                if isinstance(size_src, int):
                    size_val = self.read_reg(pc, state, size_src)
                    if size_val[0] != "K":
                        raise _Violation(
                            pc, f"{name}: byte count must be a known constant"
                        )
                    size = size_val[1]
                    if size <= 0 or size % 8 != 0:
                        raise _Violation(
                            pc,
                            f"{name}: byte count must be a positive multiple of 8",
                        )
                    writes = True  # user reads fill the destination buffer
                else:
                    decl = self.program.map_refs[ref_decl_idx]
                    size = decl.key_size if size_src == "key" else decl.value_size
                    writes = False
                state = self._stack_arg(pc, state, reg_idx, size, name, writes)

        regs, stack_init = state
        regs = list(regs)
        for r in range(1, 6):
            regs[r] = UNINIT
        if result == "null_or_value":
            regs[0] = null_or_value(ref_decl_idx)
        else:
            regs[0] = UNKNOWN
        return [(pc + 1, (tuple(regs), stack_init))]

    def _tail_call(self, pc, ins, state):
        val = self.read_reg(pc, state, 1)
        if val[0] != "M":
            raise _Violation(pc, "tail_call: r1 must be a map reference")
        decl = self.program.map_refs[val[1]]
        if decl.kind != MapKind.PROG_ARRAY:
            raise _Violation(pc, "tail_call requires a program-array map")
        idx = self.read_reg(pc, state, 2)
        if idx[0] not in _SCALARS:
            raise _Violation(pc, "tail_call: r2 must be a scalar index")
        # the handoff may fail at run time (missing entry), in which case
        # execution continues after the instruction like a normal call
        regs, stack_init = state
        regs = list(regs)
        for r in range(1, 6):
            regs[r] = UNINIT
        regs[0] = UNKNOWN
        return [(pc + 1, (tuple(regs), stack_init))]


def verify(program: FilterProgram, config: VerifierConfig | None = None) -> VerifierReport:
    """Check `program`; on acceptance its `verified` flag is set."""
    config = config or VerifierConfig()

    if len(program.instructions) == 0:
        return VerifierReport(False, "program is empty", None)
    if len(program.instructions) > config.max_instructions:
        return VerifierReport(
            False,
            f"program exceeds {config.max_instructions} instructions",
            None,
        )
    for decl in program.map_refs:
        try:
            decl.validate()
        except ValueError as exc:
            return VerifierReport(False, f"bad map declaration: {exc}", None)

    walker = _Walker(program, config)
    entry = (0, walker.entry_state())

    # iterative DFS: `on_path` detects abstract-state cycles, `completed`
    # memoizes subtrees already proven terminating
    frames = [[entry, None, 0]]
    on_path = {entry}
    completed = set()
    steps = 0

    try:
        while frames:
            frame = frames[-1]
            (pc, state), succs, idx = frame
            if succs is None:
                steps += 1
                if steps > config.step_budget:
                    raise _Violation(
                        pc, "termination not proven within step budget"
                    )
                frame[1] = succs = walker.successors(pc, state)
            if idx >= len(succs):
                frames.pop()
                on_path.discard((pc, state))
                completed.add((pc, state))
                continue
            frame[2] += 1
            nxt = succs[idx]
            if nxt in completed:
                continue
            if nxt in on_path:
                raise _Violation(
                    pc, "unbounded loop: abstract state repeats on a path"
                )
            on_path.add(nxt)
            frames.append([nxt, None, 0])
    except _Violation as v:
        return VerifierReport(
            False,
            v.reason,
            v.pc if v.pc >= 0 else pc,
            notes=dict(walker.visits),
            abstract_steps=steps,
        )

    program.verified = True
    return VerifierReport(True, "", None, notes=dict(walker.visits),
                          abstract_steps=steps)
