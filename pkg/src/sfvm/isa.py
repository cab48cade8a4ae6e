"""Instruction set, syscall context, and the binary program format.

The filter machine is a small 64-bit register VM patterned after eBPF:

  * eleven registers r0..r10; r10 is the read-only frame pointer for a
    512-byte per-invocation stack,
  * helper calls take arguments in r1..r5 and return in r0; r1..r5 are
    clobbered by a call, r6..r9 are preserved,
  * r1 holds the syscall context at entry,
  * every instruction is a fixed 16-byte record in the on-disk format.

Filters observe a 64-byte syscall context with the classic seccomp-data
layout: nr (4 bytes), arch (4), calling address (8), six 8-byte
arguments.  `ld_ctx` is the only way to read it and must load exactly
one whole field.

ALU mnemonics come in register and immediate forms; the assembler picks
the variant from the operand, but the two forms are distinct opcodes so
the wire format stays unambiguous.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

PROGRAM_MAGIC = b"SFVM"
PROGRAM_VERSION = 1

STACK_SIZE = 512
NUM_REGS = 11
FRAME_REG = 10

CTX_SIZE = 64
# offset -> width of the one field that starts there
CTX_FIELDS = {0: 4, 4: 4, 8: 8, 16: 8, 24: 8, 32: 8, 40: 8, 48: 8, 56: 8}

AUDIT_ARCH_X86_64 = 0xC000003E

U64_MASK = (1 << 64) - 1

SECTION_PLAIN = "seccomp"
SECTION_SLEEPABLE = "seccomp-sleepable"
SECTIONS = (SECTION_PLAIN, SECTION_SLEEPABLE)


class Opcode(IntEnum):
    # ALU64, register and immediate forms
    MOV_IMM = 0x01
    MOV_REG = 0x02
    ADD_IMM = 0x03
    ADD_REG = 0x04
    SUB_IMM = 0x05
    SUB_REG = 0x06
    MUL_IMM = 0x07
    MUL_REG = 0x08
    AND_IMM = 0x09
    AND_REG = 0x0A
    OR_IMM = 0x0B
    OR_REG = 0x0C
    XOR_IMM = 0x0D
    XOR_REG = 0x0E
    LSH_IMM = 0x0F
    LSH_REG = 0x10
    RSH_IMM = 0x11
    RSH_REG = 0x12
    # loads and stores
    LD_IMM64 = 0x20
    LD_CTX = 0x21
    LD_MAP = 0x22
    ST_MAP = 0x23
    # jumps; conditional compares are unsigned
    JEQ_IMM = 0x30
    JEQ_REG = 0x31
    JNE_IMM = 0x32
    JNE_REG = 0x33
    JGT_IMM = 0x34
    JGT_REG = 0x35
    JGE_IMM = 0x36
    JGE_REG = 0x37
    JLT_IMM = 0x38
    JLT_REG = 0x39
    JLE_IMM = 0x3A
    JLE_REG = 0x3B
    JSET_IMM = 0x3C
    JSET_REG = 0x3D
    JA = 0x3F
    CALL = 0x40
    TAIL_CALL = 0x41
    EXIT = 0x42


ALU_OPCODES = frozenset(op for op in Opcode if op <= Opcode.RSH_REG)
JUMP_COND_OPCODES = frozenset(
    op for op in Opcode if Opcode.JEQ_IMM <= op <= Opcode.JSET_REG
)
# src operand form: opcodes whose value is even in the ALU/jump blocks read
# a source register, odd ones an immediate (see the enum layout above)
IMM_FORM = frozenset(
    op
    for op in Opcode
    if op in ALU_OPCODES or op in JUMP_COND_OPCODES
    if op.name.endswith("_IMM")
)

# ld_imm64 src=1 marks the immediate as an index into the program's map
# declarations rather than a literal (the eBPF pseudo-map convention)
LD_IMM64_MAP_REF = 1

# mnemonic -> (imm-form opcode, reg-form opcode); shared by the assembler,
# the verifier, and the interpreter so all three agree on semantics
ALU_FORMS = {
    "mov": (Opcode.MOV_IMM, Opcode.MOV_REG),
    "add": (Opcode.ADD_IMM, Opcode.ADD_REG),
    "sub": (Opcode.SUB_IMM, Opcode.SUB_REG),
    "mul": (Opcode.MUL_IMM, Opcode.MUL_REG),
    "and": (Opcode.AND_IMM, Opcode.AND_REG),
    "or": (Opcode.OR_IMM, Opcode.OR_REG),
    "xor": (Opcode.XOR_IMM, Opcode.XOR_REG),
    "lsh": (Opcode.LSH_IMM, Opcode.LSH_REG),
    "rsh": (Opcode.RSH_IMM, Opcode.RSH_REG),
}
JUMP_FORMS = {
    "jeq": (Opcode.JEQ_IMM, Opcode.JEQ_REG),
    "jne": (Opcode.JNE_IMM, Opcode.JNE_REG),
    "jgt": (Opcode.JGT_IMM, Opcode.JGT_REG),
    "jge": (Opcode.JGE_IMM, Opcode.JGE_REG),
    "jlt": (Opcode.JLT_IMM, Opcode.JLT_REG),
    "jle": (Opcode.JLE_IMM, Opcode.JLE_REG),
    "jset": (Opcode.JSET_IMM, Opcode.JSET_REG),
}

ALU_BASE = {}
for _name, (_imm_op, _reg_op) in ALU_FORMS.items():
    ALU_BASE[_imm_op] = _name
    ALU_BASE[_reg_op] = _name
JUMP_BASE = {}
for _name, (_imm_op, _reg_op) in JUMP_FORMS.items():
    JUMP_BASE[_imm_op] = _name
    JUMP_BASE[_reg_op] = _name


def eval_alu(base: str, a: int, b: int) -> int:
    """64-bit unsigned ALU semantics; shifts use the low 6 bits."""
    if base == "mov":
        r = b
    elif base == "add":
        r = a + b
    elif base == "sub":
        r = a - b
    elif base == "mul":
        r = a * b
    elif base == "and":
        r = a & b
    elif base == "or":
        r = a | b
    elif base == "xor":
        r = a ^ b
    elif base == "lsh":
        r = a << (b & 63)
    elif base == "rsh":
        r = (a & U64_MASK) >> (b & 63)
    else:
        raise AssertionError(base)
    return r & U64_MASK


def eval_cond(base: str, a: int, b: int) -> bool:
    """Unsigned comparison semantics for conditional jumps."""
    a &= U64_MASK
    b &= U64_MASK
    if base == "jeq":
        return a == b
    if base == "jne":
        return a != b
    if base == "jgt":
        return a > b
    if base == "jge":
        return a >= b
    if base == "jlt":
        return a < b
    if base == "jle":
        return a <= b
    if base == "jset":
        return (a & b) != 0
    raise AssertionError(base)

I16_MIN, I16_MAX = -(1 << 15), (1 << 15) - 1
I64_MIN, I64_MAX = -(1 << 63), (1 << 63) - 1


class Helper(IntEnum):
    """Helper ids; values are stable and appear in the wire format."""

    MAP_LOOKUP_ELEM = 1
    MAP_UPDATE_ELEM = 2
    MAP_DELETE_ELEM = 3
    TAIL_CALL = 4
    KTIME_GET_NS = 5
    SAFE_READ_USER = 6
    SAFE_READ_USER_STR = 7
    SAFE_TASK_STORAGE_GET = 8
    SAFE_TASK_STORAGE_DELETE = 9
    WAIT_SYSCALL = 10


class HelperCategory(IntEnum):
    STATE_MANAGEMENT = 1
    SERIALIZATION = 2
    USER_ACCESS = 3
    KERNEL_ACCESS = 4
    PROGRAM_FEATURES = 5


HELPER_CATEGORIES = {
    Helper.MAP_LOOKUP_ELEM: HelperCategory.STATE_MANAGEMENT,
    Helper.MAP_UPDATE_ELEM: HelperCategory.STATE_MANAGEMENT,
    Helper.MAP_DELETE_ELEM: HelperCategory.STATE_MANAGEMENT,
    Helper.SAFE_TASK_STORAGE_GET: HelperCategory.STATE_MANAGEMENT,
    Helper.SAFE_TASK_STORAGE_DELETE: HelperCategory.STATE_MANAGEMENT,
    Helper.WAIT_SYSCALL: HelperCategory.SERIALIZATION,
    Helper.SAFE_READ_USER: HelperCategory.USER_ACCESS,
    Helper.SAFE_READ_USER_STR: HelperCategory.USER_ACCESS,
    Helper.KTIME_GET_NS: HelperCategory.KERNEL_ACCESS,
    Helper.TAIL_CALL: HelperCategory.PROGRAM_FEATURES,
}

HELPER_NAMES = {h: h.name.lower() for h in Helper}
HELPERS_BY_NAME = {name: h for h, name in HELPER_NAMES.items()}

USER_ACCESS_HELPERS = frozenset(
    {Helper.SAFE_READ_USER, Helper.SAFE_READ_USER_STR}
)


class MapKind(IntEnum):
    ARRAY = 1
    HASH = 2
    TASK_STORAGE = 3
    PROG_ARRAY = 4


MAP_KIND_NAMES = {k: k.name.lower() for k in MapKind}
MAP_KINDS_BY_NAME = {name: k for k, name in MAP_KIND_NAMES.items()}


@dataclass(frozen=True)
class SyscallContext:
    """The 64-byte record a filter inspects (seccomp-data layout)."""

    nr: int
    arch: int = AUDIT_ARCH_X86_64
    calling_address: int = 0
    args: tuple = (0, 0, 0, 0, 0, 0)

    def __post_init__(self):
        if len(self.args) != 6:
            raise ValueError("context carries exactly six arguments")

    def pack(self) -> bytes:
        return struct.pack(
            "<iI7Q",
            self.nr,
            self.arch & 0xFFFFFFFF,
            self.calling_address & U64_MASK,
            *(a & U64_MASK for a in self.args),
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "SyscallContext":
        if len(raw) != CTX_SIZE:
            raise ValueError(f"context record must be {CTX_SIZE} bytes")
        nr, arch, addr, *args = struct.unpack("<iI7Q", raw)
        return cls(nr=nr, arch=arch, calling_address=addr, args=tuple(args))

    def field(self, offset: int) -> int:
        """Value of the whole field at `offset`, zero-extended to u64."""
        if offset == 0:
            return self.nr & 0xFFFFFFFF
        if offset == 4:
            return self.arch & 0xFFFFFFFF
        if offset == 8:
            return self.calling_address & U64_MASK
        if offset in (16, 24, 32, 40, 48, 56):
            return self.args[(offset - 16) // 8] & U64_MASK
        raise ValueError(f"no context field starts at offset {offset}")


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dst: int = 0
    src: int = 0
    offset: int = 0
    imm: int = 0

    def __post_init__(self):
        if not 0 <= self.dst < NUM_REGS or not 0 <= self.src < NUM_REGS:
            raise ValueError("register index out of range (r0..r10)")
        if not I16_MIN <= self.offset <= I16_MAX:
            raise ValueError("offset does not fit in i16")
        if not I64_MIN <= self.imm <= I64_MAX:
            raise ValueError("immediate does not fit in i64")

    # instructions are immutable; sharing across copied machine states is fine
    def __deepcopy__(self, memo):
        return self


@dataclass
class MapDecl:
    """A map declared by a program.

    `initial_entries` (and `initial_programs` for prog_array maps) carry
    contents the map must start with; the text assembly syntax cannot
    express them, so they survive only through the binary format and the
    policy generators.
    """

    name: str
    kind: MapKind
    key_size: int
    value_size: int
    max_entries: int
    initial_entries: dict = field(default_factory=dict)
    initial_programs: dict = field(default_factory=dict)

    def validate(self):
        if not self.name:
            raise ValueError("map name must be non-empty")
        if self.key_size <= 0 or self.value_size <= 0 or self.max_entries <= 0:
            raise ValueError(f"map {self.name}: sizes must be positive")
        if self.kind == MapKind.ARRAY and self.key_size != 8:
            raise ValueError(f"map {self.name}: array maps use 8-byte index keys")
        for k, v in self.initial_entries.items():
            if len(k) != self.key_size or len(v) != self.value_size:
                raise ValueError(f"map {self.name}: initial entry size mismatch")
        if self.initial_programs and self.kind != MapKind.PROG_ARRAY:
            raise ValueError(f"map {self.name}: only prog_array maps hold programs")


@dataclass
class FilterProgram:
    """A filter: instructions plus the maps it references.

    `verified` is set by the verifier and `load_userns` by the engine at
    load time; both start unset.
    """

    instructions: tuple
    sleepable: bool = False
    map_refs: tuple = ()
    verified: bool = False
    load_userns: int | None = None

    # Treated as immutable once built: the verifier flips `verified` at most
    # once and loads record `load_userns` on a per-load copy, so sharing one
    # object across snapshotted machine states is safe and keeps state
    # copies cheap.
    def __deepcopy__(self, memo):
        return self

    @property
    def section_name(self) -> str:
        return SECTION_SLEEPABLE if self.sleepable else SECTION_PLAIN

    @property
    def uses_user_access(self) -> bool:
        return any(
            ins.opcode == Opcode.CALL and ins.imm in USER_ACCESS_HELPERS
            for ins in self.instructions
        )

    def map_index(self, name: str) -> int:
        for i, decl in enumerate(self.map_refs):
            if decl.name == name:
                return i
        raise KeyError(name)


# ---------------------------------------------------------------------------
# binary wire format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHII")
_INSN = struct.Struct("<HBBhHq")
_FLAG_SLEEPABLE = 1


class ProgramFormatError(ValueError):
    pass


def encode_program(program: FilterProgram) -> bytes:
    out = bytearray()
    flags = _FLAG_SLEEPABLE if program.sleepable else 0
    out += _HEADER.pack(
        PROGRAM_MAGIC,
        PROGRAM_VERSION,
        flags,
        len(program.instructions),
        len(program.map_refs),
    )
    for decl in program.map_refs:
        name = decl.name.encode()
        if len(name) > 255:
            raise ProgramFormatError(f"map name too long: {decl.name!r}")
        out += struct.pack("<B", len(name)) + name
        out += struct.pack(
            "<BIII", decl.kind, decl.key_size, decl.value_size, decl.max_entries
        )
        out += struct.pack("<I", len(decl.initial_entries))
        for k in sorted(decl.initial_entries):
            out += k + decl.initial_entries[k]
        out += struct.pack("<I", len(decl.initial_programs))
        for idx in sorted(decl.initial_programs):
            blob = encode_program(decl.initial_programs[idx])
            out += struct.pack("<QI", idx, len(blob)) + blob
    for ins in program.instructions:
        out += _INSN.pack(ins.opcode, ins.dst, ins.src, ins.offset, 0, ins.imm)
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ProgramFormatError("truncated program file")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def decode_program(raw: bytes) -> FilterProgram:
    rd = _Reader(raw)
    magic, version, flags, n_insns, n_maps = rd.unpack(_HEADER)
    if magic != PROGRAM_MAGIC:
        raise ProgramFormatError("bad magic; not a filter program file")
    if version != PROGRAM_VERSION:
        raise ProgramFormatError(f"unsupported program version {version}")
    decls = []
    for _ in range(n_maps):
        (name_len,) = struct.unpack("<B", rd.take(1))
        name = rd.take(name_len).decode()
        kind, key_size, value_size, max_entries = struct.unpack(
            "<BIII", rd.take(13)
        )
        try:
            kind = MapKind(kind)
        except ValueError:
            raise ProgramFormatError(f"map {name}: unknown kind {kind}") from None
        (n_entries,) = struct.unpack("<I", rd.take(4))
        entries = {}
        for _ in range(n_entries):
            k = rd.take(key_size)
            entries[k] = rd.take(value_size)
        (n_progs,) = struct.unpack("<I", rd.take(4))
        programs = {}
        for _ in range(n_progs):
            idx, blob_len = struct.unpack("<QI", rd.take(12))
            programs[idx] = decode_program(rd.take(blob_len))
        decl = MapDecl(name, kind, key_size, value_size, max_entries,
                       initial_entries=entries, initial_programs=programs)
        decl.validate()
        decls.append(decl)
    insns = []
    for i in range(n_insns):
        opcode, dst, src, off, _pad, imm = rd.unpack(_INSN)
        try:
            opcode = Opcode(opcode)
        except ValueError:
            raise ProgramFormatError(
                f"instruction {i}: unknown opcode 0x{opcode:x}"
            ) from None
        insns.append(Instruction(opcode, dst, src, off, imm))
    if rd.pos != len(raw):
        raise ProgramFormatError("trailing bytes after program body")
    return FilterProgram(
        instructions=tuple(insns),
        sleepable=bool(flags & _FLAG_SLEEPABLE),
        map_refs=tuple(decls),
    )
