"""Policy generators: assembly emitters for common filtering idioms.

Each generator produces assembly text for one policy family, assembles
it, and attaches any precomputed map contents, returning a program
ready to load.  Emitting text rather than instruction lists keeps the
generators honest (everything goes through the same assembler and
checker as hand-written filters) and makes `--dump-asm` style
debugging trivial.

Families:

  allow_all          two instructions, the do-nothing baseline
  allowlist          allow a set of syscall numbers (linear chain,
                     balanced tree, or hash lookup)
  denylist           block a set, allow the rest (linear or hash)
  count_limit        budget N calls of one syscall, optionally only
                     when an argument matches
  rate_limit         token bucket per syscall; token fractions are
                     held in nanotokens so refill needs no division
  temporal           two-phase allowlist driven by a marker syscall
  flow_integrity     state machine over syscall transitions, with
                     optional per-call-site origin pinning
  serialization      stall a syscall while a partner is in flight
  validation_cache   per-syscall argument checks, dispatched through
                     a program array, with an optional decision cache

Set-membership maps carry one entry per member with value 1; code
only ever tests hit or miss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .actions import (
    RET_ALLOW,
    RET_ERRNO,
    RET_KILL_PROCESS,
    RET_KILL_THREAD,
    RET_LOG,
    RET_TRAP,
)
from .asm import assemble
from .isa import FilterProgram

SWEEP_DOMAIN = range(0, 451)

_ACTION_WORDS = {
    "allow": RET_ALLOW,
    "log": RET_LOG,
    "trap": RET_TRAP,
    "kill_thread": RET_KILL_THREAD,
    "kill_process": RET_KILL_PROCESS,
}


def parse_action(spec) -> int:
    """"allow", "kill_process", "errno:13", or a raw integer."""
    if isinstance(spec, int):
        return spec
    if spec in _ACTION_WORDS:
        return _ACTION_WORDS[spec]
    if isinstance(spec, str) and spec.startswith("errno:"):
        code = int(spec.split(":", 1)[1], 0)
        if not 0 <= code <= 0xFFF:
            raise ValueError(f"errno out of range in {spec!r}")
        return RET_ERRNO | code
    raise ValueError(f"unknown action spec {spec!r}")


def _u64(value: int) -> bytes:
    return (value & (2 ** 64 - 1)).to_bytes(8, "little")


def _member_entries(values) -> dict[bytes, bytes]:
    return {_u64(v): _u64(1) for v in values}


def _finish(text: str, entries: dict | None = None,
            programs: dict | None = None) -> FilterProgram:
    """Assemble and attach initial map contents by map name."""
    program = assemble(text)
    if not entries and not programs:
        return program
    decls = list(program.map_refs)
    for name, content in (entries or {}).items():
        idx = program.map_index(name)
        decls[idx] = replace(decls[idx], initial_entries=dict(content))
    for name, content in (programs or {}).items():
        idx = program.map_index(name)
        decls[idx] = replace(decls[idx], initial_programs=dict(content))
    return replace(program, map_refs=tuple(decls))


def _tails(allow_raw: int, deny_raw: int) -> str:
    return (f"allow:\n"
            f"    mov r0, {allow_raw:#x}\n"
            f"    exit\n"
            f"deny:\n"
            f"    mov r0, {deny_raw:#x}\n"
            f"    exit\n")


# -- simple set policies -------------------------------------------------

def gen_allow_all() -> FilterProgram:
    return _finish(f"section seccomp\n"
                   f"    mov r0, {RET_ALLOW:#x}\n"
                   f"    exit\n")


def _tree_lines(values, out, counter):
    """Balanced comparison tree over sorted values; hits jump to allow."""
    if not values:
        out.append("    jmp deny")
        return
    mid = len(values) // 2
    pivot = values[mid]
    out.append(f"    jeq r2, {pivot}, allow")
    if len(values) == 1:
        out.append("    jmp deny")
        return
    label = f"gt{counter[0]}"
    counter[0] += 1
    out.append(f"    jgt r2, {pivot}, {label}")
    _tree_lines(values[:mid], out, counter)
    out.append(f"{label}:")
    _tree_lines(values[mid + 1:], out, counter)


def gen_allowlist(allowed, layout: str = "linear",
                  deny="errno:1") -> FilterProgram:
    allowed = sorted(set(allowed))
    deny_raw = parse_action(deny)
    if layout == "hash":
        text = (f"section seccomp\n"
                f"map allowed hash 8 8 {max(len(allowed), 1)}\n"
                f"    ld_ctx r2, 0\n"
                f"    st_map r10, r2, -8\n"
                f"    mov r2, r10\n"
                f"    add r2, -8\n"
                f"    ld_imm64 r1, map:allowed\n"
                f"    call map_lookup_elem\n"
                f"    jne r0, 0, allow\n"
                f"    jmp deny\n"
                + _tails(RET_ALLOW, deny_raw))
        return _finish(text, {"allowed": _member_entries(allowed)})
    lines = ["section seccomp", "    ld_ctx r2, 0"]
    if layout == "linear":
        lines += [f"    jeq r2, {v}, allow" for v in allowed]
        lines.append("    jmp deny")
    elif layout == "tree":
        _tree_lines(allowed, lines, [0])
    else:
        raise ValueError(f"unknown allowlist layout {layout!r}")
    return _finish("\n".join(lines) + "\n" + _tails(RET_ALLOW, deny_raw))


def gen_denylist(denied, layout: str = "linear", deny="errno:1",
                 hash_capacity: int = 512) -> FilterProgram:
    denied = sorted(set(denied))
    deny_raw = parse_action(deny)
    if layout == "hash":
        # capacity is fixed, not sized to the set, so the program and
        # its declarations are byte-identical across set sizes
        if len(denied) > hash_capacity:
            raise ValueError("denied set exceeds hash capacity")
        text = (f"section seccomp\n"
                f"map denied hash 8 8 {hash_capacity}\n"
                f"    ld_ctx r2, 0\n"
                f"    st_map r10, r2, -8\n"
                f"    mov r2, r10\n"
                f"    add r2, -8\n"
                f"    ld_imm64 r1, map:denied\n"
                f"    call map_lookup_elem\n"
                f"    jne r0, 0, deny\n"
                f"    jmp allow\n"
                + _tails(RET_ALLOW, deny_raw))
        return _finish(text, {"denied": _member_entries(denied)})
    if layout != "linear":
        raise ValueError(f"unknown denylist layout {layout!r}")
    lines = ["section seccomp", "    ld_ctx r2, 0"]
    lines += [f"    jeq r2, {v}, deny" for v in denied]
    return _finish("\n".join(lines) + "\n" + _tails(RET_ALLOW, deny_raw))


# -- stateful policies ------------------------------------------------------

def gen_count_limit(nr: int, max_count: int, arg_index: int | None = None,
                    arg_value: int | None = None,
                    deny="errno:1") -> FilterProgram:
    if (arg_index is None) != (arg_value is None):
        raise ValueError("arg_index and arg_value go together")
    guard = ""
    if arg_index is not None:
        if not 0 <= arg_index <= 5:
            raise ValueError("argument index out of range")
        guard = (f"    ld_ctx r2, {16 + 8 * arg_index}\n"
                 f"    jne r2, {arg_value}, allow\n")
    text = (f"section seccomp\n"
            f"map counter array 8 8 1\n"
            f"    ld_ctx r2, 0\n"
            f"    jne r2, {nr}, allow\n"
            + guard +
            f"    mov r2, 0\n"
            f"    st_map r10, r2, -8\n"
            f"    mov r2, r10\n"
            f"    add r2, -8\n"
            f"    ld_imm64 r1, map:counter\n"
            f"    call map_lookup_elem\n"
            f"    jeq r0, 0, deny\n"
            f"    ld_map r3, r0, 0\n"
            f"    jge r3, {max_count}, deny\n"
            f"    add r3, 1\n"
            f"    st_map r0, r3, 0\n"
            + _tails(RET_ALLOW, parse_action(deny)))
    return _finish(text)


NANOS_PER_TOKEN = 1_000_000_000


def gen_rate_limit(nr: int, rate_per_sec: int, capacity: int,
                   deny="errno:11") -> FilterProgram:
    """Token bucket: `rate_per_sec` tokens/s, burst up to `capacity`.

    One token is a billion nanotokens, so a rate of r tokens per
    second refills at exactly r nanotokens per nanosecond and the
    whole policy stays in integer multiplies.
    """
    if rate_per_sec <= 0 or capacity <= 0:
        raise ValueError("rate and capacity must be positive")
    cap_nano = capacity * NANOS_PER_TOKEN
    text = (f"section seccomp\n"
            f"map bucket array 8 24 1\n"
            f"    ld_ctx r2, 0\n"
            f"    jne r2, {nr}, allow\n"
            f"    mov r2, 0\n"
            f"    st_map r10, r2, -8\n"
            f"    mov r2, r10\n"
            f"    add r2, -8\n"
            f"    ld_imm64 r1, map:bucket\n"
            f"    call map_lookup_elem\n"
            f"    jeq r0, 0, deny\n"
            f"    mov r6, r0\n"
            f"    call ktime_get_ns\n"
            f"    mov r7, r0\n"
            f"    ld_map r3, r6, 0\n"
            f"    jne r3, 0, refill\n"
            f"    mov r3, 1\n"
            f"    st_map r6, r3, 0\n"
            f"    st_map r6, r7, 8\n"
            f"    ld_imm64 r4, {cap_nano}\n"
            f"    st_map r6, r4, 16\n"
            f"refill:\n"
            f"    ld_map r3, r6, 8\n"
            f"    mov r4, r7\n"
            f"    sub r4, r3\n"
            f"    mul r4, {rate_per_sec}\n"
            f"    ld_map r3, r6, 16\n"
            f"    add r3, r4\n"
            f"    ld_imm64 r5, {cap_nano}\n"
            f"    jle r3, r5, clamped\n"
            f"    mov r3, r5\n"
            f"clamped:\n"
            f"    st_map r6, r7, 8\n"
            f"    ld_imm64 r5, {NANOS_PER_TOKEN}\n"
            f"    jlt r3, r5, broke\n"
            f"    sub r3, r5\n"
            f"    st_map r6, r3, 16\n"
            f"    jmp allow\n"
            f"broke:\n"
            f"    st_map r6, r3, 16\n"
            f"    jmp deny\n"
            + _tails(RET_ALLOW, parse_action(deny)))
    return _finish(text)


# -- two-phase policies -------------------------------------------------

@dataclass(frozen=True)
class PhaseProfile:
    """An application's syscall needs before and after it finishes
    initializing, plus the marker syscall that announces the switch."""
    name: str
    s_init: frozenset
    s_serv: frozenset
    marker_nr: int

    @property
    def union_size(self) -> int:
        return len(self.s_init | self.s_serv)

    @property
    def common_size(self) -> int:
        return len(self.s_init & self.s_serv)

    @property
    def reduction_pct(self) -> float:
        """How much of the static attack surface the serving phase
        never needed, won back by dropping it after the switch."""
        union = self.union_size
        return (union - len(self.s_init)) / union * 100.0

    @staticmethod
    def _expand(ranges):
        out = set()
        for start, stop in ranges:
            out.update(range(start, stop))
        return frozenset(out)

    @classmethod
    def from_json(cls, name: str, raw: dict) -> "PhaseProfile":
        return cls(name=name,
                   s_init=cls._expand(raw["init"]),
                   s_serv=cls._expand(raw["serv"]),
                   marker_nr=raw["marker"])


def load_profiles(path=None) -> dict[str, PhaseProfile]:
    if path is None:
        from importlib.resources import files
        text = (files("sfvm") / "data" / "profiles.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    return {name: PhaseProfile.from_json(name, entry)
            for name, entry in raw.items()}


def gen_temporal(profile: PhaseProfile, deny="errno:1") -> FilterProgram:
    text = (f"section seccomp\n"
            f"map phase array 8 8 1\n"
            f"map init_set hash 8 8 {max(len(profile.s_init), 1)}\n"
            f"map serv_set hash 8 8 {max(len(profile.s_serv), 1)}\n"
            f"    ld_ctx r6, 0\n"
            f"    mov r2, 0\n"
            f"    st_map r10, r2, -8\n"
            f"    mov r2, r10\n"
            f"    add r2, -8\n"
            f"    ld_imm64 r1, map:phase\n"
            f"    call map_lookup_elem\n"
            f"    jeq r0, 0, deny\n"
            f"    mov r7, r0\n"
            f"    ld_map r3, r7, 0\n"
            f"    jne r3, 0, serving\n"
            f"    jne r6, {profile.marker_nr}, initcheck\n"
            f"    mov r3, 1\n"
            f"    st_map r7, r3, 0\n"
            f"    jmp allow\n"
            f"initcheck:\n"
            f"    st_map r10, r6, -16\n"
            f"    mov r2, r10\n"
            f"    add r2, -16\n"
            f"    ld_imm64 r1, map:init_set\n"
            f"    call map_lookup_elem\n"
            f"    jne r0, 0, allow\n"
            f"    jmp deny\n"
            f"serving:\n"
            f"    st_map r10, r6, -16\n"
            f"    mov r2, r10\n"
            f"    add r2, -16\n"
            f"    ld_imm64 r1, map:serv_set\n"
            f"    call map_lookup_elem\n"
            f"    jne r0, 0, allow\n"
            f"    jmp deny\n"
            + _tails(RET_ALLOW, parse_action(deny)))
    return _finish(text, {
        "init_set": _member_entries(profile.s_init),
        "serv_set": _member_entries(profile.s_serv),
    })


def gen_phase_baseline(profile: PhaseProfile, phase: str,
                       deny="errno:1") -> FilterProgram:
    """What a filter without state can offer the same application:
    the union allowlist for startup, narrowed by stacking a second
    serving-phase allowlist after the switch."""
    if phase == "union":
        allowed = (profile.s_init | profile.s_serv) | {profile.marker_nr}
    elif phase == "serv":
        allowed = set(profile.s_serv)
    else:
        raise ValueError(f"unknown baseline phase {phase!r}")
    return gen_allowlist(sorted(allowed), layout="linear", deny=deny)


# -- transition policies ---------------------------------------------------

def gen_flow_integrity(syscalls, transitions, origins=None,
                       deny="kill_process") -> FilterProgram:
    """State machine over syscall order.

    `syscalls` lists the governed numbers; anything else is denied
    outright.  `transitions` holds (prev, cur) pairs, with prev=None
    meaning "as the first governed call".  `origins`, when given, maps
    a syscall number to the calling addresses allowed to issue it.

    Codes are 1-based with 0 as the start state, so fresh per-process
    state needs no initialization: zero already means "nothing yet".
    """
    syscalls = list(dict.fromkeys(syscalls))
    n = len(syscalls)
    if n == 0:
        raise ValueError("flow integrity needs at least one syscall")
    code = {nr: i + 1 for i, nr in enumerate(syscalls)}
    origins = origins or {}
    for nr in origins:
        if nr not in code:
            raise ValueError(f"origin rule for ungoverned syscall {nr}")

    trans_entries = {}
    for prev, cur in transitions:
        prev_code = 0 if prev is None else code[prev]
        if cur not in code:
            raise ValueError(f"transition to ungoverned syscall {cur}")
        index = prev_code * n + (code[cur] - 1)
        trans_entries[_u64(index)] = _u64(1)

    origin_entries = {}
    for nr, addrs in origins.items():
        for addr in addrs:
            origin_entries[_u64(nr) + _u64(addr)] = _u64(1)

    lines = [
        "section seccomp",
        "map state task_storage 8 8 64",
        f"map trans array 8 8 {(n + 1) * n}",
    ]
    if origin_entries:
        lines.append(f"map origins hash 16 8 {len(origin_entries)}")
    lines.append("    ld_ctx r7, 0")
    for nr in syscalls:
        lines.append(f"    jeq r7, {nr}, is{code[nr]}")
    lines.append("    jmp deny")
    for nr in syscalls:
        c = code[nr]
        lines += [f"is{c}:",
                  f"    mov r6, {c}",
                  f"    mov r8, {1 if nr in origins else 0}",
                  "    jmp dispatch"]
    lines.append("dispatch:")
    if origin_entries:
        lines += [
            "    jeq r8, 0, checkstate",
            "    st_map r10, r7, -32",
            "    ld_ctx r3, 8",
            "    st_map r10, r3, -24",
            "    mov r2, r10",
            "    add r2, -32",
            "    ld_imm64 r1, map:origins",
            "    call map_lookup_elem",
            "    jeq r0, 0, deny",
        ]
    lines += [
        "checkstate:",
        "    ld_imm64 r1, map:state",
        "    mov r2, 1",
        "    call safe_task_storage_get",
        "    jeq r0, 0, deny",
        "    mov r7, r0",
        "    ld_map r3, r7, 0",
        f"    mul r3, {n}",
        "    mov r4, r6",
        "    sub r4, 1",
        "    add r3, r4",
        "    st_map r10, r3, -8",
        "    mov r2, r10",
        "    add r2, -8",
        "    ld_imm64 r1, map:trans",
        "    call map_lookup_elem",
        "    jeq r0, 0, deny",
        "    ld_map r3, r0, 0",
        "    jeq r3, 0, deny",
        "    st_map r7, r6, 0",
    ]
    text = "\n".join(lines) + "\n" + _tails(RET_ALLOW, parse_action(deny))
    entries = {"trans": trans_entries}
    if origin_entries:
        entries["origins"] = origin_entries
    return _finish(text, entries)


SENTINEL = 0xFFFFFFFFFFFFFFFF


def gen_serialization(pairs: dict) -> FilterProgram:
    """Hold a syscall at the door while a partner syscall is in
    flight anywhere in the system.  Up to two partners per syscall;
    unused slots hold an all-ones sentinel.  Never denies."""
    entries = {}
    for nr, partners in pairs.items():
        partners = list(partners)
        if not 1 <= len(partners) <= 2:
            raise ValueError(f"syscall {nr}: need one or two partners")
        while len(partners) < 2:
            partners.append(SENTINEL)
        entries[_u64(int(nr))] = _u64(partners[0]) + _u64(partners[1])
    text = (f"section seccomp\n"
            f"map partners hash 8 16 {max(len(entries), 1)}\n"
            f"    ld_ctx r6, 0\n"
            f"    st_map r10, r6, -8\n"
            f"    mov r2, r10\n"
            f"    add r2, -8\n"
            f"    ld_imm64 r1, map:partners\n"
            f"    call map_lookup_elem\n"
            f"    jeq r0, 0, allow\n"
            f"    mov r7, r0\n"
            f"    ld_map r3, r7, 0\n"
            f"    ld_imm64 r4, {SENTINEL:#x}\n"
            f"    jeq r3, r4, second\n"
            f"    mov r1, r6\n"
            f"    mov r2, r3\n"
            f"    call wait_syscall\n"
            f"second:\n"
            f"    ld_map r3, r7, 8\n"
            f"    ld_imm64 r4, {SENTINEL:#x}\n"
            f"    jeq r3, r4, allow\n"
            f"    mov r1, r6\n"
            f"    mov r2, r3\n"
            f"    call wait_syscall\n"
            f"allow:\n"
            f"    mov r0, {RET_ALLOW:#x}\n"
            f"    exit\n")
    return _finish(text, {"partners": entries})


# -- dispatched argument validation ------------------------------------------

def _check_program(nr: int, arg_rules: dict, cached: bool, deny_raw: int,
                   cache_capacity: int) -> FilterProgram:
    lines = ["section seccomp"]
    if cached:
        lines.append(f"map cache hash 48 8 {cache_capacity}")
        # stage [nr, arg0..arg4] as the cache key at r10-48
        lines.append("    ld_ctx r3, 0")
        lines.append("    st_map r10, r3, -48")
        for i in range(5):
            lines.append(f"    ld_ctx r3, {16 + 8 * i}")
            lines.append(f"    st_map r10, r3, {-40 + 8 * i}")
        lines += [
            "    mov r2, r10",
            "    add r2, -48",
            "    ld_imm64 r1, map:cache",
            "    call map_lookup_elem",
            "    jne r0, 0, allow",
        ]
    for k, (arg_idx, values) in enumerate(sorted(arg_rules.items())):
        if not 0 <= arg_idx <= 4:
            raise ValueError("validated arguments must be indexes 0-4")
        lines.append(f"    ld_ctx r3, {16 + 8 * arg_idx}")
        lines += [f"    jeq r3, {v}, arg{k}ok" for v in sorted(set(values))]
        lines.append("    jmp deny")
        lines.append(f"arg{k}ok:")
    if cached:
        lines += [
            "    mov r3, 1",
            "    st_map r10, r3, -56",
            "    mov r2, r10",
            "    add r2, -48",
            "    mov r3, r10",
            "    add r3, -56",
            "    mov r4, 0",
            "    ld_imm64 r1, map:cache",
            "    call map_update_elem",
        ]
    text = "\n".join(lines) + "\n" + _tails(RET_ALLOW, deny_raw)
    return _finish(text)


def gen_validation_cache(rules: dict, cached: bool = True, deny="errno:1",
                         default="allow",
                         cache_capacity: int = 1024) -> FilterProgram:
    """Per-syscall argument allowlists behind a dispatcher.

    `rules` maps syscall number -> {argument index -> allowed values}.
    Each governed syscall gets its own checker program, reached by a
    handoff through a program array.  With `cached`, a checker first
    consults a decision cache keyed on (nr, args 0-4) and only walks
    its comparison chains on a miss, inserting on success.  Ungoverned
    syscalls get the `default` action.
    """
    deny_raw = parse_action(deny)
    governed = sorted(int(nr) for nr in rules)
    if not governed:
        raise ValueError("no rules given")
    lines = ["section seccomp",
             f"map handlers prog_array 8 8 {len(governed)}",
             "    ld_ctx r6, 0"]
    for slot, nr in enumerate(governed):
        lines.append(f"    jeq r6, {nr}, disp{slot}")
    lines += [f"    mov r0, {parse_action(default):#x}", "    exit"]
    for slot, _ in enumerate(governed):
        lines += [f"disp{slot}:",
                  "    ld_imm64 r1, map:handlers",
                  f"    mov r2, {slot}",
                  "    tail_call",
                  # a populated slot never falls through; fail closed
                  f"    mov r0, {deny_raw:#x}",
                  "    exit"]
    handlers = {}
    for slot, nr in enumerate(governed):
        arg_rules = {int(a): vals for a, vals in rules[nr].items()}
        handlers[slot] = _check_program(nr, arg_rules, cached, deny_raw,
                                        cache_capacity)
    return _finish("\n".join(lines) + "\n",
                   programs={"handlers": handlers})


# -- trace-facing constructor ---------------------------------------------

def build_program(spec: dict) -> FilterProgram:
    """Build a policy from a JSON-friendly generator spec."""
    spec = dict(spec)
    kind = spec.pop("generator", None)
    if kind == "allow_all":
        return gen_allow_all()
    if kind == "allowlist":
        return gen_allowlist(spec["allowed"],
                             layout=spec.get("layout", "linear"),
                             deny=spec.get("deny", "errno:1"))
    if kind == "denylist":
        return gen_denylist(spec["denied"],
                            layout=spec.get("layout", "linear"),
                            deny=spec.get("deny", "errno:1"))
    if kind == "count_limit":
        return gen_count_limit(spec["nr"], spec["max"],
                               arg_index=spec.get("arg_index"),
                               arg_value=spec.get("arg_value"),
                               deny=spec.get("deny", "errno:1"))
    if kind == "rate_limit":
        return gen_rate_limit(spec["nr"], spec["rate"], spec["capacity"],
                              deny=spec.get("deny", "errno:11"))
    if kind == "temporal":
        profile = spec["profile"]
        if isinstance(profile, str):
            profile = load_profiles()[profile]
        else:
            profile = PhaseProfile.from_json(profile.get("name", "inline"),
                                             profile)
        return gen_temporal(profile, deny=spec.get("deny", "errno:1"))
    if kind == "flow_integrity":
        transitions = [(None if p is None else int(p), int(c))
                       for p, c in spec["transitions"]]
        origins = {int(nr): addrs
                   for nr, addrs in spec.get("origins", {}).items()}
        return gen_flow_integrity(spec["syscalls"], transitions,
                                  origins=origins or None,
                                  deny=spec.get("deny", "kill_process"))
    if kind == "serialization":
        return gen_serialization({int(nr): ps
                                  for nr, ps in spec["pairs"].items()})
    if kind == "validation_cache":
        rules = {int(nr): {int(a): vals for a, vals in argmap.items()}
                 for nr, argmap in spec["rules"].items()}
        return gen_validation_cache(rules, cached=spec.get("cached", True),
                                    deny=spec.get("deny", "errno:1"),
                                    default=spec.get("default", "allow"))
    raise ValueError(f"unknown policy generator {kind!r}")
