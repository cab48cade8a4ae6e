"""Hand tools shared by the test modules: context builders, one-call
policy attachment, and a small trace runner."""

from __future__ import annotations

import json
from importlib.resources import files

from sfvm.engine import Engine
from sfvm.isa import SyscallContext
from sfvm.sim import Simulator
from sfvm.snapshot import DescriptorTable
from sfvm.trace import parse_trace


def ctx(nr, *args, addr=0):
    padded = (tuple(args) + (0,) * 6)[:6]
    return SyscallContext(nr=nr, args=padded, calling_address=addr)


def bundled_descriptors() -> DescriptorTable:
    raw = json.loads((files("sfvm") / "data" / "descriptors.json")
                     .read_text())
    return DescriptorTable.from_json(raw)


def attach(engine: Engine, program, tid=None) -> int:
    """Spawn a no-new-privs task (unless given one) and install."""
    if tid is None:
        tid = engine.spawn(nnp=True)
    engine.install(tid, engine.load(tid, program))
    return tid


def probe(engine: Engine, tid: int, c: SyscallContext) -> dict:
    """One full enter/exit cycle; leaves the task between syscalls."""
    record = engine.run_syscall(tid, c)
    if record["action"] in ("allow", "log"):
        engine.syscall_exit(tid)
    else:
        engine.task(tid).denied_enter = False
    return record


def trace_text(events) -> str:
    return "\n".join(json.dumps(ev) for ev in events)


def run_trace(events, **kwargs) -> Simulator:
    sim = Simulator(parse_trace(trace_text(events)), **kwargs)
    sim.run()
    return sim


def decisions(entries, task=None, nr=None, markers=True):
    out = []
    for e in entries:
        if e["kind"] != "decision":
            continue
        if not markers and e.get("marker"):
            continue
        if task is not None and e["task"] != task:
            continue
        if nr is not None and e["nr"] != nr:
            continue
        out.append(e)
    return out
