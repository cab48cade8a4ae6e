"""Scheduler behavior: reproducibility, blocking, drains, exploration."""

from __future__ import annotations

import pytest

from sfvm.asm import assemble
from sfvm.isa import encode_program
from sfvm.sim import (
    MAX_EXPLORE_STEPS,
    ExplorationLimit,
    Simulator,
    explore_interleavings,
    log_digest,
)
from sfvm.trace import TraceError, parse_trace

from .helpers import bundled_descriptors, decisions, run_trace, trace_text


def hexprog(source: str) -> str:
    return encode_program(assemble(source)).hex()


ALLOW_ALL = hexprog(
    "section seccomp\n"
    "    ld_imm64 r0, 0x7fff0000\n"
    "    exit\n")

KILL99 = hexprog(
    "section seccomp\n"
    "    ld_ctx r1, 0\n"
    "    jeq r1, 99, kill\n"
    "    ld_imm64 r0, 0x7fff0000\n"
    "    exit\n"
    "kill:\n"
    "    ld_imm64 r0, 0x80000000\n"
    "    exit\n")

# waits for the syscalls named in args[0] and args[1] to drain
WAIT2 = hexprog(
    "section seccomp\n"
    "    ld_ctx r1, 0\n"
    "    ld_ctx r2, 16\n"
    "    call wait_syscall\n"
    "    ld_ctx r1, 0\n"
    "    ld_ctx r2, 24\n"
    "    call wait_syscall\n"
    "    ld_imm64 r0, 0x7fff0000\n"
    "    exit\n")


def attach_events(tid: int, program_hex: str) -> list[dict]:
    return [
        {"event": "load", "task": tid, "handle": 1,
         "program_hex": program_hex},
        {"event": "install", "task": tid, "handle": 1},
    ]


def test_same_seed_same_run():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "spawn", "tid": 2, "nnp": True},
        *attach_events(1, ALLOW_ALL),
        *attach_events(2, KILL99),
        {"event": "syscall_enter", "task": 1, "nr": 0},
        {"event": "syscall_exit", "task": 1},
        {"event": "syscall_enter", "task": 2, "nr": 3},
        {"event": "syscall_exit", "task": 2},
    ]
    a = run_trace(events, seed=7)
    b = run_trace(events, seed=7)
    assert a.digest() == b.digest()
    assert a.schedule == b.schedule
    assert a.metrics() == b.metrics()


def test_explicit_schedule_replays_a_seeded_run():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "spawn", "tid": 2, "nnp": True},
        *attach_events(1, ALLOW_ALL),
        *attach_events(2, ALLOW_ALL),
        {"event": "syscall_enter", "task": 1, "nr": 0},
        {"event": "syscall_exit", "task": 1},
        {"event": "syscall_enter", "task": 2, "nr": 1},
        {"event": "syscall_exit", "task": 2},
    ]
    seeded = run_trace(events, seed=3)
    replayed = run_trace(events, schedule=seeded.schedule)
    assert replayed.digest() == seeded.digest()


def test_schedule_must_pick_runnable_tasks():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "set_nnp", "task": 1},
    ]
    with pytest.raises(TraceError, match="not runnable"):
        run_trace(events, schedule=[2])


def test_exhausted_schedule_leaves_the_run_unfinished():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "set_nnp", "task": 1},
        {"event": "set_dumpable", "task": 1, "value": False},
    ]
    sim = run_trace(events, schedule=[1])
    assert not sim.finished
    assert sim.pos[1] == 1
    # picking up where the schedule stopped works
    sim.step(1)
    sim.finalize()
    assert sim.finished
    assert not any(e["kind"] == "deadlock" for e in sim.entries)


def test_clock_advances_with_dt_ns():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True, "dt_ns": 40},
        *attach_events(1, ALLOW_ALL),
        {"event": "syscall_enter", "task": 1, "nr": 0, "dt_ns": 60},
        {"event": "syscall_exit", "task": 1},
    ]
    sim = run_trace(events)
    assert sim.engine.clock_ns == 100
    assert decisions(sim.entries)[0]["clock"] == 100


def test_cross_waiting_filters_deadlock():
    # task 1 passes through syscall 52 and leaves; tasks 2 and 3 then
    # hold 54 and 52 respectively while each waits for the other's
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "spawn", "tid": 2, "nnp": True},
        {"event": "spawn", "tid": 3, "nnp": True},
        *attach_events(1, WAIT2),
        *attach_events(2, WAIT2),
        *attach_events(3, WAIT2),
        {"event": "syscall_enter", "task": 1, "nr": 52, "args": [50, 50]},
        {"event": "syscall_exit", "task": 1},
        {"event": "syscall_enter", "task": 2, "nr": 54, "args": [51, 52]},
        {"event": "syscall_enter", "task": 3, "nr": 52, "args": [53, 54]},
    ]
    sim = run_trace(events, schedule=[1, 1, 2, 2, 3, 3, 1, 2, 3, 1])
    assert sim.blocked == {2: ("wait", 52), 3: ("wait", 54)}
    deadlock = [e for e in sim.entries if e["kind"] == "deadlock"]
    assert deadlock == [{"kind": "deadlock", "blocked": {
        "2": "waiting for syscall 52 to drain",
        "3": "waiting for syscall 54 to drain",
    }}]
    assert sim.metrics()["deadlocked"]


def test_wait_resolves_when_the_partner_drains():
    # same shape minus the cross edge: task 2 wakes once 52 drains
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "spawn", "tid": 2, "nnp": True},
        *attach_events(1, WAIT2),
        *attach_events(2, WAIT2),
        {"event": "syscall_enter", "task": 1, "nr": 52, "args": [50, 50]},
        {"event": "syscall_exit", "task": 1},
        {"event": "syscall_enter", "task": 2, "nr": 54, "args": [52, 52]},
        {"event": "syscall_exit", "task": 2},
    ]
    sim = run_trace(events, schedule=[1, 1, 2, 2, 1, 2, 1, 2, 2])
    assert not sim.metrics()["deadlocked"]
    assert [d["nr"] for d in decisions(sim.entries)] == [52, 54]


def test_stalled_store_blocks_until_release():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        *attach_events(1, ALLOW_ALL),
        {"event": "spawn_thread", "task": 1, "tid": 2},
        {"event": "mem_write", "task": 1, "addr": 0x1000,
         "data_hex": "aa" * 64},
        {"event": "syscall_enter", "task": 1, "nr": 1,
         "args": [3, 0x1000, 64]},
        {"event": "syscall_exit", "task": 1},
        {"event": "mem_write", "task": 2, "addr": 0x1010,
         "value_u64": 0xFEED},
    ]
    from sfvm.engine import EngineConfig
    sim = Simulator(parse_trace(trace_text(events)),
                    config=EngineConfig(snapshot_mode="write_protect"),
                    descriptors=bundled_descriptors(),
                    schedule=[1, 1, 1, 1, 1, 2, 1, 2])
    sim.run()
    stalls = [e for e in sim.entries if e["kind"] == "stall"]
    assert stalls == [{"kind": "stall", "task": 2, "addr": 0x1010}]
    mem = sim.engine.task(2).address_space
    assert mem.read(0x1010, 8) == (0xFEED).to_bytes(8, "little")
    assert not sim.metrics()["deadlocked"]


def test_killed_task_drains_its_future():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        *attach_events(1, KILL99),
        {"event": "syscall_enter", "task": 1, "nr": 99},
        {"event": "syscall_exit", "task": 1},
        {"event": "spawn", "task": 1, "tid": 2},
        {"event": "syscall_enter", "task": 2, "nr": 0},
        {"event": "syscall_exit", "task": 2},
    ]
    sim = run_trace(events, seed=1)
    kill = decisions(sim.entries)[0]
    assert kill["action"] == "kill_process" and kill["killed"] == [1]
    skipped = [(e["task"], e["event"]) for e in sim.entries
               if e["kind"] == "skipped"]
    assert skipped == [
        (1, "syscall_exit"), (1, "spawn"),
        (2, "syscall_enter"), (2, "syscall_exit"),
    ]
    assert not sim.metrics()["deadlocked"]
    assert 2 not in sim.engine.tasks


def test_engine_errors_become_log_entries():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "install", "task": 1, "handle": 9},
        {"event": "set_nnp", "task": 1},
    ]
    sim = run_trace(events)
    errors = [e for e in sim.entries if e["kind"] == "error"]
    assert len(errors) == 1
    assert errors[0]["event"] == "install"
    assert "never loaded" in errors[0]["error"]
    assert sim.pos[1] == 2                     # the run moved on


def test_failed_write_is_an_error_entry():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        {"event": "mem_write", "task": 1, "addr": 0x8000, "value_u64": 1},
    ]
    sim = Simulator(parse_trace(trace_text(events)), demand_map=False)
    sim.run()
    errors = [e for e in sim.entries if e["kind"] == "error"]
    assert errors and "write fault" in errors[0]["error"]


def test_map_update_event_reports_failures():
    budget = hexprog(
        "section seccomp\n"
        "    map used array 8 8 1\n"
        "    ld_imm64 r0, 0x7fff0000\n"
        "    exit\n")
    events = [
        {"event": "spawn", "tid": 1, "caps": ["CAP_SYS_ADMIN"]},
        *attach_events(1, budget),
        {"event": "map_update", "task": 1, "install": 0, "map": "used",
         "key_hex": "00" * 8, "value_hex": "07" + "00" * 7},
        {"event": "map_update", "task": 1, "install": 0, "map": "used",
         "key_hex": "00" * 8, "value_hex": "ff"},
    ]
    sim = run_trace(events)
    errors = [e for e in sim.entries if e["kind"] == "error"]
    assert len(errors) == 1 and "map update failed" in errors[0]["error"]
    pmap = sim.engine.task(1).chain[0].maps[0]
    assert bytes(pmap.lookup(bytes(8)))[0] == 7


def test_phase_marker_decides_and_completes_in_one_step():
    events = [
        {"event": "spawn", "tid": 1, "nnp": True},
        *attach_events(1, ALLOW_ALL),
        {"event": "phase_marker", "task": 1, "nr": 460},
    ]
    sim = run_trace(events)
    marks = decisions(sim.entries)
    assert len(marks) == 1
    assert marks[0]["marker"] and marks[0]["nr"] == 460
    assert [e["kind"] for e in sim.entries] == ["decision", "exit"]


def test_checkpoint_restore_within_a_run():
    events = [
        {"event": "spawn", "tid": 1, "caps": ["CAP_SYS_ADMIN"]},
        {"event": "spawn", "tid": 2, "caps": ["CAP_SYS_ADMIN"]},
        *attach_events(1, KILL99),
        {"event": "checkpoint", "task": 1, "id": "c1"},
        {"event": "restore", "task": 2, "id": "c1"},
        {"event": "syscall_enter", "task": 2, "nr": 99},
    ]
    sim = run_trace(events, schedule=[1, 1, 1, 2, 2])
    assert "c1" in sim.checkpoints
    assert decisions(sim.entries, task=2)[0]["action"] == "kill_process"


def test_restore_with_unknown_id_is_an_error():
    events = [
        {"event": "spawn", "tid": 1, "caps": ["CAP_SYS_ADMIN"]},
        {"event": "restore", "task": 1, "id": "ghost"},
    ]
    sim = run_trace(events)
    errors = [e for e in sim.entries if e["kind"] == "error"]
    assert errors and "no checkpoint" in errors[0]["error"]


# -- exploration ---------------------------------------------------------------


EXPLORE_EVENTS = [
    {"event": "spawn", "tid": 1, "nnp": True},
    {"event": "spawn", "tid": 2, "nnp": True},
    *attach_events(1, KILL99),
    {"event": "syscall_enter", "task": 1, "nr": 0},
    {"event": "syscall_exit", "task": 1},
    {"event": "syscall_enter", "task": 2, "nr": 1},
    {"event": "syscall_exit", "task": 2},
]


def test_explore_enumerates_every_schedule():
    trace = parse_trace(trace_text(EXPLORE_EVENTS))
    results = explore_interleavings(trace)
    schedules = [tuple(s) for s, _ in results]
    assert len(schedules) == len(set(schedules))
    # 4 events for task 1 interleaved with 2 for task 2: C(6,2)
    assert len(schedules) == 15
    for schedule, entries in results:
        again = run_trace(EXPLORE_EVENTS, schedule=list(schedule))
        assert log_digest(again.entries) == log_digest(entries)


def test_dedupe_preserves_the_schedule_set():
    trace = parse_trace(trace_text(EXPLORE_EVENTS))
    fast = explore_interleavings(trace, dedupe=True)
    slow = explore_interleavings(trace, dedupe=False)
    as_set = lambda rs: sorted((tuple(s), log_digest(e)) for s, e in rs)
    assert as_set(fast) == as_set(slow)


def test_explore_refuses_oversized_traces():
    events = [{"event": "spawn", "tid": 1, "nnp": True}]
    events += [{"event": "set_nnp", "task": 1}] * (MAX_EXPLORE_STEPS + 1)
    trace = parse_trace(trace_text(events))
    with pytest.raises(ExplorationLimit, match="capped at 14"):
        explore_interleavings(trace)
    assert len(explore_interleavings(trace, max_steps=20)) == 1


def test_metrics_shape():
    sim = run_trace(EXPLORE_EVENTS, seed=5)
    got = sim.metrics()
    assert got["decisions"] == 2
    assert got["by_action"] == {"allow": 2}
    assert got["digest"] == sim.digest()
    assert got["schedule"] == sim.schedule
    assert got["steps"] > 0 and got["helper_calls"] == 0
    assert not got["deadlocked"]
