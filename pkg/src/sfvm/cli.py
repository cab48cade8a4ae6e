"""Command-line front end.

Exit codes: 0 success, 1 the operation ran but reported failure (a
rejected program, a failing scenario), 2 bad usage or a refused
exploration.  Program file arguments accept either the binary container
or assembly text; the magic bytes decide which.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .asm import AsmError, assemble, disassemble
from .engine import EngineConfig
from .isa import PROGRAM_MAGIC, decode_program
from .reporting import attack_surface_report, render_table
from .sim import ExplorationLimit, MAX_EXPLORE_STEPS, Simulator, \
    explore_interleavings, log_digest
from .snapshot import MODES, DescriptorTable
from .trace import TraceError, load_trace
from .verifier import VerifierConfig, verify


def _read_program(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(PROGRAM_MAGIC)] == PROGRAM_MAGIC:
        return decode_program(raw)
    return assemble(raw.decode("utf-8"))


def _engine_config(args) -> EngineConfig:
    kwargs = {}
    if os.environ.get("SFVM_PRIVILEGED_ONLY") == "1":
        kwargs["privileged_only"] = True
    mode = getattr(args, "mode", None)
    if mode:
        kwargs["snapshot_mode"] = mode
    return EngineConfig(**kwargs)


def _descriptors(args) -> DescriptorTable:
    path = getattr(args, "descriptors", None)
    if path:
        with open(path, encoding="utf-8") as fh:
            return DescriptorTable.from_json(json.load(fh))
    from importlib.resources import files
    raw = json.loads((files("sfvm") / "data" /
                      "descriptors.json").read_text())
    return DescriptorTable.from_json(raw)


def _parse_schedule(text: str):
    """Either seed:<n> for a seeded run or a comma list of task ids."""
    if text.startswith("seed:"):
        return int(text[len("seed:"):]), None
    return None, [int(t) for t in text.split(",") if t.strip()]


def cmd_asm(args) -> int:
    try:
        with open(args.input, "rb") as fh:
            raw = fh.read()
        if raw[:len(PROGRAM_MAGIC)] == PROGRAM_MAGIC:
            out = disassemble(decode_program(raw)).encode("utf-8")
        else:
            from .isa import encode_program
            out = encode_program(assemble(raw.decode("utf-8")))
    except (AsmError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.output:
        with open(args.output, "wb") as fh:
            fh.write(out)
    else:
        sys.stdout.buffer.write(out if out[:4] != PROGRAM_MAGIC
                                else out.hex().encode() + b"\n")
    return 0


def cmd_verify(args) -> int:
    try:
        program = _read_program(args.program)
    except (AsmError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report = verify(program, VerifierConfig())
    print(json.dumps(report.to_json(), indent=2))
    return 0 if report.accepted else 1


def cmd_run(args) -> int:
    try:
        trace = load_trace(args.trace)
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    seed, schedule = 0, None
    if args.schedule:
        seed, schedule = _parse_schedule(args.schedule)
        seed = seed or 0
    sim = Simulator(trace, config=_engine_config(args),
                    descriptors=_descriptors(args), seed=seed,
                    schedule=schedule)
    sim.run()
    if args.json:
        print(json.dumps({"log": sim.entries, "metrics": sim.metrics()},
                         indent=2))
    else:
        for entry in sim.entries:
            print(json.dumps(entry))
        print(json.dumps(sim.metrics()))
    return 0


def cmd_explore(args) -> int:
    try:
        trace = load_trace(args.trace)
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        runs = explore_interleavings(trace, config=_engine_config(args),
                                     descriptors=_descriptors(args),
                                     max_steps=args.max_steps,
                                     dedupe=not args.no_dedupe)
    except ExplorationLimit as exc:
        # refusal, not failure: the trace is fine but too big to walk
        print(f"error: {exc}", file=sys.stderr)
        return 2
    digests: dict[str, int] = {}
    for _, entries in runs:
        digest = log_digest(entries)
        digests[digest] = digests.get(digest, 0) + 1
    print(f"schedules: {len(runs)}")
    print(f"distinct outcomes: {len(digests)}")
    for digest, count in sorted(digests.items()):
        print(f"  {digest[:16]}  x{count}")
    if args.json:
        print(json.dumps([{"schedule": sched, "log": entries}
                          for sched, entries in runs], indent=2))
    return 0


def cmd_scenario(args) -> int:
    from .scenarios import bundled_scenario_names, load_scenario, \
        run_bundled, run_scenario
    config = _engine_config(args)
    descriptors = _descriptors(args)
    if args.all:
        names = bundled_scenario_names()
        results = [run_bundled(n, config, descriptors) for n in names]
    elif args.name is None:
        print("error: give a scenario name/path or --all", file=sys.stderr)
        return 2
    elif os.path.exists(args.name):
        results = [run_scenario(load_scenario(args.name), config,
                                descriptors)]
    else:
        try:
            results = [run_bundled(args.name, config, descriptors)]
        except FileNotFoundError:
            print(f"error: no bundled scenario named {args.name!r}",
                  file=sys.stderr)
            return 2
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"[{status}] {res.name}: {res.title}")
        for check in res.checks:
            mark = "ok" if check.passed else "FAILED"
            print(f"    {mark:<6} {check.description} ({check.detail})")
        failed += 0 if res.passed else 1
    return 0 if failed == 0 else 1


def cmd_report(args) -> int:
    if args.kind != "attack-surface":
        print(f"error: unknown report {args.kind!r}", file=sys.stderr)
        return 2
    profiles = None
    if args.profiles:
        from .policies import load_profiles
        profiles = load_profiles(args.profiles)
    report = attack_surface_report(profiles)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(render_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfvm",
        description="assemble, verify, and simulate syscall filters")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("asm", help="assemble text, or disassemble a binary")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("verify", help="run the verifier on a program")
    p.add_argument("program")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="run a trace under one schedule")
    p.add_argument("trace")
    p.add_argument("--schedule",
                   help="seed:<n> or a comma-separated task id list")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--descriptors")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("explore", help="run a trace under every schedule")
    p.add_argument("trace")
    p.add_argument("--max-steps", type=int, default=MAX_EXPLORE_STEPS)
    p.add_argument("--no-dedupe", action="store_true")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--descriptors")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("scenario", help="replay a bundled incident scenario")
    p.add_argument("name", nargs="?")
    p.add_argument("--all", action="store_true")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--descriptors")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("report", help="summary reports")
    p.add_argument("kind", choices=["attack-surface"])
    p.add_argument("--profiles")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
