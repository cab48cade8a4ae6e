"""Round trip a filter through the toolchain: assemble, check, run.

Shows the happy path and two programs the static checker refuses.
"""

from sfvm.asm import assemble, disassemble
from sfvm.isa import SyscallContext, decode_program, encode_program
from sfvm.verifier import verify
from sfvm.vm import RuntimeEnv, VmThread

SOURCE = """\
section seccomp
    ld_ctx r1, 0
    jeq r1, 59, deny          ; execve
    jeq r1, 101, deny         ; ptrace
    mov r0, 0x7fff0000
    exit
deny:
    mov r0, 0x5000d           ; errno 13
    exit
"""


def main():
    program = assemble(SOURCE)
    print(f"assembled {len(program.instructions)} instructions")

    blob = encode_program(program)
    print(f"encoded to {len(blob)} bytes, magic {blob[:4]!r}")
    again = decode_program(blob)
    assert again.instructions == program.instructions

    report = verify(program)
    print(f"checker: accepted={report.accepted}, "
          f"{report.abstract_steps} abstract steps")

    for nr in (1, 59, 101):
        thread = VmThread(program, [], SyscallContext(nr=nr))
        thread.run(RuntimeEnv())
        print(f"  syscall {nr:3d} -> {thread.outcome.raw_action:#010x}")

    print()
    print("round-tripped text:")
    print(disassemble(program))

    print("programs the checker refuses:")
    bad = [
        ("section seccomp\n    mov r0, r3\n    exit\n",
         "r3 never written"),
        ("section seccomp\n    ld_ctx r0, 12\n    exit\n",
         "no context field at byte 12"),
    ]
    for src, why in bad:
        report = verify(assemble(src))
        assert not report.accepted
        print(f"  {why}: {report.reason}")


if __name__ == "__main__":
    main()
