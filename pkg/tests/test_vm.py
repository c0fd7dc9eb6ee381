"""
Песочница: разбор, верификатор, интерпретатор, газ и возможности
"""

import random

import pytest

from fan.abi import ALL_CAPABILITIES, HOST_CAPABILITY, HOST_GAS_COST, HostFunction
from fan.exceptions import ParseError, VerifierRejected
from fan.protocol.cells import RelayPayload
from fan.relay.host_abi import CircuitView, HostContext, build_host_table
from fan.toolkit.assembler import assemble
from fan.vm.interpreter import (
    MASK64,
    HostEntry,
    HostTable,
    Trap,
    TrapKind,
    VmInstance,
    instantiate,
)
from fan.vm.isa import parse_program
from fan.vm.verifier import verify
from tests.helpers import random_program

EMPTY_TABLE = HostTable([])


def _vm(source: str, memory_size: int = 4096, table: HostTable = EMPTY_TABLE, mask: int = 0):
    return instantiate(parse_program(assemble(source)), memory_size, table, mask)


def _run(source: str, *args: int, gas: int = 100_000) -> int:
    return _vm(source).run(0, args, gas_limit=gas).value


# ===== Разбор =====


@pytest.mark.parametrize("size", [0, 7, 9, 8 * 65537])
def test_parse_rejects_bad_lengths(size):
    with pytest.raises(ParseError):
        parse_program(bytes(size))


def test_parse_accepts_maximum_program():
    assert len(parse_program(bytes(8 * 65536))) == 65536


# ===== Верификатор =====


@pytest.mark.parametrize(
    "source, message",
    [
        ("movi r10, 1\nexit", "write to r10"),
        ("ld64 r10, [r1]\nexit", "write to r10"),
        (".raw ff00000000000000\nexit", "unknown opcode"),
        (".raw 2b0b000000000000\nexit", "bad register"),
        ("ja 5\nexit", "jump target out of bounds"),
        ("jeqi r1, 0, -3\nexit", "jump target out of bounds"),
        ("call 8\nexit", "invalid host index"),
        ("movi r0, 1", "final instruction must be exit or ja"),
    ],
)
def test_verifier_rejections(source, message):
    report = verify(parse_program(assemble(source)), 8)
    assert not report.ok
    assert any(message in text for _, text in report.violations)


def test_verifier_lists_every_violation():
    report = verify(parse_program(assemble("movi r10, 1\ncall 9\nmovi r0, 1")), 8)
    assert [index for index, _ in report.violations] == [0, 1, 2]
    with pytest.raises(VerifierRejected) as exc_info:
        report.raise_for_violations()
    assert len(exc_info.value.violations) == 3


def test_verifier_accepts_jump_to_end_and_stores_through_r10():
    program = parse_program(assemble("st64 [r10-8], r1\njeqi r1, 0, end\nja end\nend:"))
    assert verify(program, 0).ok


def test_instantiate_runs_verifier():
    with pytest.raises(VerifierRejected):
        _vm("call 0\nexit")


@pytest.mark.parametrize("size", [0, 4095, 1024 * 1024 + 1, 2 * 1024 * 1024])
def test_instantiate_rejects_memory_size(size):
    with pytest.raises(ValueError):
        _vm("exit", memory_size=size)


def test_r10_holds_memory_size():
    vm = _vm("exit", memory_size=65536)
    assert vm.registers[10] == 65536
    assert vm.memory_size == 65536


# ===== Исполнение =====


def test_constant_program():
    result = _vm("movi r0, 42\nexit").run(0, gas_limit=10)
    assert (result.value, result.gas_used) == (42, 2)


def test_jump_to_end_is_exit():
    result = _vm("movi r0, 9\nja 0").run(0)
    assert (result.value, result.gas_used) == (9, 2)


def test_arguments_and_zeroed_scratch_registers():
    assert _run("mov r0, r1\nadd r0, r5\nadd r0, r6\nadd r0, r9\nexit", 1, 2, 3, 4, 5) == 6


def test_registers_r6_to_r9_reset_between_entries():
    vm = _vm("movi r6, 100\nmov r0, r6\nexit\nmov r0, r6\nexit")
    assert vm.run(0).value == 100
    assert vm.run(3).value == 0


def test_too_many_arguments():
    with pytest.raises(ValueError):
        _vm("exit").run(0, (1, 2, 3, 4, 5, 6))


def test_entry_outside_program():
    with pytest.raises(ValueError):
        _vm("exit").run(1)


@pytest.mark.parametrize(
    "source, expected",
    [
        ("movi r0, -1\ndivi r0, 2\nexit", 0x7FFFFFFFFFFFFFFF),
        ("movi r0, 17\nmodi r0, 5\nexit", 2),
        ("movi r0, -16\narshi r0, 2\nexit", (-4) & MASK64),
        ("movi r0, -16\nrshi r0, 60\nexit", 0xF),
        ("movi r0, 1\nlshi r0, 65\nexit", 2),
        ("movi r0, 0\nsubi r0, 1\nexit", MASK64),
        ("movi r0, 0x7fffffff\nmuli r0, 0x7fffffff\nexit", 0x3FFFFFFF00000001),
        ("movi r0, 5\nneg r0\nexit", (-5) & MASK64),
        ("movi r0, 0xffffffff\nexit", MASK64),
        ("movi r1, -1\nmovi r0, 1\njgti r1, 0, 1\nexit\nmovi r0, 2\nexit", 2),
    ],
)
def test_alu_semantics(source, expected):
    assert _run(source) == expected


def test_loop_sums_arguments():
    source = """
        movi r0, 0
    loop:
        jeqi r1, 0, done
        add r0, r1
        subi r1, 1
        ja loop
    done:
        exit
    """
    assert _run(source, 10) == 55


@pytest.mark.parametrize("width, value", [("8", 0xEF), ("16", 0xBEEF), ("32", 0xDEADBEEF)])
def test_narrow_loads_are_zero_extended(width, value):
    source = f"sti32 [r10-8], 0xdeadbeef\nld{width} r0, [r10-8]\nexit"
    assert _run(source) == value


def test_arena_persists_between_runs():
    vm = _vm("ld64 r0, [r1]\naddi r0, 1\nst64 [r1], r0\nexit")
    assert [vm.run(0, (16,)).value for _ in range(3)] == [1, 2, 3]


def test_instances_do_not_share_memory():
    source = "st64 [r1], r2\nld64 r0, [r1]\nexit"
    first, second = _vm(source), _vm(source)
    first.run(0, (0, 0xAA))
    assert second.arena.snapshot() == bytes(4096)
    assert first.arena.snapshot()[0] == 0xAA


def test_execution_is_deterministic():
    program = random_program(random.Random(7))
    outcomes = []
    for _ in range(2):
        vm = instantiate(program, 4096, build_host_table(), 0)
        try:
            outcome = vm.run(0, gas_limit=1000).value
        except Trap as trap:
            outcome = trap.to_dict()
        outcomes.append((outcome, vm.arena.snapshot(), tuple(vm.registers)))
    assert outcomes[0] == outcomes[1]


def test_tracer_sees_each_instruction():
    seen = []
    _vm("movi r0, 1\naddi r0, 1\nexit").run(0, tracer=lambda pc, insn, regs: seen.append(pc))
    assert seen == [0, 1, 2]


# ===== Ловушки =====


def _trap(vm: VmInstance, gas: int = 100_000) -> Trap:
    with pytest.raises(Trap) as exc_info:
        vm.run(0, gas_limit=gas)
    return exc_info.value


def test_store_at_memory_end_traps():
    trap = _trap(_vm("st64 [r10], r1\nexit"))
    assert trap.kind == TrapKind.MEMORY_OUT_OF_BOUNDS
    assert trap.pc == 0


def test_last_word_of_arena_is_writable():
    assert _run("st64 [r10-8], r1\nld64 r0, [r10-8]\nexit", 5) == 5


def test_negative_address_wraps_and_traps():
    trap = _trap(_vm("movi r1, 0\nld8 r0, [r1-1]\nexit"))
    assert (trap.kind, trap.pc) == (TrapKind.MEMORY_OUT_OF_BOUNDS, 1)


def test_self_loop_exhausts_gas():
    trap = _trap(_vm("ja -1"), gas=1000)
    assert trap.kind == TrapKind.GAS_EXHAUSTED
    assert trap.gas_used == 1000


@pytest.mark.parametrize("source", ["movi r0, 7\ndiv r0, r1\nexit", "movi r0, 7\nmodi r0, 0\nexit"])
def test_division_by_zero(source):
    trap = _trap(_vm(source))
    assert (trap.kind, trap.pc) == (TrapKind.DIVISION_BY_ZERO, 1)


def test_write_to_r10_traps_when_verifier_bypassed():
    vm = VmInstance(parse_program(assemble("movi r10, 1\nexit")), 4096, EMPTY_TABLE, 0)
    assert _trap(vm).kind == TrapKind.WRITE_TO_R10


def test_invalid_host_call_when_verifier_bypassed():
    vm = VmInstance(parse_program(assemble("call 3\nexit")), 4096, EMPTY_TABLE, 0xFF)
    assert _trap(vm).kind == TrapKind.INVALID_HOST_CALL


def test_trap_to_dict():
    assert _trap(_vm("st8 [r10], r0\nexit")).to_dict() == {"kind": "MemoryOutOfBounds", "pc": 0}


# ===== Хост-вызовы и возможности =====


def _spy_table(calls):
    def handler(index):
        def call(args, arena, context):
            calls.append(index)
            return 0

        return call

    return HostTable(
        [
            HostEntry(
                index=int(function),
                capability_bit=int(HOST_CAPABILITY[function]),
                gas_cost=HOST_GAS_COST[function],
                handler=handler(int(function)),
            )
            for function in HostFunction
        ]
    )


@pytest.mark.parametrize("function", list(HostFunction))
def test_missing_capability_denies_call(function):
    calls = []
    mask = ALL_CAPABILITIES & ~(1 << HOST_CAPABILITY[function])
    vm = _vm(f"call {int(function)}\nexit", table=_spy_table(calls), mask=mask)
    trap = _trap(vm)
    assert (trap.kind, trap.pc) == (TrapKind.CAPABILITY_DENIED, 0)
    assert calls == []


@pytest.mark.parametrize("function", list(HostFunction))
def test_granted_call_charges_host_cost(function):
    calls = []
    mask = 1 << HOST_CAPABILITY[function]
    vm = _vm(f"call {int(function)}\nexit", table=_spy_table(calls), mask=mask)
    result = vm.run(0)
    assert calls == [int(function)]
    assert result.gas_used == 2 + HOST_GAS_COST[function]


def test_capability_checked_before_gas():
    vm = _vm("call log\nexit", table=_spy_table([]), mask=0)
    assert _trap(vm, gas=1).kind == TrapKind.CAPABILITY_DENIED


def test_host_cost_exceeding_gas_traps():
    calls = []
    vm = _vm("call log\nexit", table=_spy_table(calls), mask=ALL_CAPABILITIES)
    assert _trap(vm, gas=5).kind == TrapKind.GAS_EXHAUSTED
    assert calls == []


def test_failing_host_handler_becomes_host_error():
    def broken(args, arena, context):
        raise RuntimeError("boom")

    table = HostTable([HostEntry(index=0, capability_bit=0, gas_cost=1, handler=broken)])
    trap = _trap(_vm("call 0\nexit", table=table, mask=1))
    assert trap.kind == TrapKind.HOST_ERROR
    assert trap.to_dict() == {"kind": "HostError", "pc": 0, "code": 0}


def test_host_result_lands_in_r0():
    table = HostTable(
        [HostEntry(index=0, capability_bit=0, gas_cost=1, handler=lambda a, m, c: a[0] * 2)]
    )
    assert _vm("movi r1, 21\ncall 0\nexit", table=table, mask=1).run(0).value == 42


# ===== Изоляция на случайных программах =====

PERMITTED_TRAPS = {
    TrapKind.MEMORY_OUT_OF_BOUNDS,
    TrapKind.DIVISION_BY_ZERO,
    TrapKind.GAS_EXHAUSTED,
    TrapKind.CAPABILITY_DENIED,
}


def _fuzz_context(rng: random.Random) -> HostContext:
    return HostContext(
        node_name="fuzz",
        plugin="fuzz",
        circuit=CircuitView(circ_id=7, hop_flags=3, cells_forwarded=1, scratch=bytearray(256)),
        cell=RelayPayload(relay_cmd=40, data=b"fuzz"),
        emitter=lambda cmd, data, direction: True,
        scheduler=lambda delay, tag: True,
        rng=rng,
    )


def _sandbox_fuzz(seed: int, count: int, gas: int) -> None:
    rng = random.Random(seed)
    table = build_host_table()
    for _ in range(count):
        program = random_program(rng)
        assert verify(program, len(table)).ok
        memory_size = rng.choice([4096, 8192])

        def observer(addr, length, is_write, size=memory_size):
            assert 0 <= addr and addr + length <= size

        vm = instantiate(program, memory_size, table, rng.randrange(256), observer)
        try:
            args = (rng.randrange(memory_size),)
            result = vm.run(0, args, gas_limit=gas, context=_fuzz_context(rng))
            assert result.gas_used <= gas
        except Trap as trap:
            assert trap.kind in PERMITTED_TRAPS, f"{trap} in\n{program.to_bytes().hex()}"
            assert 0 <= trap.pc < len(program)
            assert trap.gas_used <= gas
        assert len(vm.arena.snapshot()) == memory_size
        assert vm.registers[10] == memory_size


def test_random_programs_stay_in_sandbox():
    _sandbox_fuzz(seed=11, count=300, gas=10_000)


@pytest.mark.slow
def test_random_programs_stay_in_sandbox_long():
    _sandbox_fuzz(seed=2024, count=10_000, gas=100_000)
