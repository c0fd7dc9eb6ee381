"""
Хост-функции узла: поля цепочки, ячейки, бюджет эмиссии, таймеры
"""

import logging
import random

import pytest

from fan.abi import HOST_GAS_COST, MAX_TIMER_DELAY_MS, HostFunction
from fan.protocol.cells import Direction, RelayPayload
from fan.relay.host_abi import (
    FAILURE,
    HOP_HAS_NEXT,
    HOP_HAS_PREV,
    CircuitView,
    HostContext,
    build_host_table,
    host_emit_cell,
    host_get_field,
    host_log,
    host_now_ms,
    host_rand_bytes,
    host_read_cell,
    host_set_field,
    host_set_timer,
)
from fan.toolkit.assembler import assemble
from fan.vm.interpreter import MASK64, GuestArena, Trap, TrapKind, instantiate
from fan.vm.isa import parse_program


@pytest.fixture
def emitted():
    return []


@pytest.fixture
def timers():
    return []


@pytest.fixture
def ctx(emitted, timers):
    return HostContext(
        node_name="relay1",
        plugin="dummy",
        circuit=CircuitView(
            circ_id=7,
            hop_flags=HOP_HAS_PREV | HOP_HAS_NEXT,
            cells_forwarded=9,
            scratch=bytearray(256),
        ),
        cell=RelayPayload(relay_cmd=40, data=b"hello"),
        emitter=lambda cmd, data, direction: emitted.append((cmd, data, direction)) or True,
        scheduler=lambda delay, tag: timers.append((delay, tag)) or True,
        clock=lambda: 1234,
        rng=random.Random(5),
    )


@pytest.fixture
def arena():
    return GuestArena(4096)


# ===== Поля цепочки =====


def test_get_circuit_id(arena, ctx):
    assert host_get_field((0, 64, 8, 0, 0), arena, ctx) == 4
    assert arena.read(64, 4) == bytes([7, 0, 0, 0])


def test_get_hop_flags_and_cells_forwarded(arena, ctx):
    assert host_get_field((1, 0, 1, 0, 0), arena, ctx) == 1
    assert arena.read(0, 1) == bytes([3])
    assert host_get_field((2, 8, 8, 0, 0), arena, ctx) == 8
    assert arena.load(8, 8) == 9


def test_get_field_needs_room(arena, ctx):
    assert host_get_field((2, 0, 7, 0, 0), arena, ctx) == FAILURE
    assert host_get_field((9, 0, 64, 0, 0), arena, ctx) == FAILURE


def test_get_field_outside_arena_traps(arena, ctx):
    with pytest.raises(Trap) as exc_info:
        host_get_field((0, 4094, 8, 0, 0), arena, ctx)
    assert exc_info.value.kind == TrapKind.MEMORY_OUT_OF_BOUNDS


@pytest.mark.parametrize("field_id", [0, 1, 2])
def test_only_scratch_is_writable(arena, ctx, field_id):
    assert host_set_field((field_id, 0, 4, 0, 0), arena, ctx) == FAILURE


def test_scratch_round_trip(arena, ctx):
    arena.write(100, b"period")
    assert host_set_field((3, 100, 6, 0, 0), arena, ctx) == 6
    assert bytes(ctx.circuit.scratch[:6]) == b"period"
    assert len(ctx.circuit.scratch) == 256
    assert host_get_field((3, 200, 6, 0, 0), arena, ctx) == 6
    assert arena.read(200, 6) == b"period"
    assert host_set_field((3, 0, 257, 0, 0), arena, ctx) == FAILURE


def test_fields_need_a_circuit(arena, ctx):
    ctx.circuit = None
    assert host_get_field((0, 0, 8, 0, 0), arena, ctx) == FAILURE
    assert host_set_timer((50, 1, 0, 0, 0), arena, ctx) == FAILURE


# ===== Ячейки =====


def test_read_cell_copies_payload_data(arena, ctx):
    assert host_read_cell((10, 496, 0, 0, 0), arena, ctx) == 5
    assert arena.read(10, 5) == b"hello"
    assert host_read_cell((10, 3, 0, 0, 0), arena, ctx) == 3


def test_read_cell_without_cell(arena, ctx):
    ctx.cell = None
    assert host_read_cell((0, 16, 0, 0, 0), arena, ctx) == FAILURE


def test_emit_extension_cell(arena, ctx, emitted):
    arena.write(0, b"pad")
    assert host_emit_cell((32, 0, 3, Direction.BACKWARD, 0), arena, ctx) == 0
    assert emitted == [(32, b"pad", Direction.BACKWARD)]


@pytest.mark.parametrize(
    "args",
    [(5, 0, 0, 0, 0), (31, 0, 0, 0, 0), (32, 0, 497, 0, 0), (32, 0, 0, 2, 0)],
    ids=["core-cmd", "cmd-31", "too-long", "bad-direction"],
)
def test_emit_rejections(arena, ctx, emitted, args):
    assert host_emit_cell(args, arena, ctx) == FAILURE
    assert emitted == []


def test_emit_budget(arena, ctx, emitted):
    results = [host_emit_cell((40, 0, 0, 0, 0), arena, ctx) for _ in range(5)]
    assert results == [0, 0, 0, 0, FAILURE]
    assert len(emitted) == 4


def test_refused_emit_does_not_spend_budget(arena, ctx):
    ctx.emitter = lambda cmd, data, direction: False
    assert host_emit_cell((40, 0, 0, 1, 0), arena, ctx) == FAILURE
    assert ctx.emitted == 0


# ===== Таймеры, случайность, часы, лог =====


def test_set_timer(arena, ctx, timers):
    assert host_set_timer((50, 9, 0, 0, 0), arena, ctx) == 0
    assert timers == [(50, 9)]


@pytest.mark.parametrize(
    "delay", [0, MAX_TIMER_DELAY_MS + 1, MASK64], ids=["zero", "above-max", "huge"]
)
def test_set_timer_rejects_out_of_range_delay(arena, ctx, timers, delay):
    assert host_set_timer((delay, 9, 0, 0, 0), arena, ctx) == FAILURE
    assert timers == []


def test_set_timer_upper_bound_comes_from_policy(arena, ctx, timers):
    ctx.max_timer_delay_ms = 100
    assert host_set_timer((100, 1, 0, 0, 0), arena, ctx) == 0
    assert host_set_timer((101, 2, 0, 0, 0), arena, ctx) == FAILURE
    assert host_set_timer((1, 3, 0, 0, 0), arena, ctx) == 0
    assert timers == [(100, 1), (1, 3)]


def test_rand_bytes_come_from_node_stream(arena, ctx):
    assert host_rand_bytes((0, 16, 0, 0, 0), arena, ctx) == 16
    assert arena.read(0, 16) == random.Random(5).randbytes(16)


def test_rand_bytes_outside_arena(arena, ctx):
    with pytest.raises(Trap):
        host_rand_bytes((4000, 200, 0, 0, 0), arena, ctx)


def test_now_ms(arena, ctx):
    assert host_now_ms((0, 0, 0, 0, 0), arena, ctx) == 1234


def test_log_is_tagged(arena, ctx, caplog):
    records = []
    ctx.on_log = lambda level, text: records.append((level, text))
    arena.write(0, b"hi there")
    with caplog.at_level(logging.INFO, logger="fan.plugins.guest"):
        assert host_log((1, 0, 8, 0, 0), arena, ctx) == 0
    assert records == [(1, "hi there")]
    assert "[relay1/7/dummy] hi there" in caplog.text


# ===== Через интерпретатор =====


def test_failure_is_all_ones_in_r0(ctx):
    program = parse_program(assemble("movi r1, 2\nmovi r2, 0\nmovi r3, 8\ncall set_field\nexit"))
    vm = instantiate(program, 4096, build_host_table(), 0xFF)
    result = vm.run(0, context=ctx)
    assert result.value == FAILURE & MASK64
    assert result.gas_used == 5 + HOST_GAS_COST[HostFunction.SET_FIELD]


def test_host_table_follows_normative_order():
    table = build_host_table()
    assert len(table) == 8
    assert [entry.gas_cost for entry in table.entries] == [10, 5, 5, 5, 20, 10, 5, 1]
    assert [entry.capability_bit for entry in table.entries] == list(range(8))
