"""
Нормативная таблица хост-функций: то, что плагин может видеть и делать на узле

Каждый вызов уже прошёл проверку бита возможности и списание газа в интерпретаторе.
Ошибки аргументов возвращают −1; выход за арену: ловушка MemoryOutOfBounds.
"""

import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

from fan.abi import (
    HOST_CAPABILITY,
    HOST_GAS_COST,
    MAX_TIMER_DELAY_MS,
    MIN_TIMER_DELAY_MS,
    SCRATCH_SIZE,
    FieldId,
    HostFunction,
)
from fan.protocol.cells import RELAY_DATA_SIZE, Direction, RelayPayload, is_extension_command
from fan.vm.interpreter import GuestArena, HostEntry, HostTable

logger = logging.getLogger(__name__)
guest_logger = logging.getLogger("fan.plugins.guest")

FAILURE = -1

HOP_HAS_PREV = 0x01
HOP_HAS_NEXT = 0x02

_GUEST_LEVELS = {0: logging.DEBUG, 1: logging.INFO, 2: logging.WARNING}


@dataclass
class CircuitView:
    """Состояние цепочки, видимое плагину через get_field/set_field"""

    circ_id: int
    hop_flags: int
    cells_forwarded: int
    scratch: bytearray


@dataclass
class HostContext:
    """
    Привязка хост-функций к одному событию одного плагина

    emitter(cmd, data, direction) -> bool, scheduler(delay_ms, tag) -> bool,
    on_log(level, text): запись в трассу.
    """

    node_name: str
    plugin: str
    circuit: Optional[CircuitView] = None
    cell: Optional[RelayPayload] = None
    emit_budget: int = 4
    max_timer_delay_ms: int = MAX_TIMER_DELAY_MS
    emitter: Optional[Callable[[int, bytes, int], bool]] = None
    scheduler: Optional[Callable[[int, int], bool]] = None
    clock: Callable[[], int] = lambda: 0
    rng: random.Random = field(default_factory=random.Random)
    on_log: Optional[Callable[[int, str], None]] = None
    emitted: int = 0


def guest_level(level: int) -> int:
    return _GUEST_LEVELS.get(level, logging.ERROR)


# ===== Хост-функции =====


def host_log(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    level, offset, length = args[0], args[1], args[2]
    text = arena.read(offset, length).decode("utf-8", errors="replace")
    circ = ctx.circuit.circ_id if ctx.circuit else "-"
    guest_logger.log(guest_level(level), f"[{ctx.node_name}/{circ}/{ctx.plugin}] {text}")
    if ctx.on_log:
        ctx.on_log(level, text)
    return 0


def _field_bytes(circuit: CircuitView, field_id: int) -> Optional[bytes]:
    if field_id == FieldId.CIRCUIT_ID:
        return struct.pack("<I", circuit.circ_id)
    if field_id == FieldId.HOP_FLAGS:
        return bytes([circuit.hop_flags & 0xFF])
    if field_id == FieldId.CELLS_FORWARDED:
        return struct.pack("<Q", circuit.cells_forwarded)
    if field_id == FieldId.SCRATCH:
        return bytes(circuit.scratch)
    return None


def host_get_field(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    field_id, offset, cap = args[0], args[1], args[2]
    if ctx.circuit is None:
        return FAILURE
    data = _field_bytes(ctx.circuit, field_id)
    if data is None:
        return FAILURE
    if field_id == FieldId.SCRATCH:
        data = data[: min(cap, SCRATCH_SIZE)]
    elif cap < len(data):
        return FAILURE
    arena.write(offset, data)
    return len(data)


def host_set_field(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    field_id, offset, length = args[0], args[1], args[2]
    # Писать можно только scratch
    if field_id != FieldId.SCRATCH or ctx.circuit is None or length > SCRATCH_SIZE:
        return FAILURE
    data = arena.read(offset, length)
    ctx.circuit.scratch[:length] = data
    return length


def host_read_cell(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    offset, cap = args[0], args[1]
    if ctx.cell is None:
        return FAILURE
    data = ctx.cell.data[: min(cap, len(ctx.cell.data))]
    arena.write(offset, data)
    return len(data)


def host_emit_cell(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    cmd, offset, length, direction = args[0], args[1], args[2], args[3]
    if not is_extension_command(cmd) or length > RELAY_DATA_SIZE:
        return FAILURE
    if direction not in (Direction.BACKWARD, Direction.FORWARD):
        return FAILURE
    if ctx.emitted >= ctx.emit_budget or ctx.emitter is None:
        return FAILURE
    data = arena.read(offset, length)
    if not ctx.emitter(cmd, data, direction):
        return FAILURE
    ctx.emitted += 1
    return 0


def host_set_timer(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    delay_ms, tag = args[0], args[1]
    if ctx.circuit is None or ctx.scheduler is None:
        return FAILURE
    # Задержка в пределах [MIN_TIMER_DELAY_MS, max_timer_delay_ms]
    if not MIN_TIMER_DELAY_MS <= delay_ms <= ctx.max_timer_delay_ms:
        return FAILURE
    return 0 if ctx.scheduler(delay_ms, tag) else FAILURE


def host_rand_bytes(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    offset, length = args[0], args[1]
    arena.check(offset, length)
    arena.write(offset, ctx.rng.randbytes(length))
    return length


def host_now_ms(args: Tuple[int, ...], arena: GuestArena, ctx: HostContext) -> int:
    return ctx.clock()


_HANDLERS: Dict[HostFunction, Callable[[Tuple[int, ...], GuestArena, HostContext], int]] = {
    HostFunction.LOG: host_log,
    HostFunction.GET_FIELD: host_get_field,
    HostFunction.SET_FIELD: host_set_field,
    HostFunction.READ_CELL: host_read_cell,
    HostFunction.EMIT_CELL: host_emit_cell,
    HostFunction.SET_TIMER: host_set_timer,
    HostFunction.RAND_BYTES: host_rand_bytes,
    HostFunction.NOW_MS: host_now_ms,
}


def build_host_table() -> HostTable:
    """Таблица из 8 функций в нормативном порядке индексов"""
    return HostTable(
        [
            HostEntry(
                index=int(function),
                capability_bit=int(HOST_CAPABILITY[function]),
                gas_cost=HOST_GAS_COST[function],
                handler=_HANDLERS[function],
            )
            for function in HostFunction
        ]
    )
