"""
Общие константы интерфейса хост ↔ плагин
Биты возможностей, индексы хост-функций, события жизненного цикла и поля состояния
"""

from enum import IntEnum
from typing import Dict, Iterable


class Capability(IntEnum):
    """Номер бита возможности в capability_mask"""

    LOG = 0
    STATE_READ = 1
    STATE_WRITE = 2
    CELL_READ = 3
    CELL_EMIT = 4
    TIMER = 5
    RAND = 6
    CLOCK = 7


ALL_CAPABILITIES = sum(1 << cap for cap in Capability)


class HostFunction(IntEnum):
    """Индексы нормативной таблицы хост-функций (операнд CALL)"""

    LOG = 0
    GET_FIELD = 1
    SET_FIELD = 2
    READ_CELL = 3
    EMIT_CELL = 4
    SET_TIMER = 5
    RAND_BYTES = 6
    NOW_MS = 7


# Какой бит возможности требует каждая хост-функция
HOST_CAPABILITY: Dict[HostFunction, Capability] = {
    HostFunction.LOG: Capability.LOG,
    HostFunction.GET_FIELD: Capability.STATE_READ,
    HostFunction.SET_FIELD: Capability.STATE_WRITE,
    HostFunction.READ_CELL: Capability.CELL_READ,
    HostFunction.EMIT_CELL: Capability.CELL_EMIT,
    HostFunction.SET_TIMER: Capability.TIMER,
    HostFunction.RAND_BYTES: Capability.RAND,
    HostFunction.NOW_MS: Capability.CLOCK,
}

# Стоимость вызова в газе (поверх 1 за саму инструкцию CALL)
HOST_GAS_COST: Dict[HostFunction, int] = {
    HostFunction.LOG: 10,
    HostFunction.GET_FIELD: 5,
    HostFunction.SET_FIELD: 5,
    HostFunction.READ_CELL: 5,
    HostFunction.EMIT_CELL: 20,
    HostFunction.SET_TIMER: 10,
    HostFunction.RAND_BYTES: 5,
    HostFunction.NOW_MS: 1,
}

# Имена для ассемблера: "call emit_cell"
HOST_FUNCTION_NAMES: Dict[str, int] = {fn.name.lower(): int(fn) for fn in HostFunction}


class EventKind(IntEnum):
    """События, на которые плагин может объявить точку входа"""

    ON_ATTACH = 0
    ON_DETACH = 1
    ON_FEATURE_CELL = 2
    ON_TIMER = 3
    ON_CIRCUIT_TEARDOWN = 4


LIFECYCLE_EVENTS = frozenset(
    {EventKind.ON_ATTACH, EventKind.ON_DETACH, EventKind.ON_TIMER, EventKind.ON_CIRCUIT_TEARDOWN}
)


class FieldId(IntEnum):
    """Поля состояния цепочки для get_field/set_field"""

    CIRCUIT_ID = 0
    HOP_FLAGS = 1
    CELLS_FORWARDED = 2
    SCRATCH = 3


SCRATCH_SIZE = 256

# Допустимые задержки set_timer, мс
MIN_TIMER_DELAY_MS = 1
MAX_TIMER_DELAY_MS = 3_600_000


def capability_mask(caps: Iterable[Capability]) -> int:
    """Собрать маску из набора возможностей"""
    mask = 0
    for cap in caps:
        mask |= 1 << int(cap)
    return mask


def parse_capabilities(text: str) -> int:
    """
    Разобрать список возможностей "TIMER,LOG" или число "0x3f"

    Raises:
        ValueError: неизвестное имя возможности
    """
    text = text.strip()
    if not text:
        return 0
    if text[0].isdigit():
        mask = int(text, 0)
        if mask < 0 or mask > 0xFFFFFFFF:
            raise ValueError(f"capability mask out of range: {text}")
        return mask

    mask = 0
    for name in text.split(","):
        name = name.strip().upper()
        if not name:
            continue
        try:
            mask |= 1 << int(Capability[name])
        except KeyError:
            raise ValueError(f"unknown capability: {name}")
    return mask


def describe_capabilities(mask: int) -> str:
    """Человекочитаемое представление маски: "LOG,TIMER" """
    names = [cap.name for cap in Capability if mask & (1 << cap)]
    unknown = mask & ~ALL_CAPABILITIES
    if unknown:
        names.append(f"0x{unknown:x}")
    return ",".join(names) if names else "-"
