"""
Формат ячеек: 512-байтная link-ячейка и 507-байтная relay-нагрузка внутри неё
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from fan.exceptions import CellError

CELL_SIZE = 512
PAYLOAD_SIZE = 507
RELAY_DATA_SIZE = 496
FIRST_EXTENSION_COMMAND = 32

_LINK_HEADER = struct.Struct("<IB")
_RELAY_HEADER = struct.Struct("<BHHIH")

# Смещения полей внутри сериализованной relay-нагрузки
RECOGNIZED_SLICE = slice(1, 3)
DIGEST_SLICE = slice(5, 9)


class LinkCommand(IntEnum):
    CREATE = 1
    CREATED = 2
    RELAY = 3
    DESTROY = 4


class RelayCommand(IntEnum):
    """Основные команды 1–31; 32–255: пространство FeatureId"""

    DATA = 1
    END = 2
    EXTEND = 3
    EXTENDED = 4
    PLUGIN_DELIVER = 16
    PLUGIN_ACK = 17
    PLUGIN_ERR = 18


class Direction(IntEnum):
    """Направление относительно клиента; значение: байт направления в ключевом потоке"""

    BACKWARD = 0
    FORWARD = 1


def is_extension_command(relay_cmd: int) -> bool:
    """Команда из пространства расширений (FeatureId)"""
    return FIRST_EXTENSION_COMMAND <= relay_cmd <= 0xFF


def feature_id(value: int) -> int:
    """Проверить и вернуть FeatureId (32..=255)"""
    if not is_extension_command(value):
        raise ValueError(f"feature id must be in 32..255: {value}")
    return value


@dataclass
class LinkCell:
    """Ячейка канального уровня между соседними узлами"""

    circ_id: int
    command: int
    payload: bytes = field(default=bytes(PAYLOAD_SIZE))


@dataclass
class RelayPayload:
    """Relay-нагрузка, которую видит узел-адресат после снятия своего слоя"""

    relay_cmd: int
    data: bytes = b""
    stream_id: int = 0
    recognized: int = 0
    digest: int = 0

    @property
    def length(self) -> int:
        return len(self.data)

    def to_bytes(self) -> bytes:
        """Сериализация в 507 байт, little-endian, данные дополнены нулями"""
        if len(self.data) > RELAY_DATA_SIZE:
            raise CellError(f"relay data too long: {len(self.data)} > {RELAY_DATA_SIZE}")
        try:
            header = _RELAY_HEADER.pack(
                self.relay_cmd, self.recognized, self.stream_id, self.digest, len(self.data)
            )
        except struct.error as e:
            raise CellError(f"relay header field out of range: {e}")
        return header + self.data.ljust(RELAY_DATA_SIZE, b"\x00")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RelayPayload":
        """Разбор 507 байт; байты данных за пределами length отбрасываются"""
        if len(raw) != PAYLOAD_SIZE:
            raise CellError(f"relay payload must be {PAYLOAD_SIZE} bytes, got {len(raw)}")
        relay_cmd, recognized, stream_id, digest, length = _RELAY_HEADER.unpack_from(raw)
        if length > RELAY_DATA_SIZE:
            raise CellError(f"relay length field too large: {length}")
        data = raw[_RELAY_HEADER.size : _RELAY_HEADER.size + length]
        return cls(
            relay_cmd=relay_cmd,
            data=bytes(data),
            stream_id=stream_id,
            recognized=recognized,
            digest=digest,
        )


def encode_cell(cell: LinkCell) -> bytes:
    """Кодирование link-ячейки в ровно 512 байт"""
    if len(cell.payload) != PAYLOAD_SIZE:
        raise CellError(f"cell payload must be {PAYLOAD_SIZE} bytes, got {len(cell.payload)}")
    try:
        header = _LINK_HEADER.pack(cell.circ_id, cell.command)
    except struct.error as e:
        raise CellError(f"cell header field out of range: {e}")
    return header + bytes(cell.payload)


def decode_cell(raw: bytes) -> LinkCell:
    """
    Декодирование 512 байт в LinkCell

    Неизвестные link-команды сохраняются как есть: классификация: дело узла.
    """
    if len(raw) != CELL_SIZE:
        raise CellError(f"cell must be {CELL_SIZE} bytes, got {len(raw)}")
    circ_id, command = _LINK_HEADER.unpack_from(raw)
    return LinkCell(circ_id=circ_id, command=command, payload=bytes(raw[_LINK_HEADER.size :]))


def pad_payload(data: bytes) -> bytes:
    """Дополнить нагрузку link-ячейки нулями до 507 байт"""
    if len(data) > PAYLOAD_SIZE:
        raise CellError(f"payload too long: {len(data)} > {PAYLOAD_SIZE}")
    return data.ljust(PAYLOAD_SIZE, b"\x00")
