"""
Луковичное шифрование: состояние шага, наложение/снятие слоёв и распознавание адресата
"""

from dataclasses import dataclass
from typing import List, Tuple, Union

from fan.exceptions import CellError, CryptoError
from fan.protocol.cells import (
    DIGEST_SLICE,
    PAYLOAD_SIZE,
    RECOGNIZED_SLICE,
    Direction,
    RelayPayload,
)
from fan.protocol.crypto import FNV_OFFSET, MASK64, CryptoProvider

DIGEST_MASK = 0xFFFFFFFF


@dataclass
class HopKeys:
    """Симметричное состояние шага цепочки; счётчики и дайджесты независимы по направлениям"""

    key: bytes
    fwd_cell_counter: int = 0
    bwd_cell_counter: int = 0
    fwd_digest_state: int = FNV_OFFSET
    bwd_digest_state: int = FNV_OFFSET

    def take_counter(self, direction: Direction) -> int:
        """Вернуть текущий счётчик направления и сдвинуть его на 1"""
        if direction == Direction.FORWARD:
            counter = self.fwd_cell_counter
            if counter >= MASK64:
                raise CryptoError("forward cell counter overflow")
            self.fwd_cell_counter = counter + 1
        else:
            counter = self.bwd_cell_counter
            if counter >= MASK64:
                raise CryptoError("backward cell counter overflow")
            self.bwd_cell_counter = counter + 1
        return counter

    def digest_state(self, direction: Direction) -> int:
        if direction == Direction.FORWARD:
            return self.fwd_digest_state
        return self.bwd_digest_state

    def commit_digest(self, direction: Direction, state: int) -> None:
        if direction == Direction.FORWARD:
            self.fwd_digest_state = state
        else:
            self.bwd_digest_state = state


def _digest_input(payload_bytes: bytes) -> bytes:
    """Нагрузка с обнулённым полем digest"""
    raw = bytearray(payload_bytes)
    raw[DIGEST_SLICE] = b"\x00\x00\x00\x00"
    return bytes(raw)


def stamp_digest(
    payload: RelayPayload, keys: HopKeys, direction: Direction, provider: CryptoProvider
) -> bytes:
    """
    Проставить digest для шага-адресата и зафиксировать его бегущее состояние

    Returns:
        Сериализованная нагрузка (507 байт), готовая к onion_wrap
    """
    payload.recognized = 0
    payload.digest = 0
    raw = payload.to_bytes()
    state = provider.digest_update(keys.digest_state(direction), raw)
    keys.commit_digest(direction, state)
    payload.digest = state & DIGEST_MASK
    return payload.to_bytes()


def recognize(
    payload_bytes: bytes, keys: HopKeys, direction: Direction, provider: CryptoProvider
) -> Tuple[bool, int]:
    """
    Проверить, является ли этот шаг адресатом нагрузки

    Состояние дайджеста фиксируется только при распознавании.

    Returns:
        (recognized, состояние дайджеста после проверки)
    """
    if len(payload_bytes) != PAYLOAD_SIZE:
        return False, keys.digest_state(direction)
    if payload_bytes[RECOGNIZED_SLICE] != b"\x00\x00":
        return False, keys.digest_state(direction)

    candidate = provider.digest_update(keys.digest_state(direction), _digest_input(payload_bytes))
    expected = int.from_bytes(payload_bytes[DIGEST_SLICE], "little")
    if candidate & DIGEST_MASK != expected:
        return False, keys.digest_state(direction)

    keys.commit_digest(direction, candidate)
    return True, candidate


def onion_wrap(
    payload: Union[RelayPayload, bytes],
    hops: List[HopKeys],
    provider: CryptoProvider,
    direction: Direction = Direction.FORWARD,
) -> bytes:
    """
    Наложить по слою на каждый шаг: внутренний для адресата (последнего), внешний для шага 1

    payload: RelayPayload или её сериализация с уже проставленным digest.
    """
    buffer = payload.to_bytes() if isinstance(payload, RelayPayload) else bytes(payload)
    if len(buffer) != PAYLOAD_SIZE:
        raise CellError(f"relay payload must be {PAYLOAD_SIZE} bytes, got {len(buffer)}")
    for keys in reversed(hops):
        buffer = provider.stream_xor(keys.key, direction, keys.take_counter(direction), buffer)
    return buffer


def onion_unwrap_layer(
    buffer: bytes, keys: HopKeys, direction: Direction, provider: CryptoProvider
) -> bytes:
    """Снять (или, для обратного направления на узле, наложить) один слой"""
    if len(buffer) != PAYLOAD_SIZE:
        raise CellError(f"relay payload must be {PAYLOAD_SIZE} bytes, got {len(buffer)}")
    return provider.stream_xor(keys.key, direction, keys.take_counter(direction), buffer)
