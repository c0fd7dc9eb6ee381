"""
Вспомогательные функции тестов
"""

import random
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Tuple

from fan.client.circuit import CircuitHandle, Client
from fan.plugins.keys import SigningKey
from fan.plugins.package import TRAILER_SIZE, build_package
from fan.protocol.crypto import TestProvider
from fan.relay.actions import Actions, Record, ScheduleTimer, SendCell
from fan.relay.node import CircuitEntry, RelayNode, node_id_from_name, node_name
from fan.toolkit.assembler import assemble
from fan.toolkit.samples import SamplePlugin
from fan.vm.isa import (
    FORMS,
    JUMP_FORMS,
    STACK_REGISTER,
    USED_FIELDS,
    WRITES_DST,
    Form,
    Instruction,
    Opcode,
    Program,
)

_OPCODES = [op for op in Opcode if op != Opcode.EXIT]


def sample_package(sample: SamplePlugin, key: SigningKey, **overrides) -> bytes:
    """Подписанный пакет образца; любое поле build_package можно переопределить"""
    fields = dict(
        name=sample.name,
        version=sample.version,
        capability_mask=sample.capability_mask,
        feature_ids=sample.feature_ids,
        entries=sample.entries,
        memory_size=sample.memory_size,
        code=sample.code,
        signing_key=key,
    )
    fields.update(overrides)
    return build_package(**fields)


def asm_package(source: str, key: SigningKey, name: str = "dummy", **overrides) -> bytes:
    """Пакет из исходника: одна функция 40 и вход ON_FEATURE_CELL на инструкции 0"""
    fields = dict(
        name=name,
        version=(1, 0, 0),
        capability_mask=0xFF,
        feature_ids=[40],
        entries=[(2, 0)],
        memory_size=4096,
        code=assemble(source),
        signing_key=key,
    )
    fields.update(overrides)
    return build_package(**fields)


# ===== Генератор программ =====

_SMALL_IMMEDIATES = (0, 1, 2, 7, 8, 63, 64, 255, 4096, -1, -8, 0x7FFFFFFF, -0x80000000)


def _immediate(rng: random.Random) -> int:
    if rng.random() < 0.6:
        return rng.choice(_SMALL_IMMEDIATES)
    return rng.randint(-(1 << 31), (1 << 31) - 1)


def _memory_offset(rng: random.Random) -> int:
    if rng.random() < 0.8:
        return rng.randint(-16, 128)
    return rng.randint(-32768, 32767)


def random_instruction(rng: random.Random, index: int, count: int, host_size: int) -> Instruction:
    """Случайная инструкция, которую верификатор примет в программе из count инструкций"""
    opcode = rng.choice(_OPCODES)
    form = FORMS[int(opcode)]
    uses_dst, uses_src, _, uses_imm = USED_FIELDS[form]
    dst = src = offset = imm = 0
    if uses_dst:
        dst = rng.randint(0, STACK_REGISTER - 1 if form in WRITES_DST else STACK_REGISTER)
    if uses_src:
        src = rng.randint(0, STACK_REGISTER)
    if form in JUMP_FORMS:
        # Обратные переходы редки, иначе большинство программ упирается в газ
        if rng.random() < 0.05:
            target = rng.randint(0, index)
        else:
            target = rng.randint(index + 1, count)
        offset = target - (index + 1)
    elif form in (Form.LOAD, Form.STORE, Form.STORE_IMM):
        offset = _memory_offset(rng)
    if form == Form.CALL:
        imm = rng.randrange(host_size)
    elif uses_imm:
        imm = _immediate(rng)
    return Instruction(int(opcode), dst=dst, src=src, offset=offset, imm=imm)


def random_program(rng: random.Random, host_size: int = 8, max_length: int = 24) -> Program:
    """Программа, проходящая verify: последняя инструкция EXIT"""
    count = rng.randint(1, max_length)
    body = [random_instruction(rng, index, count, host_size) for index in range(count - 1)]
    return Program.from_instructions(body + [Instruction(int(Opcode.EXIT))])


def resign(data: bytes, key: SigningKey, mutate) -> bytes:
    """Изменить подписанное тело пакета и подписать заново тем же ключом"""
    body = mutate(bytearray(data[:-TRAILER_SIZE]))
    return bytes(body) + key.key_id + key.sign(bytes(body))


# ===== Синхронная сеть для тестов узлов =====


class Wire:
    """
    Доставляет SendCell сразу и по порядку; таймеры и записи только собираются

    Ячейки к неизвестным узлам складываются в lost.
    """

    def __init__(self, *endpoints):
        self.endpoints = {endpoint.node_id: endpoint for endpoint in endpoints}
        self.records: List[Tuple[str, Record]] = []
        self.timers: List[Tuple[bytes, ScheduleTimer]] = []
        self.lost: List[SendCell] = []

    def run(self, actions: Actions, sender: bytes) -> None:
        queue = deque((sender, action) for action in actions)
        while queue:
            origin, action = queue.popleft()
            if isinstance(action, Record):
                self.records.append((node_name(origin), action))
            elif isinstance(action, ScheduleTimer):
                self.timers.append((origin, action))
            else:
                target = self.endpoints.get(action.peer)
                if target is None:
                    self.lost.append(action)
                    continue
                replies = target.handle_link_cell(origin, action.cell)
                queue.extend((target.node_id, reply) for reply in replies)

    def pump(self, client: Client) -> None:
        self.run(client.take_actions(), client.node_id)

    def kinds(self, node: str) -> List[str]:
        return [record.kind for name, record in self.records if name == node]


@dataclass
class Network:
    client: Client
    relays: Dict[str, RelayNode]
    wire: Wire

    @property
    def route(self) -> List[bytes]:
        return [relay.node_id for relay in self.relays.values()]

    def open_circuit(self, hops: int = 3) -> CircuitHandle:
        handle = self.client.build_circuit(self.route[:hops])
        self.wire.pump(self.client)
        assert handle.is_open, handle.close_reason
        return handle

    def entry(self, name: str) -> CircuitEntry:
        """Единственная цепочка на узле name"""
        (circuit,) = self.relays[name].circuits.values()
        return circuit


def make_network(trusted: Dict[bytes, bytes], names=("r1", "r2", "r3"), **relay_kwargs) -> Network:
    """Клиент alice и цепочка узлов с тестовым провайдером"""
    provider = TestProvider()
    relays = {
        name: RelayNode(
            node_id_from_name(name),
            node_id_from_name(name),
            provider,
            trusted_keys=trusted,
            clock=lambda: 0,
            **relay_kwargs,
        )
        for name in names
    }
    client = Client(
        node_id_from_name("alice"),
        provider,
        directory={relay.node_id for relay in relays.values()},
        trusted_keys=trusted,
        rng=random.Random(3),
    )
    return Network(client=client, relays=relays, wire=Wire(client, *relays.values()))
