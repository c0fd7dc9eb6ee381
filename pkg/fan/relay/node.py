"""
Машина состояний relay-узла

Обработчики не выполняют ввод-вывод: они возвращают список действий (actions.py),
который исполняет транспорт. Любое отклонение от базового протокола либо обслуживается
подключённым плагином, либо цепочка уничтожается с отчётом.
"""

import logging
import math
import random
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, List, Optional, Set, Tuple

from fan.abi import (
    ALL_CAPABILITIES,
    MAX_TIMER_DELAY_MS,
    SCRATCH_SIZE,
    EventKind,
    describe_capabilities,
)
from fan.exceptions import (
    AttachAborted,
    BadMagic,
    CapabilityDenied,
    CellError,
    CryptoError,
    FeatureConflict,
    MalformedPackage,
    PackageError,
    ParseError,
    SignatureInvalid,
    UnknownCapability,
    UnknownSigner,
    VerifierRejected,
)
from fan.plugins.package import parse_and_verify
from fan.plugins.registry import Attachment, PluginRegistry
from fan.protocol.cells import (
    PAYLOAD_SIZE,
    Direction,
    LinkCell,
    LinkCommand,
    RelayCommand,
    RelayPayload,
    is_extension_command,
    pad_payload,
)
from fan.protocol.crypto import KEY_SIZE, CryptoProvider
from fan.protocol.onion import HopKeys, onion_unwrap_layer, recognize, stamp_digest
from fan.relay.actions import Actions, Record, ScheduleTimer, SendCell
from fan.relay.host_abi import (
    HOP_HAS_NEXT,
    HOP_HAS_PREV,
    CircuitView,
    HostContext,
    build_host_table,
)
from fan.utils.canonical import canonical_dumps
from fan.vm.interpreter import DEFAULT_GAS, Trap

logger = logging.getLogger(__name__)
report_logger = logging.getLogger("fan.reports")

NODE_ID_SIZE = 16
CIRC_ID_HIGH_BIT = 0x80000000
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class DeliveryCode:
    """Коды PLUGIN_ERR"""

    BAD_PACKAGE = 1
    UNKNOWN_SIGNER = 2
    SIGNATURE_INVALID = 3
    VERIFIER_REJECTED = 4
    CAPABILITY_DENIED = 5
    FEATURE_CONFLICT = 6
    ATTACH_ABORTED = 7


def delivery_error_code(error: Exception) -> int:
    """Код PLUGIN_ERR для исключения при доставке пакета"""
    if isinstance(error, (BadMagic, MalformedPackage, ParseError)):
        return DeliveryCode.BAD_PACKAGE
    if isinstance(error, UnknownSigner):
        return DeliveryCode.UNKNOWN_SIGNER
    if isinstance(error, SignatureInvalid):
        return DeliveryCode.SIGNATURE_INVALID
    if isinstance(error, VerifierRejected):
        return DeliveryCode.VERIFIER_REJECTED
    if isinstance(error, (UnknownCapability, CapabilityDenied)):
        return DeliveryCode.CAPABILITY_DENIED
    if isinstance(error, FeatureConflict):
        return DeliveryCode.FEATURE_CONFLICT
    if isinstance(error, AttachAborted):
        return DeliveryCode.ATTACH_ABORTED
    return DeliveryCode.BAD_PACKAGE


def node_id_from_name(name: str) -> bytes:
    """Идентификатор узла: имя в UTF-8, дополненное нулями до 16 байт"""
    raw = name.encode("utf-8")
    if len(raw) > NODE_ID_SIZE:
        raise ValueError(f"node name longer than {NODE_ID_SIZE} bytes: {name}")
    return raw.ljust(NODE_ID_SIZE, b"\x00")


def node_name(node_id: bytes) -> str:
    return bytes(node_id).rstrip(b"\x00").decode("utf-8", errors="replace")


class CircIdAllocator:
    """
    Выдача circ_id на канал: счётчик с 1, старший бит установлен,
    если идентификатор инициатора больше идентификатора соседа
    """

    def __init__(self, own_id: bytes):
        self.own_id = bytes(own_id)
        self._counters: Dict[bytes, int] = {}

    def allocate(self, peer: bytes) -> int:
        counter = self._counters.get(peer, 0) + 1
        if counter >= CIRC_ID_HIGH_BIT:
            raise CellError(f"circ_id space exhausted on link to {node_name(peer)}")
        self._counters[peer] = counter
        high = CIRC_ID_HIGH_BIT if self.own_id > bytes(peer) else 0
        return counter | high


def create_payload(sealed_key: bytes) -> bytes:
    """Нагрузка CREATE: u16 длина ‖ запечатанный ключ ‖ нули"""
    return pad_payload(_U16.pack(len(sealed_key)) + sealed_key)


def open_create_payload(payload: bytes) -> bytes:
    (length,) = _U16.unpack_from(payload)
    if length == 0 or _U16.size + length > PAYLOAD_SIZE:
        raise CellError(f"bad sealed key length {length}")
    return bytes(payload[_U16.size : _U16.size + length])


@dataclass
class RelayPolicy:
    """Политика узла для плагинов"""

    max_capabilities: int = ALL_CAPABILITIES
    gas_per_event: int = DEFAULT_GAS
    emit_budget: int = 4
    max_timer_delay_ms: int = MAX_TIMER_DELAY_MS


@dataclass
class CircuitEntry:
    """Состояние цепочки на узле; ключ: (предыдущий сосед, его circ_id)"""

    prev_peer: bytes
    prev_circ_id: int
    hop_keys: HopKeys
    next_peer: Optional[bytes] = None
    next_circ_id: Optional[int] = None
    extending: bool = False
    cells_forwarded: int = 0
    scratch: Dict[str, bytearray] = field(default_factory=dict)
    pending_timers: List[Tuple[int, str, int]] = field(default_factory=list)
    destroyed: bool = False
    delivery_buffer: Optional[bytearray] = None
    delivery_total: int = 0

    @property
    def key(self) -> Tuple[bytes, int]:
        return (self.prev_peer, self.prev_circ_id)

    @property
    def hop_flags(self) -> int:
        return HOP_HAS_PREV | (HOP_HAS_NEXT if self.next_peer is not None else 0)

    def scratch_for(self, plugin: str, initial: bytes) -> bytearray:
        if plugin not in self.scratch:
            self.scratch[plugin] = bytearray(initial.ljust(SCRATCH_SIZE, b"\x00"))
        return self.scratch[plugin]

    def view(self, plugin: str, initial: bytes) -> CircuitView:
        return CircuitView(
            circ_id=self.prev_circ_id,
            hop_flags=self.hop_flags,
            cells_forwarded=self.cells_forwarded,
            scratch=self.scratch_for(plugin, initial),
        )


def _monotonic_ms() -> int:
    return time.monotonic_ns() // 1_000_000


class RelayNode:
    """
    Relay: таблица цепочек, реестр плагинов, хранилище доверия и политика

    Все изменения состояния выполняются в цикле событий узла (один вызов за раз).
    """

    def __init__(
        self,
        node_id: bytes,
        private_key: bytes,
        provider: CryptoProvider,
        trusted_keys: Optional[Dict[bytes, bytes]] = None,
        policy: Optional[RelayPolicy] = None,
        clock: Optional[Callable[[], int]] = None,
        rng: Optional[random.Random] = None,
        known_peers: Optional[Set[bytes]] = None,
        echo_data: bool = True,
    ):
        self.node_id = bytes(node_id)
        self.name = node_name(self.node_id)
        self.private_key = private_key
        self.provider = provider
        self.trusted_keys: Dict[bytes, bytes] = dict(trusted_keys or {})
        self.policy = policy or RelayPolicy()
        self.clock = clock or _monotonic_ms
        self.rng = rng or random.Random(int.from_bytes(self.node_id, "little"))
        self.known_peers = known_peers
        self.echo_data = echo_data

        self.circuits: Dict[Tuple[bytes, int], CircuitEntry] = {}
        self._by_next: Dict[Tuple[bytes, int], Tuple[bytes, int]] = {}
        self._circ_ids = CircIdAllocator(self.node_id)
        self.registry = PluginRegistry(
            build_host_table(),
            gas_per_event=self.policy.gas_per_event,
            context_factory=self._lifecycle_context,
            owner=self.name,
        )
        self._actions: Actions = []

    # ===== Вспомогательные =====

    def _flush(self) -> Actions:
        actions, self._actions = self._actions, []
        return actions

    def _record(self, kind: str, **detail) -> None:
        self._actions.append(Record(kind, detail))

    def _send(self, peer: bytes, circ_id: int, command: int, payload: bytes = b"") -> None:
        self._actions.append(SendCell(peer, LinkCell(circ_id, command, pad_payload(payload))))

    def _send_backward(self, circuit: CircuitEntry, payload: RelayPayload) -> None:
        """Нагрузка от этого шага к клиенту: digest, один слой, отправка назад"""
        keys = circuit.hop_keys
        raw = stamp_digest(payload, keys, Direction.BACKWARD, self.provider)
        wrapped = onion_unwrap_layer(raw, keys, Direction.BACKWARD, self.provider)
        self._send(circuit.prev_peer, circuit.prev_circ_id, LinkCommand.RELAY, wrapped)

    def _circuit_by_scope(self, scope: Hashable) -> Optional[CircuitEntry]:
        if scope is None:
            return None
        return self.circuits.get(scope)

    def _context(
        self,
        circuit: Optional[CircuitEntry],
        attachment: Attachment,
        cell: Optional[RelayPayload] = None,
    ) -> HostContext:
        plugin = attachment.name

        def emitter(cmd: int, data: bytes, direction: int) -> bool:
            # Только клиент знает ключи всех шагов: узел отправляет лишь к клиенту
            if direction != Direction.BACKWARD or circuit is None or circuit.destroyed:
                return False
            self._send_backward(circuit, RelayPayload(relay_cmd=cmd, data=data))
            self._record(
                "cell_emitted", circ_id=circuit.prev_circ_id, relay_cmd=cmd, plugin=plugin
            )
            return True

        def scheduler(delay_ms: int, tag: int) -> bool:
            if circuit is None or circuit.destroyed:
                return False
            circuit.pending_timers.append((self.clock() + delay_ms, plugin, tag))
            self._actions.append(ScheduleTimer(delay_ms, circuit.key, plugin, tag))
            return True

        def on_log(level: int, text: str) -> None:
            circ_id = circuit.prev_circ_id if circuit else None
            self._record("plugin_log", circ_id=circ_id, plugin=plugin, level=level, text=text)

        return HostContext(
            node_name=self.name,
            plugin=plugin,
            circuit=circuit.view(plugin, attachment.initial_scratch) if circuit else None,
            cell=cell,
            emit_budget=self.policy.emit_budget,
            max_timer_delay_ms=self.policy.max_timer_delay_ms,
            emitter=emitter,
            scheduler=scheduler,
            clock=self.clock,
            rng=self.rng,
            on_log=on_log,
        )

    def _lifecycle_context(self, attachment: Attachment) -> HostContext:
        return self._context(self._circuit_by_scope(attachment.scope), attachment)

    # ===== Link-ячейки =====

    def handle_link_cell(self, from_peer: bytes, cell: LinkCell) -> Actions:
        """Обработать ячейку от соседа и вернуть действия"""
        from_peer = bytes(from_peer)
        try:
            command = LinkCommand(cell.command)
        except ValueError:
            logger.warning(f"{self.name}: dropping cell with unknown link command {cell.command}")
            self._record("cell_dropped", circ_id=cell.circ_id, reason="UnknownLinkCommand")
            return self._flush()

        if command == LinkCommand.CREATE:
            self._handle_create(from_peer, cell)
        elif command == LinkCommand.CREATED:
            self._handle_created(from_peer, cell)
        elif command == LinkCommand.RELAY:
            self._handle_relay(from_peer, cell)
        else:
            self._handle_destroy(from_peer, cell)
        return self._flush()

    def _handle_create(self, from_peer: bytes, cell: LinkCell) -> None:
        key = (from_peer, cell.circ_id)
        if cell.circ_id == 0 or key in self.circuits:
            logger.warning(f"{self.name}: CREATE with unusable circ_id {cell.circ_id}, dropping")
            self._record("cell_dropped", circ_id=cell.circ_id, reason="BadCircId")
            return
        try:
            hop_key = self.provider.open(self.private_key, open_create_payload(cell.payload))
            if len(hop_key) != KEY_SIZE:
                raise CryptoError(f"hop key must be {KEY_SIZE} bytes")
        except (CellError, CryptoError) as e:
            logger.warning(f"{self.name}: CREATE on {cell.circ_id} failed: {e}")
            self._send(from_peer, cell.circ_id, LinkCommand.DESTROY)
            self._record("create_failed", circ_id=cell.circ_id)
            return

        self.circuits[key] = CircuitEntry(
            prev_peer=from_peer, prev_circ_id=cell.circ_id, hop_keys=HopKeys(key=hop_key)
        )
        self._send(from_peer, cell.circ_id, LinkCommand.CREATED)
        self._record("circuit_created", circ_id=cell.circ_id, prev=node_name(from_peer))
        logger.debug(f"{self.name}: circuit {cell.circ_id} created from {node_name(from_peer)}")

    def _handle_created(self, from_peer: bytes, cell: LinkCell) -> None:
        circuit = self._next_circuit(from_peer, cell.circ_id)
        if circuit is None or not circuit.extending:
            logger.warning(f"{self.name}: unexpected CREATED on {cell.circ_id}, dropping")
            self._record("cell_dropped", circ_id=cell.circ_id, reason="UnexpectedCreated")
            return
        circuit.extending = False
        self._send_backward(circuit, RelayPayload(relay_cmd=RelayCommand.EXTENDED))
        self._record("circuit_extended", circ_id=circuit.prev_circ_id, next=node_name(from_peer))

    def _next_circuit(self, peer: bytes, circ_id: int) -> Optional[CircuitEntry]:
        key = self._by_next.get((peer, circ_id))
        return self.circuits.get(key) if key else None

    def _handle_relay(self, from_peer: bytes, cell: LinkCell) -> None:
        circuit = self.circuits.get((from_peer, cell.circ_id))
        if circuit is not None:
            self._relay_forward(circuit, cell.payload)
            return

        circuit = self._next_circuit(from_peer, cell.circ_id)
        if circuit is not None:
            self._relay_backward(circuit, cell.payload)
            return

        logger.warning(f"{self.name}: RELAY on unknown circuit {cell.circ_id}, dropping")
        self._record("cell_dropped", circ_id=cell.circ_id, reason="UnknownCircuit")

    def _relay_forward(self, circuit: CircuitEntry, payload: bytes) -> None:
        if circuit.destroyed:
            return
        keys = circuit.hop_keys
        buffer = onion_unwrap_layer(payload, keys, Direction.FORWARD, self.provider)
        recognized, _ = recognize(buffer, keys, Direction.FORWARD, self.provider)
        if recognized:
            try:
                relay = RelayPayload.from_bytes(buffer)
            except CellError as e:
                logger.warning(f"{self.name}: malformed recognized payload: {e}")
                self.kill_circuit(circuit, "ProtocolViolation")
                return
            self.process_relay_command(circuit, relay, Direction.FORWARD)
            return

        if circuit.next_peer is None or circuit.extending:
            self.kill_circuit(circuit, "UnrecognizedCell")
            return
        self._send(circuit.next_peer, circuit.next_circ_id, LinkCommand.RELAY, buffer)
        circuit.cells_forwarded += 1

    def _relay_backward(self, circuit: CircuitEntry, payload: bytes) -> None:
        if circuit.destroyed:
            return
        keys = circuit.hop_keys
        buffer = onion_unwrap_layer(payload, keys, Direction.BACKWARD, self.provider)
        self._send(circuit.prev_peer, circuit.prev_circ_id, LinkCommand.RELAY, buffer)
        circuit.cells_forwarded += 1

    def _handle_destroy(self, from_peer: bytes, cell: LinkCell) -> None:
        circuit = self.circuits.get((from_peer, cell.circ_id))
        from_prev = circuit is not None
        if circuit is None:
            circuit = self._next_circuit(from_peer, cell.circ_id)
        if circuit is None:
            logger.debug(f"{self.name}: DESTROY for unknown circuit {cell.circ_id}")
            return

        self._teardown(circuit)
        if from_prev and circuit.next_peer is not None:
            self._send(circuit.next_peer, circuit.next_circ_id, LinkCommand.DESTROY)
        elif not from_prev:
            self._send(circuit.prev_peer, circuit.prev_circ_id, LinkCommand.DESTROY)
        self._record("circuit_destroyed", circ_id=circuit.prev_circ_id, by=node_name(from_peer))

    def _teardown(self, circuit: CircuitEntry) -> None:
        """Снять плагины цепочки и удалить её из таблиц"""
        circuit.destroyed = True
        self.registry.teardown_circuit(circuit.key)
        self.circuits.pop(circuit.key, None)
        if circuit.next_peer is not None:
            self._by_next.pop((circuit.next_peer, circuit.next_circ_id), None)
        circuit.pending_timers.clear()

    # ===== Relay-команды =====

    def process_relay_command(
        self, circuit: CircuitEntry, payload: RelayPayload, direction: Direction
    ) -> None:
        """Распознанная на этом шаге нагрузка: основные команды или плагин"""
        cmd = payload.relay_cmd
        if is_extension_command(cmd):
            self._dispatch_feature(circuit, payload, direction)
        elif cmd == RelayCommand.DATA:
            self._record(
                "data_delivered",
                circ_id=circuit.prev_circ_id,
                stream_id=payload.stream_id,
                length=payload.length,
            )
            if self.echo_data:
                self._send_backward(
                    circuit,
                    RelayPayload(
                        relay_cmd=RelayCommand.DATA, data=payload.data, stream_id=payload.stream_id
                    ),
                )
        elif cmd == RelayCommand.END:
            self._record("stream_end", circ_id=circuit.prev_circ_id, stream_id=payload.stream_id)
        elif cmd == RelayCommand.EXTEND:
            self._extend(circuit, payload)
        elif cmd == RelayCommand.PLUGIN_DELIVER:
            self.deliver_plugin(circuit, payload.data)
        else:
            self.kill_circuit(circuit, "ProtocolViolation", relay_cmd=cmd)

    def _dispatch_feature(
        self, circuit: CircuitEntry, payload: RelayPayload, direction: Direction
    ) -> None:
        cmd = payload.relay_cmd
        attachment = self.registry.lookup(cmd, circuit.key)
        if attachment is None:
            self.kill_circuit(circuit, f"UnknownFeature({cmd})", relay_cmd=cmd)
            return

        context = self._context(circuit, attachment, cell=payload)
        try:
            self.registry.run_event(
                attachment, EventKind.ON_FEATURE_CELL, (cmd, int(direction)), context
            )
        except Trap as trap:
            self.kill_circuit(circuit, "PluginTrap", relay_cmd=cmd, trap=trap)
            return
        self._record(
            "feature_handled", circ_id=circuit.prev_circ_id, relay_cmd=cmd, plugin=attachment.name
        )

    def _extend(self, circuit: CircuitEntry, payload: RelayPayload) -> None:
        if circuit.next_peer is not None:
            self.kill_circuit(circuit, "ProtocolViolation", relay_cmd=RelayCommand.EXTEND)
            return
        data = payload.data
        next_peer = bytes(data[:NODE_ID_SIZE])
        sealed = bytes(data[NODE_ID_SIZE:])
        unreachable = self.known_peers is not None and next_peer not in self.known_peers
        if len(data) <= NODE_ID_SIZE or unreachable or next_peer == self.node_id:
            self.kill_circuit(circuit, "ExtendFailed", relay_cmd=RelayCommand.EXTEND)
            return

        try:
            create = create_payload(sealed)
            next_circ_id = self._circ_ids.allocate(next_peer)
        except CellError as e:
            logger.warning(f"{self.name}: cannot extend circuit {circuit.prev_circ_id}: {e}")
            self.kill_circuit(circuit, "ExtendFailed", relay_cmd=RelayCommand.EXTEND)
            return

        circuit.next_peer = next_peer
        circuit.next_circ_id = next_circ_id
        circuit.extending = True
        self._by_next[(next_peer, next_circ_id)] = circuit.key
        self._send(next_peer, next_circ_id, LinkCommand.CREATE, create)

    # ===== Доставка плагинов =====

    def deliver_plugin(self, circuit: CircuitEntry, data: bytes) -> None:
        """
        Фрагмент PLUGIN_DELIVER: первый начинается с u16 общей длины пакета

        Ответ PLUGIN_ACK (u32 задержка в мкс ‖ имя) или PLUGIN_ERR (u8 код ‖ описание);
        ошибка доставки не уничтожает цепочку.
        """
        if circuit.delivery_buffer is None:
            if len(data) < _U16.size:
                self._reply_delivery_error(circuit, DeliveryCode.BAD_PACKAGE, "missing length")
                return
            (circuit.delivery_total,) = _U16.unpack_from(data)
            circuit.delivery_buffer = bytearray(data[_U16.size :])
        else:
            circuit.delivery_buffer += data

        if len(circuit.delivery_buffer) < circuit.delivery_total:
            return
        package_bytes = bytes(circuit.delivery_buffer)
        circuit.delivery_buffer = None
        if len(package_bytes) != circuit.delivery_total:
            self._reply_delivery_error(circuit, DeliveryCode.BAD_PACKAGE, "length mismatch")
            return

        started = time.perf_counter_ns()
        try:
            package = parse_and_verify(package_bytes, self.trusted_keys)
            excess = package.capability_mask & ~self.policy.max_capabilities
            if excess:
                raise CapabilityDenied(f"capabilities {describe_capabilities(excess)} denied")
            attachment = self.registry.attach(package, circuit.key)
        except (PackageError, VerifierRejected, FeatureConflict, AttachAborted) as e:
            self._reply_delivery_error(circuit, delivery_error_code(e), str(e))
            return

        latency_us = max(1, math.ceil((time.perf_counter_ns() - started) / 1000))
        attachment.attach_latency_us = latency_us
        if circuit.destroyed:
            return
        ack = _U32.pack(min(latency_us, 0xFFFFFFFF)) + attachment.name.encode("utf-8")
        self._send_backward(circuit, RelayPayload(relay_cmd=RelayCommand.PLUGIN_ACK, data=ack))
        self._record("plugin_attached", circ_id=circuit.prev_circ_id, plugin=attachment.name)
        logger.info(
            f"{self.name}: attached {attachment.name} on circuit {circuit.prev_circ_id} "
            f"in {latency_us} us"
        )

    def _reply_delivery_error(self, circuit: CircuitEntry, code: int, detail: str) -> None:
        logger.warning(f"{self.name}: plugin delivery failed with code {code}: {detail}")
        data = bytes([code]) + detail.encode("utf-8")[:495]
        self._send_backward(circuit, RelayPayload(relay_cmd=RelayCommand.PLUGIN_ERR, data=data))
        self._record("plugin_rejected", circ_id=circuit.prev_circ_id, code=code)

    # ===== Глобальные плагины и таймеры =====

    def attach_global(self, data: bytes, initial_scratch: bytes = b"") -> Attachment:
        """
        Подключить пакет глобально (для всех цепочек узла)

        Raises:
            PackageError, VerifierRejected, CapabilityDenied, FeatureConflict, AttachAborted
        """
        package = parse_and_verify(data, self.trusted_keys)
        excess = package.capability_mask & ~self.policy.max_capabilities
        if excess:
            raise CapabilityDenied(f"capabilities {describe_capabilities(excess)} denied")
        return self.registry.attach(package, None, initial_scratch)

    def fire_timer(self, circuit_key: Hashable, plugin: str, tag: int) -> Actions:
        """ON_TIMER плагина на цепочке; снятые цепочки и плагины игнорируются"""
        circuit = self.circuits.get(circuit_key)
        if circuit is None or circuit.destroyed:
            return self._flush()
        for index, (_, name, timer_tag) in enumerate(circuit.pending_timers):
            if name == plugin and timer_tag == tag:
                del circuit.pending_timers[index]
                break

        attachment = self.registry.get(plugin, circuit.key) or self.registry.get(plugin, None)
        if attachment is None:
            return self._flush()

        self._record("timer_fired", circ_id=circuit.prev_circ_id, plugin=plugin, tag=tag)
        try:
            self.registry.run_event(
                attachment, EventKind.ON_TIMER, (tag,), self._context(circuit, attachment)
            )
        except Trap as trap:
            self.kill_circuit(circuit, "PluginTrap", trap=trap)
        return self._flush()

    # ===== Уничтожение цепочки =====

    def kill_circuit(
        self,
        circuit: CircuitEntry,
        reason: str,
        relay_cmd: Optional[int] = None,
        trap: Optional[Trap] = None,
    ) -> None:
        """DESTROY в обе стороны, ON_CIRCUIT_TEARDOWN плагинов и структурированный отчёт"""
        self._teardown(circuit)
        self._send(circuit.prev_peer, circuit.prev_circ_id, LinkCommand.DESTROY)
        if circuit.next_peer is not None:
            self._send(circuit.next_peer, circuit.next_circ_id, LinkCommand.DESTROY)

        report = {
            "circ_id": circuit.prev_circ_id,
            "node_id": self.name,
            "reason": reason,
            "time": self.clock(),
        }
        if relay_cmd is not None:
            report["relay_cmd"] = int(relay_cmd)
        if trap is not None:
            report["trap"] = trap.to_dict()
        report_logger.warning(canonical_dumps(report))
        self._record("kill", **report)
