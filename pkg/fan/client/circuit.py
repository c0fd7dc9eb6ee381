"""
Клиентская сторона: построение цепочек, луковичная отправка и приём,
доставка эфемерных плагинов на выбранный шаг и локальные подключения
"""

import logging
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, Hashable, List, Optional, Set, Tuple

from fan.abi import SCRATCH_SIZE, EventKind, describe_capabilities
from fan.exceptions import CapabilityDenied, CellError, CircuitError
from fan.plugins.package import parse_and_verify
from fan.plugins.registry import Attachment, PluginRegistry
from fan.protocol.cells import (
    RELAY_DATA_SIZE,
    Direction,
    LinkCell,
    LinkCommand,
    RelayCommand,
    RelayPayload,
    is_extension_command,
    pad_payload,
)
from fan.protocol.crypto import KEY_SIZE, CryptoProvider
from fan.protocol.onion import HopKeys, onion_unwrap_layer, onion_wrap, recognize, stamp_digest
from fan.relay.actions import Actions, Record, ScheduleTimer, SendCell
from fan.relay.host_abi import HOP_HAS_NEXT, CircuitView, HostContext, build_host_table
from fan.relay.node import CircIdAllocator, RelayPolicy, create_payload, node_name
from fan.utils.canonical import canonical_dumps
from fan.vm.interpreter import Trap

logger = logging.getLogger(__name__)
report_logger = logging.getLogger("fan.reports")

MAX_HOPS = 5
MAX_DELIVERY_SIZE = 0xFFFF
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class CircuitState(str, Enum):
    BUILDING = "building"
    OPEN = "open"
    CLOSED = "closed"


@dataclass
class PendingInjection:
    hop_index: int
    plugin: str
    deadline_ms: int


@dataclass
class InjectionResult:
    """Итог доставки: задержка подключения из PLUGIN_ACK или код PLUGIN_ERR"""

    hop_index: int
    plugin: str
    latency_us: Optional[int] = None
    code: Optional[int] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.latency_us is not None


@dataclass
class CircuitHandle:
    """Цепочка клиента; ключи существуют ровно для построенных шагов"""

    handle_id: int
    route: List[bytes]
    circ_id: int
    hops: List[HopKeys] = field(default_factory=list)
    state: CircuitState = CircuitState.BUILDING
    close_reason: Optional[str] = None
    pending_key: Optional[bytes] = None
    build_deadline_ms: int = 0
    scratch: Dict[str, bytearray] = field(default_factory=dict)
    received_data: List[Tuple[int, bytes]] = field(default_factory=list)
    received_features: List[Tuple[int, int, bytes]] = field(default_factory=list)
    pending_injections: Deque[PendingInjection] = field(default_factory=deque)
    injection_results: List[InjectionResult] = field(default_factory=list)

    @property
    def entry_peer(self) -> bytes:
        return self.route[0]

    @property
    def key(self) -> Tuple[bytes, int]:
        return (self.entry_peer, self.circ_id)

    @property
    def is_open(self) -> bool:
        return self.state == CircuitState.OPEN

    def view(self, plugin: str, initial: bytes) -> CircuitView:
        if plugin not in self.scratch:
            self.scratch[plugin] = bytearray(initial.ljust(SCRATCH_SIZE, b"\x00"))
        return CircuitView(
            circ_id=self.circ_id,
            hop_flags=HOP_HAS_NEXT,
            cells_forwarded=0,
            scratch=self.scratch[plugin],
        )


class Client:
    """
    Клиент без ввода-вывода: команды копят действия, транспорт забирает их take_actions()

    Входящие ячейки обрабатываются handle_link_cell, который сразу возвращает действия.
    """

    def __init__(
        self,
        node_id: bytes,
        provider: CryptoProvider,
        directory: Set[bytes],
        trusted_keys: Optional[Dict[bytes, bytes]] = None,
        policy: Optional[RelayPolicy] = None,
        clock: Optional[Callable[[], int]] = None,
        rng: Optional[random.Random] = None,
        build_timeout_ms: int = 5000,
        inject_timeout_ms: int = 2000,
    ):
        self.node_id = bytes(node_id)
        self.name = node_name(self.node_id)
        self.provider = provider
        self.directory = set(directory)
        self.trusted_keys: Dict[bytes, bytes] = dict(trusted_keys or {})
        self.policy = policy or RelayPolicy()
        self.clock = clock or (lambda: 0)
        self.rng = rng or random.Random(int.from_bytes(self.node_id, "little"))
        self.build_timeout_ms = build_timeout_ms
        self.inject_timeout_ms = inject_timeout_ms

        self.handles: Dict[int, CircuitHandle] = {}
        self._by_link: Dict[Tuple[bytes, int], int] = {}
        self._circ_ids = CircIdAllocator(self.node_id)
        self._next_handle = 1
        self.registry = PluginRegistry(
            build_host_table(),
            gas_per_event=self.policy.gas_per_event,
            context_factory=self._lifecycle_context,
            owner=self.name,
        )
        self._actions: Actions = []

    # ===== Вспомогательные =====

    def take_actions(self) -> Actions:
        actions, self._actions = self._actions, []
        return actions

    def _record(self, kind: str, **detail) -> None:
        self._actions.append(Record(kind, detail))

    def _send(self, handle: CircuitHandle, command: int, payload: bytes = b"") -> None:
        cell = LinkCell(handle.circ_id, command, pad_payload(payload))
        self._actions.append(SendCell(handle.entry_peer, cell))

    def _send_relay(self, handle: CircuitHandle, hop_index: int, payload: RelayPayload) -> None:
        """Нагрузка для шага hop_index (с 1): digest адресата, затем слои hop_index..1"""
        hops = handle.hops[:hop_index]
        raw = stamp_digest(payload, hops[-1], Direction.FORWARD, self.provider)
        wrapped = onion_wrap(raw, hops, self.provider, Direction.FORWARD)
        self._send(handle, LinkCommand.RELAY, wrapped)

    def _require_open(self, handle: CircuitHandle) -> None:
        if handle.state != CircuitState.OPEN:
            raise CircuitError(f"circuit {handle.handle_id} is {handle.state.value}")

    def _context(
        self, handle: CircuitHandle, attachment: Attachment, cell: Optional[RelayPayload] = None
    ) -> HostContext:
        plugin = attachment.name

        def emitter(cmd: int, data: bytes, direction: int) -> bool:
            # Клиент отправляет только вперёд, последнему шагу
            if direction != Direction.FORWARD or not handle.is_open:
                return False
            self._send_relay(handle, len(handle.hops), RelayPayload(relay_cmd=cmd, data=data))
            self._record("cell_emitted", handle=handle.handle_id, relay_cmd=cmd, plugin=plugin)
            return True

        def scheduler(delay_ms: int, tag: int) -> bool:
            if handle.state == CircuitState.CLOSED:
                return False
            self._actions.append(ScheduleTimer(delay_ms, handle.key, plugin, tag))
            return True

        def on_log(level: int, text: str) -> None:
            self._record(
                "plugin_log", handle=handle.handle_id, plugin=plugin, level=level, text=text
            )

        return HostContext(
            node_name=self.name,
            plugin=plugin,
            circuit=handle.view(plugin, attachment.initial_scratch),
            cell=cell,
            emit_budget=self.policy.emit_budget,
            max_timer_delay_ms=self.policy.max_timer_delay_ms,
            emitter=emitter,
            scheduler=scheduler,
            clock=self.clock,
            rng=self.rng,
            on_log=on_log,
        )

    def _lifecycle_context(self, attachment: Attachment) -> Optional[HostContext]:
        handle_id = self._by_link.get(attachment.scope) if attachment.scope else None
        if handle_id is None:
            return None
        return self._context(self.handles[handle_id], attachment)

    # ===== Построение цепочки =====

    def build_circuit(self, route: List[bytes]) -> CircuitHandle:
        """
        Начать телескопическое построение: CREATE к шагу 1, затем EXTEND к последнему шагу

        Raises:
            CircuitError: длина маршрута вне 1..5 или неизвестный узел (до отправки ячеек)
        """
        route = [bytes(node_id) for node_id in route]
        if not 1 <= len(route) <= MAX_HOPS:
            raise CircuitError(f"route must have 1..{MAX_HOPS} hops, got {len(route)}")
        unknown = [node_name(node_id) for node_id in route if node_id not in self.directory]
        if unknown:
            raise CircuitError(f"route contains unknown relays: {', '.join(unknown)}")

        handle = CircuitHandle(
            handle_id=self._next_handle,
            route=route,
            circ_id=self._circ_ids.allocate(route[0]),
            build_deadline_ms=self.clock() + self.build_timeout_ms,
        )
        self._next_handle += 1
        self.handles[handle.handle_id] = handle
        self._by_link[handle.key] = handle.handle_id

        handle.pending_key = self.rng.randbytes(KEY_SIZE)
        sealed = self.provider.seal(route[0], handle.pending_key)
        self._send(handle, LinkCommand.CREATE, create_payload(sealed))
        self._record("build_started", handle=handle.handle_id, hops=len(route))
        logger.debug(f"{self.name}: building circuit {handle.handle_id} over {len(route)} hops")
        return handle

    def _advance_build(self, handle: CircuitHandle) -> None:
        handle.hops.append(HopKeys(key=handle.pending_key))
        handle.pending_key = None
        if len(handle.hops) == len(handle.route):
            handle.state = CircuitState.OPEN
            self._record("circuit_open", handle=handle.handle_id, hops=len(handle.hops))
            logger.info(f"{self.name}: circuit {handle.handle_id} open")
            return

        next_peer = handle.route[len(handle.hops)]
        handle.pending_key = self.rng.randbytes(KEY_SIZE)
        sealed = self.provider.seal(next_peer, handle.pending_key)
        extend = RelayPayload(relay_cmd=RelayCommand.EXTEND, data=next_peer + sealed)
        self._send_relay(handle, len(handle.hops), extend)

    def expire_build(self, handle: CircuitHandle) -> Actions:
        """Закрыть цепочку, если она всё ещё строится к моменту таймаута"""
        if handle.state == CircuitState.BUILDING and self.clock() >= handle.build_deadline_ms:
            self._send(handle, LinkCommand.DESTROY)
            self._close(handle, "BuildTimeout")
        return self.take_actions()

    # ===== Данные =====

    def send_data(self, handle: CircuitHandle, data: bytes, stream_id: int = 1) -> None:
        """
        DATA к последнему шагу

        Raises:
            CircuitError: цепочка не открыта
            CellError: данных больше 496 байт
        """
        self._require_open(handle)
        if len(data) > RELAY_DATA_SIZE:
            raise CellError(f"data too long: {len(data)} > {RELAY_DATA_SIZE}")
        payload = RelayPayload(relay_cmd=RelayCommand.DATA, data=bytes(data), stream_id=stream_id)
        self._send_relay(handle, len(handle.hops), payload)
        self._record("data_sent", handle=handle.handle_id, length=len(data))

    def recv_data(self, handle: CircuitHandle) -> List[Tuple[int, bytes]]:
        """Забрать доставленные DATA-нагрузки (stream_id, данные)"""
        received, handle.received_data = handle.received_data, []
        return received

    def send_feature(self, handle: CircuitHandle, hop_index: int, cmd: int, data: bytes) -> None:
        """Сырая ячейка расширения для шага hop_index"""
        self._require_open(handle)
        if not 1 <= hop_index <= len(handle.hops):
            raise CircuitError(f"hop index {hop_index} outside 1..{len(handle.hops)}")
        if not is_extension_command(cmd):
            raise CircuitError(f"relay command {cmd} is not an extension command")
        self._send_relay(handle, hop_index, RelayPayload(relay_cmd=cmd, data=bytes(data)))
        self._record("feature_sent", handle=handle.handle_id, hop=hop_index, relay_cmd=cmd)

    # ===== Плагины =====

    def inject_plugin(
        self, handle: CircuitHandle, hop_index: int, package_bytes: bytes, plugin: str = ""
    ) -> PendingInjection:
        """
        PLUGIN_DELIVER на шаг hop_index; фрагменты по 496 байт, первый с u16 общей длиной

        Raises:
            CircuitError: цепочка не открыта, неверный шаг или пакет больше 65535 байт
        """
        self._require_open(handle)
        if not 1 <= hop_index <= len(handle.hops):
            raise CircuitError(f"hop index {hop_index} outside 1..{len(handle.hops)}")
        if len(package_bytes) > MAX_DELIVERY_SIZE:
            raise CircuitError(f"package of {len(package_bytes)} bytes exceeds delivery limit")

        framed = _U16.pack(len(package_bytes)) + bytes(package_bytes)
        for start in range(0, len(framed), RELAY_DATA_SIZE):
            fragment = framed[start : start + RELAY_DATA_SIZE]
            payload = RelayPayload(relay_cmd=RelayCommand.PLUGIN_DELIVER, data=fragment)
            self._send_relay(handle, hop_index, payload)

        pending = PendingInjection(
            hop_index=hop_index,
            plugin=plugin,
            deadline_ms=self.clock() + self.inject_timeout_ms,
        )
        handle.pending_injections.append(pending)
        self._record("plugin_injected", handle=handle.handle_id, hop=hop_index)
        return pending

    def expire_injection(self, handle: CircuitHandle, force: bool = False) -> Actions:
        """Снять просроченные (или, при force, все) ожидания доставки как таймауты"""
        now = self.clock()
        queue = handle.pending_injections
        while queue and (force or queue[0].deadline_ms <= now):
            expired = queue.popleft()
            handle.injection_results.append(
                InjectionResult(expired.hop_index, expired.plugin, detail="timeout")
            )
            self._record("plugin_timeout", handle=handle.handle_id, hop=expired.hop_index)
        return self.take_actions()

    def _resolve_injection(self, handle: CircuitHandle, hop_index: int) -> PendingInjection:
        for pending in handle.pending_injections:
            if pending.hop_index == hop_index:
                handle.pending_injections.remove(pending)
                return pending
        return PendingInjection(hop_index=hop_index, plugin="", deadline_ms=0)

    def attach_local(
        self, handle: CircuitHandle, package_bytes: bytes, initial_scratch: bytes = b""
    ) -> Attachment:
        """
        Подключить плагин к цепочке на стороне клиента

        Raises:
            PackageError, VerifierRejected, FeatureConflict, AttachAborted, CircuitError
        """
        if handle.state == CircuitState.CLOSED:
            raise CircuitError(f"circuit {handle.handle_id} is closed")
        package = parse_and_verify(package_bytes, self.trusted_keys)
        excess = package.capability_mask & ~self.policy.max_capabilities
        if excess:
            raise CapabilityDenied(f"capabilities {describe_capabilities(excess)} denied")
        attachment = self.registry.attach(package, handle.key, initial_scratch)
        self._record("plugin_attached_local", handle=handle.handle_id, plugin=attachment.name)
        return attachment

    def fire_timer(self, circuit_key: Hashable, plugin: str, tag: int) -> Actions:
        handle_id = self._by_link.get(circuit_key)
        handle = self.handles.get(handle_id) if handle_id is not None else None
        if handle is None or handle.state == CircuitState.CLOSED:
            return self.take_actions()
        attachment = self.registry.get(plugin, handle.key)
        if attachment is None:
            return self.take_actions()
        self._record("timer_fired", handle=handle.handle_id, plugin=plugin, tag=tag)
        try:
            self.registry.run_event(
                attachment, EventKind.ON_TIMER, (tag,), self._context(handle, attachment)
            )
        except Trap as trap:
            self.kill_circuit(handle, "PluginTrap", trap=trap)
        return self.take_actions()

    # ===== Входящие ячейки =====

    def handle_link_cell(self, from_peer: bytes, cell: LinkCell) -> Actions:
        handle_id = self._by_link.get((bytes(from_peer), cell.circ_id))
        handle = self.handles.get(handle_id) if handle_id is not None else None
        if handle is None or handle.state == CircuitState.CLOSED:
            logger.debug(f"{self.name}: cell for unknown or closed circuit {cell.circ_id}")
            return self.take_actions()

        if cell.command == LinkCommand.CREATED:
            if handle.state == CircuitState.BUILDING and not handle.hops:
                self._advance_build(handle)
            else:
                self.kill_circuit(handle, "ProtocolViolation")
        elif cell.command == LinkCommand.RELAY:
            self._handle_relay(handle, cell.payload)
        elif cell.command == LinkCommand.DESTROY:
            building = handle.state == CircuitState.BUILDING
            self._close(handle, "DestroyedDuringBuild" if building else "Destroyed")
        else:
            logger.warning(f"{self.name}: dropping link command {cell.command}")
            self._record("cell_dropped", handle=handle.handle_id, reason="UnexpectedLinkCommand")
        return self.take_actions()

    def _handle_relay(self, handle: CircuitHandle, payload: bytes) -> None:
        buffer = payload
        for index, keys in enumerate(handle.hops, start=1):
            buffer = onion_unwrap_layer(buffer, keys, Direction.BACKWARD, self.provider)
            recognized, _ = recognize(buffer, keys, Direction.BACKWARD, self.provider)
            if recognized:
                try:
                    relay = RelayPayload.from_bytes(buffer)
                except CellError:
                    self.kill_circuit(handle, "ProtocolViolation")
                    return
                self._process(handle, index, relay)
                return
        self.kill_circuit(handle, "UnrecognizedCell")

    def _process(self, handle: CircuitHandle, hop_index: int, payload: RelayPayload) -> None:
        cmd = payload.relay_cmd
        if is_extension_command(cmd):
            self._dispatch_feature(handle, hop_index, payload)
        elif cmd == RelayCommand.EXTENDED:
            if handle.state == CircuitState.BUILDING and hop_index == len(handle.hops):
                self._advance_build(handle)
            else:
                self.kill_circuit(handle, "ProtocolViolation", relay_cmd=cmd)
        elif cmd == RelayCommand.DATA:
            handle.received_data.append((payload.stream_id, payload.data))
            self._record("data_received", handle=handle.handle_id, length=payload.length)
        elif cmd == RelayCommand.PLUGIN_ACK and payload.length >= _U32.size:
            pending = self._resolve_injection(handle, hop_index)
            (latency_us,) = _U32.unpack_from(payload.data)
            name = payload.data[_U32.size :].decode("utf-8", errors="replace")
            handle.injection_results.append(
                InjectionResult(hop_index, name or pending.plugin, latency_us=latency_us)
            )
            self._record("plugin_ack", handle=handle.handle_id, hop=hop_index, plugin=name)
        elif cmd == RelayCommand.PLUGIN_ERR and payload.length >= 1:
            pending = self._resolve_injection(handle, hop_index)
            detail = payload.data[1:].decode("utf-8", errors="replace")
            handle.injection_results.append(
                InjectionResult(hop_index, pending.plugin, code=payload.data[0], detail=detail)
            )
            self._record(
                "plugin_err", handle=handle.handle_id, hop=hop_index, code=payload.data[0]
            )
        elif cmd == RelayCommand.END:
            self._record("stream_end", handle=handle.handle_id, stream_id=payload.stream_id)
        else:
            self.kill_circuit(handle, "ProtocolViolation", relay_cmd=cmd)

    def _dispatch_feature(self, handle: CircuitHandle, hop_index: int, payload: RelayPayload):
        cmd = payload.relay_cmd
        attachment = self.registry.lookup(cmd, handle.key)
        if attachment is None:
            self.kill_circuit(handle, f"UnknownFeature({cmd})", relay_cmd=cmd)
            return
        context = self._context(handle, attachment, cell=payload)
        try:
            self.registry.run_event(
                attachment, EventKind.ON_FEATURE_CELL, (cmd, int(Direction.BACKWARD)), context
            )
        except Trap as trap:
            self.kill_circuit(handle, "PluginTrap", relay_cmd=cmd, trap=trap)
            return
        handle.received_features.append((hop_index, cmd, payload.data))
        self._record(
            "feature_received",
            handle=handle.handle_id,
            hop=hop_index,
            relay_cmd=cmd,
            plugin=attachment.name,
        )

    # ===== Закрытие =====

    def _close(self, handle: CircuitHandle, reason: str) -> None:
        if handle.state == CircuitState.CLOSED:
            return
        handle.state = CircuitState.CLOSED
        handle.close_reason = reason
        self.registry.teardown_circuit(handle.key)
        # После ON_CIRCUIT_TEARDOWN: контекст плагина ищется через _by_link
        self._by_link.pop(handle.key, None)
        self.handles.pop(handle.handle_id, None)
        self._record("circuit_closed", handle=handle.handle_id, reason=reason)
        logger.info(f"{self.name}: circuit {handle.handle_id} closed ({reason})")

    def close(self, handle: CircuitHandle) -> None:
        """DESTROY к первому шагу, ON_CIRCUIT_TEARDOWN локальных плагинов"""
        if handle.state == CircuitState.CLOSED:
            return
        self._send(handle, LinkCommand.DESTROY)
        self._close(handle, "Closed")

    def kill_circuit(
        self,
        handle: CircuitHandle,
        reason: str,
        relay_cmd: Optional[int] = None,
        trap: Optional[Trap] = None,
    ) -> None:
        """Та же политика, что у узлов: DESTROY, снятие плагинов и отчёт"""
        self._send(handle, LinkCommand.DESTROY)
        self._close(handle, reason)
        report = {
            "circ_id": handle.circ_id,
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
