"""
Детерминированная симуляция сети в виртуальном времени

Очередь событий упорядочена по (t_ms, порядковый номер вставки). Каждый узел получает
собственный поток случайных чисел из seed, поэтому одинаковый SimConfig даёт
побайтно одинаковую трассу.
"""

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple, Union

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from fan.abi import ALL_CAPABILITIES, parse_capabilities
from fan.client.circuit import CircuitHandle, Client
from fan.config import config
from fan.exceptions import ConfigError, FanError
from fan.plugins.keys import SigningKey
from fan.plugins.package import build_package
from fan.protocol.cells import LinkCommand
from fan.protocol.crypto import CryptoProvider, StreamProvider, TestProvider
from fan.relay.actions import Actions, Record, ScheduleTimer, SendCell
from fan.relay.node import RelayNode, RelayPolicy, node_id_from_name
from fan.toolkit.samples import build_sample_plugins
from fan.utils.canonical import canonical_dumps, from_hex, load_canonical

logger = logging.getLogger(__name__)

ACTIONS = frozenset(
    {
        "build_circuit",
        "send_data",
        "send_feature",
        "inject_plugin",
        "attach_local",
        "attach_global",
        "close",
        "expect",
    }
)
PROVIDERS = ("test", "stream")
DEFAULT_TAIL_MS = 1000

PackageRef = Union[str, Dict[str, Any]]

# Параметры действий, которые проверяются до запуска
_INT_PARAMS = {"send_feature": ("hop", "cmd"), "inject_plugin": ("hop",)}
_HEX_PARAMS = ("hex", "scratch")


# ===== Конфигурация сценария =====


@dataclass
class RelaySpec:
    name: str
    trust: List[str] = field(default_factory=list)
    policy: RelayPolicy = field(default_factory=RelayPolicy)
    plugins: List[PackageRef] = field(default_factory=list)


@dataclass
class ClientSpec:
    name: str
    trust: List[str] = field(default_factory=list)


@dataclass
class ScriptAction:
    at_ms: int
    action: str
    params: Dict[str, Any]
    index: int = 0


def _link_key(a: str, b: str) -> Tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class SimConfig:
    """Сценарий: узлы, каналы с задержками и скрипт действий во времени"""

    seed: int
    relays: List[RelaySpec]
    clients: List[ClientSpec]
    links: Dict[Tuple[str, str], int]
    actions: List[ScriptAction]
    provider: str = "test"
    duration_ms: Optional[int] = None
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def node_names(self) -> List[str]:
        return [relay.name for relay in self.relays] + [client.name for client in self.clients]

    @property
    def end_ms(self) -> int:
        if self.duration_ms is not None:
            return self.duration_ms
        last = max((action.at_ms for action in self.actions), default=0)
        return last + DEFAULT_TAIL_MS

    def latency(self, a: str, b: str) -> Optional[int]:
        return self.links.get(_link_key(a, b))

    @classmethod
    def from_json(cls, document: Dict[str, Any], base_dir: Optional[Path] = None) -> "SimConfig":
        """
        Разобрать и проверить сценарий до запуска каких-либо событий

        Raises:
            ConfigError: неизвестные узлы, каналы, действия или параметры
        """
        try:
            sim_config = cls._parse(document, base_dir or Path.cwd())
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed scenario: {e!r}")
        sim_config.validate()
        return sim_config

    @classmethod
    def _parse(cls, document: Dict[str, Any], base_dir: Path) -> "SimConfig":
        relays = []
        for item in document.get("relays", []):
            caps = item.get("max_capabilities")
            if isinstance(caps, str):
                caps = parse_capabilities(caps)
            policy = RelayPolicy(
                max_capabilities=ALL_CAPABILITIES if caps is None else int(caps),
                gas_per_event=int(item.get("gas_per_event", config.gas_per_event)),
                emit_budget=int(item.get("emit_budget", config.emit_budget)),
                max_timer_delay_ms=int(
                    item.get("max_timer_delay_ms", config.max_timer_delay_ms)
                ),
            )
            relays.append(
                RelaySpec(
                    name=item["name"],
                    trust=list(item.get("trust", [])),
                    policy=policy,
                    plugins=list(item.get("plugins", [])),
                )
            )
        clients = [
            ClientSpec(name=item["name"], trust=list(item.get("trust", [])))
            for item in document.get("clients", [])
        ]
        links = {
            _link_key(item["a"], item["b"]): int(item["latency_ms"])
            for item in document.get("links", [])
        }
        actions = []
        for index, item in enumerate(document.get("actions", [])):
            params = {key: value for key, value in item.items() if key not in ("at_ms", "action")}
            actions.append(ScriptAction(int(item["at_ms"]), item["action"], params, index))

        duration = document.get("duration_ms")
        return cls(
            seed=int(document["seed"]),
            relays=relays,
            clients=clients,
            links=links,
            actions=actions,
            provider=document.get("provider", "test"),
            duration_ms=None if duration is None else int(duration),
            base_dir=base_dir,
        )

    def validate(self) -> None:
        names = self.node_names
        if len(set(names)) != len(names):
            raise ConfigError("node names must be unique")
        for name in names:
            try:
                node_id_from_name(name)
            except ValueError as e:
                raise ConfigError(str(e))
        if not 0 <= self.seed <= 0xFFFFFFFFFFFFFFFF:
            raise ConfigError(f"seed must be a u64: {self.seed}")
        if self.provider not in PROVIDERS:
            raise ConfigError(f"unknown provider {self.provider}, expected one of {PROVIDERS}")
        for relay in self.relays:
            if relay.policy.max_timer_delay_ms < 1:
                raise ConfigError(f"relay {relay.name}: max_timer_delay_ms must be >= 1")

        known = set(names)
        for (a, b), latency in self.links.items():
            if a not in known or b not in known:
                raise ConfigError(f"link {a}-{b} references an undefined node")
            if latency < 0:
                raise ConfigError(f"link {a}-{b} has negative latency")

        relays = {relay.name for relay in self.relays}
        clients = {client.name for client in self.clients}
        circuits = {
            action.params.get("circuit")
            for action in self.actions
            if action.action == "build_circuit"
        }
        for action in self.actions:
            where = f"action #{action.index} ({action.action})"
            if action.action not in ACTIONS:
                raise ConfigError(f"{where}: unknown action")
            if action.at_ms < 0:
                raise ConfigError(f"{where}: at_ms must be >= 0")
            params = action.params
            if action.action == "build_circuit":
                if params.get("client") not in clients:
                    raise ConfigError(f"{where}: unknown client {params.get('client')}")
                for hop in params.get("route", []):
                    if hop not in relays:
                        raise ConfigError(f"{where}: route references unknown relay {hop}")
            elif action.action == "attach_global":
                if params.get("node") not in relays:
                    raise ConfigError(f"{where}: unknown relay {params.get('node')}")
            elif action.action != "expect" and params.get("circuit") not in circuits:
                raise ConfigError(f"{where}: circuit {params.get('circuit')} is never built")
            elif action.action == "expect":
                node = params.get("node")
                if node is not None and node not in known:
                    raise ConfigError(f"{where}: unknown node {node}")
            _check_params(where, action.action, params)


def _check_params(where: str, action: str, params: Dict[str, Any]) -> None:
    for key in _INT_PARAMS.get(action, ()):
        value = params.get(key)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: {key} must be an integer, got {value!r}")
    for key in _HEX_PARAMS:
        if key in params:
            try:
                from_hex(params[key])
            except ValueError as e:
                raise ConfigError(f"{where}: {e}")


def load_sim_config(path: Union[str, Path]) -> SimConfig:
    """
    Прочитать сценарий из канонического JSON

    Raises:
        ConfigError: файл не канонический или сценарий неверен
    """
    path = Path(path)
    try:
        document = load_canonical(path.read_bytes())
    except FanError as e:
        raise ConfigError(f"{path}: {e}")
    return SimConfig.from_json(document, base_dir=path.parent)


# ===== Трасса =====


@dataclass
class TraceRecord:
    t_ms: int
    seq: int
    node: str
    kind: str
    detail: Dict[str, Any]

    def to_json(self) -> dict:
        return {
            "detail": self.detail,
            "kind": self.kind,
            "node": self.node,
            "seq": self.seq,
            "t_ms": self.t_ms,
        }

    def matches(self, kind: str, node: Optional[str], match: Dict[str, Any]) -> bool:
        if self.kind != kind or (node is not None and self.node != node):
            return False
        return all(self.detail.get(key) == value for key, value in match.items())


@dataclass
class EventTrace:
    """Упорядоченные записи симуляции; сравниваются по строкам JSON"""

    records: List[TraceRecord] = field(default_factory=list)

    def add(self, t_ms: int, node: str, kind: str, detail: Dict[str, Any]) -> TraceRecord:
        record = TraceRecord(t_ms, len(self.records), node, kind, detail)
        self.records.append(record)
        return record

    def select(
        self,
        kind: str,
        node: Optional[str] = None,
        match: Optional[Dict[str, Any]] = None,
        until_ms: Optional[int] = None,
    ) -> List[TraceRecord]:
        return [
            record
            for record in self.records
            if record.matches(kind, node, match or {})
            and (until_ms is None or record.t_ms <= until_ms)
        ]

    def count(self, kind: str, node: Optional[str] = None, **match) -> int:
        return len(self.select(kind, node, match))

    @property
    def failed_expectations(self) -> int:
        return self.count("expect_failed") + self.count("action_failed")

    @property
    def passed(self) -> bool:
        return self.failed_expectations == 0

    def to_lines(self) -> List[str]:
        return [canonical_dumps(record.to_json()) for record in self.records]

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.to_lines()), encoding="utf-8")


# ===== Симулятор =====


def node_rng(seed: int, node_id: bytes) -> random.Random:
    """Независимый поток случайных чисел узла из seed сценария"""
    material = hashlib.sha256(seed.to_bytes(8, "little") + node_id).digest()
    return random.Random(int.from_bytes(material[:8], "little"))


@dataclass
class _CircuitRun:
    client: str
    handle: CircuitHandle
    sent: List[bytes] = field(default_factory=list)


class Simulator:
    """Исполнитель SimConfig: узлы без ввода-вывода, каналы моделируются событиями очереди"""

    def __init__(self, sim_config: SimConfig):
        self.config = sim_config
        self.now = 0
        self.trace = EventTrace()
        self._queue: List[Tuple[int, int, Callable[[], None]]] = []
        self._sequence = 0
        self._cell_counter = 0
        self._samples = None
        self._signers: Dict[str, SigningKey] = {}

        self.ids: Dict[str, bytes] = {
            name: node_id_from_name(name) for name in sim_config.node_names
        }
        self.names: Dict[bytes, str] = {node_id: name for name, node_id in self.ids.items()}
        self.provider, private_keys = self._build_provider()

        self.relays: Dict[str, RelayNode] = {}
        for spec in sim_config.relays:
            node_id = self.ids[spec.name]
            self.relays[spec.name] = RelayNode(
                node_id=node_id,
                private_key=private_keys[node_id],
                provider=self.provider,
                trusted_keys=self._trust(spec.trust),
                policy=spec.policy,
                clock=self._clock,
                rng=node_rng(sim_config.seed, node_id),
                known_peers=self._peers(spec.name),
            )

        relay_ids = {self.ids[spec.name] for spec in sim_config.relays}
        self.clients: Dict[str, Client] = {}
        for spec in sim_config.clients:
            node_id = self.ids[spec.name]
            self.clients[spec.name] = Client(
                node_id=node_id,
                provider=self.provider,
                directory=relay_ids,
                trusted_keys=self._trust(spec.trust),
                clock=self._clock,
                rng=node_rng(sim_config.seed, node_id),
                build_timeout_ms=config.build_timeout_ms,
                inject_timeout_ms=config.inject_timeout_ms,
            )
        self.circuits: Dict[str, _CircuitRun] = {}

    # ===== Окружение =====

    def _clock(self) -> int:
        return self.now

    def _build_provider(self) -> Tuple[CryptoProvider, Dict[bytes, bytes]]:
        if self.config.provider == "test":
            # У тестового провайдера закрытый материал узла: его идентификатор
            return TestProvider(), {node_id: node_id for node_id in self.ids.values()}

        private_keys: Dict[bytes, bytes] = {}
        directory: Dict[bytes, bytes] = {}
        for node_id in self.ids.values():
            material = hashlib.sha256(
                b"fan-x25519" + self.config.seed.to_bytes(8, "little") + node_id
            ).digest()
            private = X25519PrivateKey.from_private_bytes(material)
            private_keys[node_id] = material
            directory[node_id] = private.public_key().public_bytes(
                serialization.Encoding.Raw, serialization.PublicFormat.Raw
            )
        return StreamProvider(directory), private_keys

    def _peers(self, name: str) -> set:
        peers = set()
        for a, b in self.config.links:
            if a == name:
                peers.add(self.ids[b])
            elif b == name:
                peers.add(self.ids[a])
        return peers

    def signer(self, label: str) -> SigningKey:
        if label not in self._signers:
            self._signers[label] = SigningKey.derive(self.config.seed, label)
        return self._signers[label]

    def _trust(self, labels: Iterable[str]) -> Dict[bytes, bytes]:
        keys = (self.signer(label) for label in labels)
        return {key.key_id: key.public_key for key in keys}

    def package_bytes(self, ref: PackageRef) -> bytes:
        """
        Пакет по ссылке сценария: путь к .fanp или {"sample", "signer"}

        Raises:
            ConfigError: неизвестный образец или файл не читается
        """
        if isinstance(ref, str):
            path = Path(ref)
            if not path.is_absolute():
                path = self.config.base_dir / path
            try:
                return path.read_bytes()
            except OSError as e:
                raise ConfigError(f"cannot read package {path}: {e}")

        if self._samples is None:
            self._samples = build_sample_plugins()
        sample = self._samples.get(ref.get("sample"))
        if sample is None:
            raise ConfigError(f"unknown sample plugin {ref.get('sample')}")
        return build_package(
            name=ref.get("name", sample.name),
            version=tuple(ref.get("version", sample.version)),
            capability_mask=sample.capability_mask,
            feature_ids=sample.feature_ids,
            entries=sample.entries,
            memory_size=sample.memory_size,
            code=sample.code,
            signing_key=self.signer(ref.get("signer", "owner")),
        )

    # ===== Очередь событий =====

    def schedule(self, at_ms: int, callback: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (at_ms, self._sequence, callback))
        self._sequence += 1

    def record(self, node: str, kind: str, **detail) -> None:
        self.trace.add(self.now, node, kind, detail)

    def _execute(self, node: str, actions: Actions) -> None:
        for action in actions:
            if isinstance(action, SendCell):
                self._send_cell(node, action)
            elif isinstance(action, ScheduleTimer):
                self.schedule(
                    self.now + action.delay_ms,
                    lambda a=action: self._fire_timer(node, a.circuit, a.plugin, a.tag),
                )
            elif isinstance(action, Record):
                self.trace.add(self.now, node, action.kind, dict(action.detail))

    def _send_cell(self, node: str, action: SendCell) -> None:
        peer = self.names.get(action.peer)
        latency = self.config.latency(node, peer) if peer else None
        cell = action.cell
        if latency is None:
            self.record(node, "link_missing", to=peer or action.peer.hex(), circ_id=cell.circ_id)
            return

        self._cell_counter += 1
        number = self._cell_counter
        command = _command_name(cell.command)
        self.record(node, "cell_sent", cell=number, circ_id=cell.circ_id, cmd=command, to=peer)

        def deliver() -> None:
            received = {"cell": number, "circ_id": cell.circ_id, "cmd": command, "from": node}
            self.trace.add(self.now, peer, "cell_received", received)
            self._execute(peer, self._endpoint(peer).handle_link_cell(self.ids[node], cell))

        self.schedule(self.now + latency, deliver)

    def _endpoint(self, name: str) -> Union[RelayNode, Client]:
        return self.relays.get(name) or self.clients[name]

    def _fire_timer(self, node: str, circuit, plugin: str, tag: int) -> None:
        self._execute(node, self._endpoint(node).fire_timer(circuit, plugin, tag))

    # ===== Действия сценария =====

    def _run_action(self, action: ScriptAction) -> None:
        handler = getattr(self, f"_action_{action.action}")
        try:
            handler(action.params)
        except FanError as e:
            logger.warning(f"Scenario action #{action.index} {action.action} failed: {e}")
            self.record("harness", "action_failed", action=action.action, error=str(e))

    def _circuit(self, params: Dict[str, Any]) -> Tuple[Client, _CircuitRun]:
        run = self.circuits.get(params["circuit"])
        if run is None:
            raise ConfigError(f"circuit {params['circuit']} was not built")
        return self.clients[run.client], run

    def _action_build_circuit(self, params: Dict[str, Any]) -> None:
        client = self.clients[params["client"]]
        handle = client.build_circuit([self.ids[hop] for hop in params["route"]])
        self.circuits[params["circuit"]] = _CircuitRun(params["client"], handle)
        self._execute(params["client"], client.take_actions())
        self.schedule(
            handle.build_deadline_ms,
            lambda: self._execute(params["client"], client.expire_build(handle)),
        )

    def _action_send_data(self, params: Dict[str, Any]) -> None:
        client, run = self._circuit(params)
        data = params.get("data", "").encode("utf-8")
        client.send_data(run.handle, data, stream_id=int(params.get("stream_id", 1)))
        run.sent.append(data)
        self._execute(run.client, client.take_actions())

    def _action_send_feature(self, params: Dict[str, Any]) -> None:
        client, run = self._circuit(params)
        if "hex" in params:
            data = from_hex(params["hex"])
        else:
            data = params.get("data", "").encode("utf-8")
        client.send_feature(run.handle, int(params["hop"]), int(params["cmd"]), data)
        self._execute(run.client, client.take_actions())

    def _action_inject_plugin(self, params: Dict[str, Any]) -> None:
        client, run = self._circuit(params)
        data = self.package_bytes(params["package"])
        pending = client.inject_plugin(run.handle, int(params["hop"]), data)
        self._execute(run.client, client.take_actions())
        self.schedule(
            pending.deadline_ms,
            lambda: self._execute(run.client, client.expire_injection(run.handle)),
        )

    def _action_attach_local(self, params: Dict[str, Any]) -> None:
        client, run = self._circuit(params)
        scratch = from_hex(params.get("scratch", ""))
        client.attach_local(run.handle, self.package_bytes(params["package"]), scratch)
        self._execute(run.client, client.take_actions())

    def _action_attach_global(self, params: Dict[str, Any]) -> None:
        self._attach_global(params["node"], params["package"], params.get("scratch", ""))

    def _attach_global(self, node: str, ref: PackageRef, scratch: str = "") -> None:
        relay = self.relays[node]
        attachment = relay.attach_global(self.package_bytes(ref), from_hex(scratch))
        self.record(node, "plugin_attached_global", plugin=attachment.name)

    def _action_close(self, params: Dict[str, Any]) -> None:
        client, run = self._circuit(params)
        client.close(run.handle)
        self._execute(run.client, client.take_actions())

    def _action_expect(self, params: Dict[str, Any]) -> None:
        ok, description = self._evaluate(params)
        kind = "expect_passed" if ok else "expect_failed"
        self.record("harness", kind, check=description)
        if not ok:
            logger.warning(f"Expectation failed at {self.now} ms: {description}")

    def _evaluate(self, params: Dict[str, Any]) -> Tuple[bool, str]:
        if "attachments" in params:
            node = params["node"]
            endpoint = self._endpoint(node)
            count = len(endpoint.registry)
            expected = int(params["attachments"])
            return count == expected, f"{node} attachments {count} == {expected}"

        if "echoed" in params:
            run = self.circuits.get(params["echoed"])
            if run is None:
                return False, f"circuit {params['echoed']} was not built"
            received = [data for _, data in run.handle.received_data]
            return received == run.sent, f"{params['echoed']} echoed {len(run.sent)} payloads"

        if "state" in params:
            run = self.circuits.get(params["circuit"])
            state = run.handle.state.value if run else "missing"
            return state == params["state"], f"{params['circuit']} state {state}"

        kind = params["record"]
        until = int(params.get("by_ms", self.now))
        count = len(self.trace.select(kind, params.get("node"), params.get("match"), until))
        minimum = int(params.get("min", 1))
        maximum = params.get("max")
        ok = count >= minimum and (maximum is None or count <= int(maximum))
        bounds = f">= {minimum}" + ("" if maximum is None else f", <= {maximum}")
        where = f" at {params['node']}" if params.get("node") else ""
        return ok, f"{kind}{where} count {count} {bounds} by {until} ms"

    # ===== Запуск =====

    def run(self) -> EventTrace:
        for spec in self.config.relays:
            for ref in spec.plugins:
                try:
                    self._attach_global(spec.name, ref)
                except FanError as e:
                    self.record(spec.name, "action_failed", action="plugins", error=str(e))

        for action in self.config.actions:
            self.schedule(action.at_ms, lambda a=action: self._run_action(a))

        end = self.config.end_ms
        while self._queue and self._queue[0][0] <= end:
            at_ms, _, callback = heapq.heappop(self._queue)
            self.now = at_ms
            callback()

        logger.info(
            f"Simulation finished at {self.now} ms: {len(self.trace.records)} records, "
            f"{self.trace.failed_expectations} failed expectations"
        )
        return self.trace


def _command_name(command: int) -> str:
    try:
        return LinkCommand(command).name
    except ValueError:
        return str(command)


def run_sim(sim_config: SimConfig) -> EventTrace:
    """Выполнить сценарий в виртуальном времени и вернуть трассу"""
    return Simulator(sim_config).run()
