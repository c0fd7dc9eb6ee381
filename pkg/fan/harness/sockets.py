"""
Сокетный транспорт: TCP-каналы между узлами с той же логикой, что и в симуляции

Канал начинается с обмена 16-байтными идентификаторами узлов, дальше идут
ячейки по 512 байт. Все вызовы узла выполняются в одном цикле asyncio.
"""

import asyncio
import logging
from functools import wraps
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from apscheduler.schedulers.asyncio import AsyncIOScheduler
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from fan.client.circuit import Client
from fan.exceptions import CellError, ConfigError, FanError
from fan.protocol.cells import CELL_SIZE, decode_cell, encode_cell
from fan.relay.actions import Actions, Record, ScheduleTimer, SendCell
from fan.relay.node import NODE_ID_SIZE, RelayNode, node_id_from_name, node_name
from fan.utils.canonical import canonical_bytes, canonical_dumps, from_hex, load_canonical, to_hex
from fan.utils.scheduler import schedule_after, scheduler

logger = logging.getLogger(__name__)

Endpoint = Union[RelayNode, Client]


def parse_address(text: str) -> Tuple[str, int]:
    """
    "host:port" → (host, port)

    Raises:
        ConfigError: адрес без порта или с неверным портом
    """
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address must be host:port, got {text}")
    try:
        number = int(port)
    except ValueError:
        raise ConfigError(f"invalid port in {text}")
    if not 0 < number < 65536:
        raise ConfigError(f"port out of range in {text}")
    return host.strip("[]"), number


def onion_private_key(signing_seed: bytes) -> bytes:
    """Закрытый X25519-ключ узла, выведенный из seed его ключа подписи"""
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=b"fan-onion-key"
    ).derive(bytes(signing_seed))


def onion_public_key(private_key: bytes) -> bytes:
    return (
        X25519PrivateKey.from_private_bytes(private_key)
        .public_key()
        .public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    )


def write_onion_entry(directory: Union[str, Path], name: str, private_key: bytes) -> Path:
    """Опубликовать открытый onion-ключ узла в каталоге: <name>.onion.json"""
    path = Path(directory) / f"{name}.onion.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {"node": name, "onion_public": to_hex(onion_public_key(private_key))}
    path.write_bytes(canonical_bytes(entry) + b"\n")
    logger.info(f"Published onion key of {name} to {path}")
    return path


def load_onion_directory(directory: Union[str, Path]) -> Dict[bytes, bytes]:
    """
    Каталог onion-ключей для StreamProvider

    Returns:
        node_id → открытый X25519-ключ
    """
    keys: Dict[bytes, bytes] = {}
    for path in sorted(Path(directory).glob("*.onion.json")):
        try:
            entry = load_canonical(path.read_bytes())
            keys[node_id_from_name(entry["node"])] = from_hex(entry["onion_public"], 32)
        except (FanError, KeyError, ValueError) as e:
            logger.warning(f"Skipping onion directory entry {path}: {e}")
    return keys


def handle_link_errors(func):
    """Декоратор обработчиков канала: обрыв закрывает канал, остальное уходит в лог"""

    @wraps(func)
    async def wrapper(self, *args, **kwargs):
        try:
            return await func(self, *args, **kwargs)
        except (asyncio.IncompleteReadError, ConnectionError) as e:
            # Сосед закрыл соединение: штатное завершение канала
            logger.info(f"{self.name}: link closed ({e.__class__.__name__})")
        except CellError as e:
            logger.warning(f"{self.name}: malformed cell on link, dropping connection: {e}")
        except Exception as e:
            logger.error(f"{self.name}: link handler crashed: {e}", exc_info=True)

    return wrapper


class LinkTransport:
    """
    Исполнитель действий узла поверх TCP

    Одна задача чтения на соединение; обработка ячеек синхронна и потому
    сериализована циклом событий.
    """

    def __init__(self, endpoint: Endpoint, timers: Optional[AsyncIOScheduler] = None):
        self.endpoint = endpoint
        self.timers = timers or scheduler
        self.node_id = endpoint.node_id
        self.name = endpoint.name
        self.links: Dict[bytes, asyncio.StreamWriter] = {}
        self._server: Optional[asyncio.AbstractServer] = None
        self._readers: List[asyncio.Task] = []

    # ===== Исполнение действий =====

    def execute(self, actions: Actions) -> None:
        for action in actions:
            if isinstance(action, SendCell):
                writer = self.links.get(action.peer)
                if writer is None:
                    logger.warning(f"{self.name}: no link to {node_name(action.peer)}, cell lost")
                    continue
                writer.write(encode_cell(action.cell))
            elif isinstance(action, ScheduleTimer):
                schedule_after(
                    action.delay_ms,
                    self._fire_timer,
                    (action.circuit, action.plugin, action.tag),
                    name=f"{action.plugin}:{action.tag}",
                    target=self.timers,
                )
            elif isinstance(action, Record):
                logger.info(f"{self.name}: {action.kind} {canonical_dumps(action.detail)}")

    async def _fire_timer(self, circuit, plugin: str, tag: int) -> None:
        self.execute(self.endpoint.fire_timer(circuit, plugin, tag))
        await self._drain()

    # ===== Каналы =====

    async def _hello(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> bytes:
        writer.write(self.node_id)
        await writer.drain()
        peer = await reader.readexactly(NODE_ID_SIZE)
        self.links[peer] = writer
        logger.info(f"{self.name}: link up with {node_name(peer)}")
        return peer

    @handle_link_errors
    async def _read_loop(self, peer: bytes, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                raw = await reader.readexactly(CELL_SIZE)
                self.execute(self.endpoint.handle_link_cell(peer, decode_cell(raw)))
                await self._drain()
        finally:
            writer = self.links.pop(peer, None)
            if writer is not None:
                writer.close()

    async def _drain(self) -> None:
        for writer in list(self.links.values()):
            try:
                await writer.drain()
            except ConnectionError:
                continue

    @handle_link_errors
    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = await self._hello(reader, writer)
        await self._read_loop(peer, reader)

    async def listen(self, host: str, port: int) -> int:
        """Начать приём каналов; возвращает фактический порт (для port=0)"""
        self._server = await asyncio.start_server(self._accept, host, port)
        port = self._server.sockets[0].getsockname()[1]
        logger.info(f"{self.name}: listening on {host}:{port}")
        return port

    async def connect(self, host: str, port: int) -> bytes:
        """
        Открыть канал к узлу и запустить чтение

        Returns:
            Идентификатор соседа из приветствия
        """
        reader, writer = await asyncio.open_connection(host, port)
        peer = await self._hello(reader, writer)
        self._readers.append(asyncio.create_task(self._read_loop(peer, reader)))
        return peer

    async def flush(self) -> None:
        await self._drain()

    async def serve_forever(self) -> None:
        if self._server is None:
            raise ConfigError("listen() must be called before serve_forever()")
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        for writer in self.links.values():
            writer.close()
        self.links.clear()
        for task in self._readers:
            task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
