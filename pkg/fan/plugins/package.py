"""
Пакеты плагинов .fanp: сборка, подпись и проверка

Формат (little-endian): magic "FANP", версия формата, флаги, имя[32], версия плагина u16×3,
маска возможностей, функции, точки входа, размер памяти, код, key_id[32], подпись[64].
Подпись покрывает все байты перед key_id.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from fan.abi import ALL_CAPABILITIES, LIFECYCLE_EVENTS
from fan.exceptions import (
    BadMagic,
    MalformedPackage,
    ParseError,
    SignatureInvalid,
    UnknownCapability,
    UnknownSigner,
)
from fan.plugins.keys import KEY_ID_SIZE, SIGNATURE_SIZE, SigningKey, verify_signature
from fan.protocol.cells import is_extension_command
from fan.vm.interpreter import MAX_MEMORY, MIN_MEMORY
from fan.vm.isa import Program, parse_program
from fan.vm.verifier import verify

logger = logging.getLogger(__name__)

MAGIC = b"FANP"
FORMAT_VERSION = 1
FLAG_EPHEMERAL_ONLY = 0x0001
NAME_SIZE = 32
TRAILER_SIZE = KEY_ID_SIZE + SIGNATURE_SIZE

# Нормативная таблица хоста узла: 8 функций
RELAY_HOST_TABLE_SIZE = 8

_HEADER = struct.Struct("<4sHH32sHHHIB")
_ENTRY = struct.Struct("<HI")
_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")


@dataclass
class PluginPackage:
    """Разобранный и проверенный пакет плагина"""

    name: str
    version: Tuple[int, int, int]
    capability_mask: int
    feature_ids: List[int]
    entries: List[Tuple[int, int]]
    memory_size: int
    code: bytes
    flags: int = 0
    format_version: int = FORMAT_VERSION
    signer_key_id: bytes = b""
    signature: bytes = b""
    raw: bytes = field(default=b"", repr=False, compare=False)

    @property
    def program(self) -> Program:
        return parse_program(self.code)

    @property
    def ephemeral_only(self) -> bool:
        return bool(self.flags & FLAG_EPHEMERAL_ONLY)

    @property
    def version_text(self) -> str:
        return ".".join(str(part) for part in self.version)

    def entry_for(self, event: int) -> Optional[int]:
        for event_id, pc in self.entries:
            if event_id == event:
                return pc
        return None


def parse_version(text: str) -> Tuple[int, int, int]:
    """Разобрать "X.Y.Z" в тройку u16"""
    parts = text.strip().split(".")
    if len(parts) != 3:
        raise ValueError(f"version must be X.Y.Z: {text}")
    version = tuple(int(part) for part in parts)
    if any(not 0 <= part <= 0xFFFF for part in version):
        raise ValueError(f"version components must fit in u16: {text}")
    return version  # type: ignore[return-value]


def _check_layout(
    name_bytes: bytes,
    feature_ids: Sequence[int],
    entries: Sequence[Tuple[int, int]],
    memory_size: int,
    instruction_count: int,
) -> Optional[str]:
    """Структурные правила пакета; возвращает описание первой проблемы или None"""
    if len(name_bytes) > NAME_SIZE:
        return f"name longer than {NAME_SIZE} bytes"
    if not name_bytes.rstrip(b"\x00"):
        return "empty name"
    if len(feature_ids) > 0xFF or len(entries) > 0xFF:
        return "too many feature ids or entries"
    for fid in feature_ids:
        if not is_extension_command(fid):
            return f"feature id {fid} below 32"
    if len(set(feature_ids)) != len(feature_ids):
        return "duplicate feature ids"

    seen = set()
    for event_id, pc in entries:
        if event_id in seen:
            return f"duplicate entry for event {event_id}"
        seen.add(event_id)
        if pc >= instruction_count:
            return f"entry pc {pc} outside {instruction_count} instructions"

    if not feature_ids:
        for event_id, _ in entries:
            if event_id not in LIFECYCLE_EVENTS:
                return "plugin without feature ids may only declare lifecycle entries"

    if not MIN_MEMORY <= memory_size <= MAX_MEMORY:
        return f"memory_size {memory_size} outside {MIN_MEMORY}..{MAX_MEMORY}"
    return None


def build_package(
    name: str,
    version: Tuple[int, int, int],
    capability_mask: int,
    feature_ids: Sequence[int],
    entries: Sequence[Tuple[int, int]],
    memory_size: int,
    code: bytes,
    signing_key: SigningKey,
    flags: int = 0,
) -> bytes:
    """
    Собрать и подписать пакет

    Raises:
        ValueError: имя/код/поля не помещаются в формат или нарушают структурные правила
        ParseError: код не разбирается в инструкции
        VerifierRejected: код не проходит верификатор
    """
    program = parse_program(code)
    verify(program, RELAY_HOST_TABLE_SIZE).raise_for_violations()

    name_bytes = name.encode("utf-8")
    problem = _check_layout(name_bytes, feature_ids, entries, memory_size, len(program))
    if problem:
        raise ValueError(problem)
    if len(code) > 0xFFFFFFFF:
        raise ValueError("code too large")

    body = bytearray(
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            flags,
            name_bytes.ljust(NAME_SIZE, b"\x00"),
            *version,
            capability_mask,
            len(feature_ids),
        )
    )
    body += bytes(feature_ids)
    body += _U8.pack(len(entries))
    for event_id, pc in entries:
        body += _ENTRY.pack(int(event_id), pc)
    body += _U32.pack(memory_size)
    body += _U32.pack(len(code))
    body += code

    signature = signing_key.sign(bytes(body))
    logger.info(
        f"Packaged plugin {name} {'.'.join(map(str, version))}: "
        f"{len(body) + TRAILER_SIZE} bytes, signer {signing_key.key_id.hex()[:16]}"
    )
    return bytes(body) + signing_key.key_id + signature


class _Reader:
    """Последовательное чтение полей подписанного тела"""

    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise MalformedPackage(f"truncated at offset {self.offset} (need {size} bytes)")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def parse_and_verify(data: bytes, trusted_keys: Dict[bytes, bytes]) -> PluginPackage:
    """
    Разобрать и проверить пакет; порядок проверок нормативен:
    magic → подписант → подпись → структура → верификатор → возможности

    Raises:
        BadMagic, UnknownSigner, SignatureInvalid, MalformedPackage,
        VerifierRejected, UnknownCapability
    """
    data = bytes(data)

    # Проверяем magic и версию формата
    if len(data) < _HEADER.size + TRAILER_SIZE or data[:4] != MAGIC:
        raise BadMagic("not a FAN package")
    format_version = struct.unpack_from("<H", data, 4)[0]
    if format_version != FORMAT_VERSION:
        raise BadMagic(f"unsupported package format {format_version}")

    # Проверяем подписанта и подпись
    signed = data[:-TRAILER_SIZE]
    signer_key_id = data[-TRAILER_SIZE:-SIGNATURE_SIZE]
    signature = data[-SIGNATURE_SIZE:]
    public_key = trusted_keys.get(signer_key_id)
    if public_key is None:
        raise UnknownSigner(f"signer {signer_key_id.hex()[:16]} is not trusted")
    if not verify_signature(public_key, signature, signed):
        raise SignatureInvalid(f"signature by {signer_key_id.hex()[:16]} does not verify")

    # Разбираем подписанное тело
    reader = _Reader(signed, 0)
    _, _, flags, name_raw, major, minor, patch, caps, feature_count = reader.unpack(_HEADER)
    feature_ids = list(reader.take(feature_count))
    (entry_count,) = reader.unpack(_U8)
    entries = [reader.unpack(_ENTRY) for _ in range(entry_count)]
    (memory_size,) = reader.unpack(_U32)
    (code_len,) = reader.unpack(_U32)
    code = reader.take(code_len)
    if reader.offset != len(signed):
        raise MalformedPackage(f"{len(signed) - reader.offset} trailing bytes before signer")

    try:
        name = name_raw.rstrip(b"\x00").decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedPackage("name is not valid UTF-8")
    try:
        program = parse_program(code)
    except ParseError as e:
        raise MalformedPackage(f"code does not parse: {e}")
    problem = _check_layout(
        name_raw.rstrip(b"\x00"), feature_ids, entries, memory_size, len(program)
    )
    if problem:
        raise MalformedPackage(problem)

    verify(program, RELAY_HOST_TABLE_SIZE).raise_for_violations()

    if caps & ~ALL_CAPABILITIES:
        raise UnknownCapability(f"capability bits 0x{caps & ~ALL_CAPABILITIES:x} not in host ABI")

    return PluginPackage(
        name=name,
        version=(major, minor, patch),
        capability_mask=caps,
        feature_ids=feature_ids,
        entries=[(event_id, pc) for event_id, pc in entries],
        memory_size=memory_size,
        code=code,
        flags=flags,
        format_version=format_version,
        signer_key_id=signer_key_id,
        signature=signature,
        raw=data,
    )


def peek_header(data: bytes) -> Tuple[str, int]:
    """
    Имя и маска возможностей из заголовка без проверки подписи

    Используется репозиторием, который доверяет хэшу из targets, а не подписи пакета.

    Raises:
        BadMagic: не пакет FAN
    """
    data = bytes(data)
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise BadMagic("not a FAN package")
    fields = _HEADER.unpack_from(data)
    try:
        name = fields[3].rstrip(b"\x00").decode("utf-8")
    except UnicodeDecodeError:
        raise BadMagic("package name is not valid UTF-8")
    return name, fields[7]
