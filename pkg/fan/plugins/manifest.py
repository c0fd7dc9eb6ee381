"""
Манифесты репозитория плагинов: root (доверенные ключи и порог) и подписанный targets

Root: якорь доверия, доставляется вне канала и не подписывается.
Targets подписываются k из n ключами root поверх канонической сериализации.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from fan.abi import describe_capabilities
from fan.exceptions import (
    CanonicalizationMismatch,
    CapabilityEscalation,
    Expired,
    HashMismatch,
    InsufficientSignatures,
    UnknownKeyId,
    UnknownTarget,
)
from fan.plugins.keys import SigningKey, key_id_for, verify_signature
from fan.plugins.package import peek_header
from fan.utils.canonical import canonical_bytes, from_hex, load_canonical, to_hex

logger = logging.getLogger(__name__)

HASH_ALG = "sha256"
ROOT_FILE = "root.json"
TARGETS_FILE = "targets.json"
PACKAGES_DIR = "packages"

PathLike = Union[str, Path]


def format_timestamp(moment: datetime) -> str:
    return moment.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 в UTC; суффикс Z допускается"""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    moment = datetime.fromisoformat(text)
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment.astimezone(timezone.utc)


@dataclass
class RootMetadata:
    version: int
    expires: datetime
    keys: Dict[bytes, bytes]
    threshold: int

    def to_json(self) -> dict:
        return {
            "expires": format_timestamp(self.expires),
            "keys": {to_hex(key_id): to_hex(public) for key_id, public in self.keys.items()},
            "threshold": self.threshold,
            "version": self.version,
        }

    @classmethod
    def from_json(cls, document: dict) -> "RootMetadata":
        return cls(
            version=int(document["version"]),
            expires=parse_timestamp(document["expires"]),
            keys={
                from_hex(key_id, 32): from_hex(public, 32)
                for key_id, public in document["keys"].items()
            },
            threshold=int(document["threshold"]),
        )


@dataclass
class TargetEntry:
    length: int
    hash: bytes
    max_capabilities: int

    def to_json(self) -> dict:
        return {
            "hash": to_hex(self.hash),
            "length": self.length,
            "max_capabilities": self.max_capabilities,
        }

    @classmethod
    def from_json(cls, document: dict) -> "TargetEntry":
        return cls(
            length=int(document["length"]),
            hash=from_hex(document["hash"], 32),
            max_capabilities=int(document["max_capabilities"]),
        )


@dataclass
class TargetsMetadata:
    version: int
    expires: datetime
    targets: Dict[str, TargetEntry] = field(default_factory=dict)
    hash_alg: str = HASH_ALG

    def to_json(self) -> dict:
        return {
            "expires": format_timestamp(self.expires),
            "hash_alg": self.hash_alg,
            "targets": {name: entry.to_json() for name, entry in self.targets.items()},
            "version": self.version,
        }

    @classmethod
    def from_json(cls, document: dict) -> "TargetsMetadata":
        return cls(
            version=int(document["version"]),
            expires=parse_timestamp(document["expires"]),
            targets={
                name: TargetEntry.from_json(entry) for name, entry in document["targets"].items()
            },
            hash_alg=document.get("hash_alg", HASH_ALG),
        )

    def signed_bytes(self) -> bytes:
        return canonical_bytes(self.to_json())


@dataclass
class RepoManifest:
    """Root + targets + подписи; signed_raw: байты targets в том виде, в каком их загрузили"""

    root: RootMetadata
    targets: TargetsMetadata
    signatures: List[Tuple[bytes, bytes]] = field(default_factory=list)
    signed_raw: Optional[bytes] = None

    def targets_json(self) -> dict:
        return {
            "signatures": [
                {"key_id": to_hex(key_id), "signature": to_hex(signature)}
                for key_id, signature in self.signatures
            ],
            "signed": self.targets.to_json(),
        }

    def sign(self, key: SigningKey) -> None:
        """Добавить подпись ключом; повторная подпись тем же ключом заменяется"""
        signature = key.sign(self.targets.signed_bytes())
        self.signatures = [(kid, sig) for kid, sig in self.signatures if kid != key.key_id]
        self.signatures.append((key.key_id, signature))
        self.signed_raw = None


def verify_manifest(manifest: RepoManifest, now: Optional[datetime] = None) -> None:
    """
    Проверить манифест на момент now

    Raises:
        CanonicalizationMismatch: targets загружены не в канонической форме
        Expired: root или targets истекли (expires <= now)
        UnknownKeyId: подпись ключом, которого нет в root
        InsufficientSignatures: меньше threshold различных валидных подписей
    """
    now = now or datetime.now(timezone.utc)
    signed = manifest.targets.signed_bytes()

    # Проверяем, что подписанные байты совпадают с канонической формой
    if manifest.signed_raw is not None and manifest.signed_raw != signed:
        raise CanonicalizationMismatch("targets are not in canonical form")

    # Проверяем срок действия обеих ролей
    if manifest.root.expires <= now:
        raise Expired(f"root expired at {format_timestamp(manifest.root.expires)}")
    if manifest.targets.expires <= now:
        raise Expired(f"targets expired at {format_timestamp(manifest.targets.expires)}")

    root = manifest.root
    for key_id, _ in manifest.signatures:
        if key_id not in root.keys:
            raise UnknownKeyId(f"signature by key {to_hex(key_id)[:16]} not listed in root")

    if not 1 <= root.threshold <= len(root.keys):
        raise InsufficientSignatures(
            f"root threshold {root.threshold} is not satisfiable with {len(root.keys)} keys"
        )

    # Считаем только различные ключи с валидной подписью
    valid = set()
    for key_id, signature in manifest.signatures:
        if key_id in valid:
            continue
        if verify_signature(root.keys[key_id], signature, signed):
            valid.add(key_id)
        else:
            logger.warning(f"Invalid targets signature by key {to_hex(key_id)[:16]}")

    if len(valid) < root.threshold:
        raise InsufficientSignatures(
            f"{len(valid)} distinct valid signatures, threshold is {root.threshold}"
        )
    logger.debug(f"Manifest verified with {len(valid)}/{root.threshold} signatures")


def resolve_plugin(manifest: RepoManifest, name: str, data: bytes) -> TargetEntry:
    """
    Сверить байты пакета с записью targets

    Raises:
        UnknownTarget: имени нет в targets
        HashMismatch: длина (проверяется первой) или хэш не совпадают
        CapabilityEscalation: пакет просит больше, чем max_capabilities
    """
    entry = manifest.targets.targets.get(name)
    if entry is None:
        raise UnknownTarget(f"no target named {name}")
    if len(data) != entry.length:
        raise HashMismatch(f"length {len(data)} differs from target length {entry.length}")
    if hashlib.sha256(bytes(data)).digest() != entry.hash:
        raise HashMismatch(f"{HASH_ALG} of {name} differs from target hash")

    _, mask = peek_header(data)
    excess = mask & ~entry.max_capabilities
    if excess:
        raise CapabilityEscalation(
            f"{name} requests {describe_capabilities(excess)} beyond max_capabilities"
        )
    return entry


class Repository:
    """Каталог репозитория: root.json, targets.json и packages/<name>.fanp"""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    @property
    def root_path(self) -> Path:
        return self.directory / ROOT_FILE

    @property
    def targets_path(self) -> Path:
        return self.directory / TARGETS_FILE

    def package_path(self, name: str) -> Path:
        return self.directory / PACKAGES_DIR / f"{name}.fanp"

    @classmethod
    def init(
        cls,
        directory: PathLike,
        root_public_keys: Sequence[bytes],
        threshold: int,
        expires_days: int = 365,
        now: Optional[datetime] = None,
    ) -> "Repository":
        """
        Создать пустой репозиторий

        Raises:
            ValueError: порог вне 1..число ключей
        """
        keys = {key_id_for(public): bytes(public) for public in root_public_keys}
        if not 1 <= threshold <= len(keys):
            raise ValueError(f"threshold must be in 1..{len(keys)}, got {threshold}")

        now = now or datetime.now(timezone.utc)
        expires = (now + timedelta(days=expires_days)).replace(microsecond=0)
        repo = cls(directory)
        (repo.directory / PACKAGES_DIR).mkdir(parents=True, exist_ok=True)
        manifest = RepoManifest(
            root=RootMetadata(version=1, expires=expires, keys=keys, threshold=threshold),
            targets=TargetsMetadata(version=1, expires=expires),
        )
        repo.save(manifest)
        logger.info(f"Initialized repository {repo.directory} ({threshold}-of-{len(keys)})")
        return repo

    def load(self) -> RepoManifest:
        """
        Загрузить манифест с диска

        Raises:
            CanonicalizationMismatch: файлы не в канонической форме
        """
        root = RootMetadata.from_json(load_canonical(self.root_path.read_bytes()))
        document = load_canonical(self.targets_path.read_bytes())
        signatures = [
            (from_hex(item["key_id"], 32), from_hex(item["signature"], 64))
            for item in document["signatures"]
        ]
        return RepoManifest(
            root=root,
            targets=TargetsMetadata.from_json(document["signed"]),
            signatures=signatures,
            signed_raw=canonical_bytes(document["signed"]),
        )

    def save(self, manifest: RepoManifest) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        self.root_path.write_bytes(canonical_bytes(manifest.root.to_json()) + b"\n")
        self.targets_path.write_bytes(canonical_bytes(manifest.targets_json()) + b"\n")

    def _bump(self, manifest: RepoManifest) -> None:
        # Любое изменение targets обнуляет подписи
        manifest.targets.version += 1
        manifest.signatures = []
        manifest.signed_raw = None

    def add(self, data: bytes, max_capabilities: Optional[int] = None) -> str:
        """
        Добавить пакет в targets (подписи сбрасываются, версия растёт)

        Returns:
            Имя цели
        """
        name, mask = peek_header(data)
        manifest = self.load()
        manifest.targets.targets[name] = TargetEntry(
            length=len(data),
            hash=hashlib.sha256(bytes(data)).digest(),
            max_capabilities=mask if max_capabilities is None else max_capabilities,
        )
        self._bump(manifest)
        path = self.package_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(bytes(data))
        self.save(manifest)
        logger.info(f"Added target {name} ({len(data)} bytes) to {self.directory}")
        return name

    def remove(self, name: str) -> None:
        """
        Удалить цель из targets

        Raises:
            UnknownTarget: цели нет
        """
        manifest = self.load()
        if name not in manifest.targets.targets:
            raise UnknownTarget(f"no target named {name}")
        del manifest.targets.targets[name]
        self._bump(manifest)
        self.package_path(name).unlink(missing_ok=True)
        self.save(manifest)
        logger.info(f"Removed target {name} from {self.directory}")

    def sign(self, key: SigningKey) -> int:
        """Подписать текущие targets; возвращает число подписей"""
        manifest = self.load()
        manifest.sign(key)
        self.save(manifest)
        logger.info(f"Signed targets v{manifest.targets.version} with {to_hex(key.key_id)[:16]}")
        return len(manifest.signatures)

    def fetch(self, name: str, now: Optional[datetime] = None) -> bytes:
        """
        Проверить манифест и вернуть байты пакета, сверенные с targets

        Raises:
            ManifestError: любой отказ verify_manifest/resolve_plugin
        """
        manifest = self.load()
        verify_manifest(manifest, now)
        if name not in manifest.targets.targets:
            raise UnknownTarget(f"no target named {name}")
        data = self.package_path(name).read_bytes()
        resolve_plugin(manifest, name, data)
        return data
