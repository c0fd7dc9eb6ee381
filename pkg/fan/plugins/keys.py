"""
Ключи подписи Ed25519 и хранилище доверия

key_id = SHA-256 от сырого 32-байтного открытого ключа.
"""

import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from fan.exceptions import FanError
from fan.utils.canonical import canonical_bytes, from_hex, load_canonical, to_hex

logger = logging.getLogger(__name__)

KEY_ID_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64

PathLike = Union[str, Path]


def key_id_for(public_key: bytes) -> bytes:
    return hashlib.sha256(bytes(public_key)).digest()


def verify_signature(public_key: bytes, signature: bytes, data: bytes) -> bool:
    """Проверить подпись Ed25519; любые ошибки формата: False"""
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), bytes(data))
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass
class SigningKey:
    """Пара ключей Ed25519 владельца пакетов или корневого ключа репозитория"""

    private_seed: bytes
    public_key: bytes
    key_id: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "SigningKey":
        if len(seed) != 32:
            raise ValueError(f"Ed25519 seed must be 32 bytes, got {len(seed)}")
        private = Ed25519PrivateKey.from_private_bytes(bytes(seed))
        public = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(private_seed=bytes(seed), public_key=public, key_id=key_id_for(public))

    @classmethod
    def generate(cls) -> "SigningKey":
        return cls.from_seed(os.urandom(32))

    @classmethod
    def derive(cls, seed: int, label: str) -> "SigningKey":
        """Детерминированный ключ для сценариев симуляции"""
        material = hashlib.sha256(f"fan-key:{seed}:{label}".encode("utf-8")).digest()
        return cls.from_seed(material)

    def sign(self, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_seed).sign(bytes(data))

    def to_json(self) -> dict:
        return {
            "key_id": to_hex(self.key_id),
            "private_seed": to_hex(self.private_seed),
            "public_key": to_hex(self.public_key),
        }

    def public_json(self) -> dict:
        return {"key_id": to_hex(self.key_id), "public_key": to_hex(self.public_key)}

    def save(self, path: PathLike) -> Path:
        """
        Записать ключ в path и открытую половину рядом в <name>.pub.json

        Returns:
            Путь к файлу открытого ключа
        """
        path = Path(path)
        path.write_bytes(canonical_bytes(self.to_json()) + b"\n")
        os.chmod(path, 0o600)
        public_path = path.with_name(f"{path.stem}.pub.json")
        public_path.write_bytes(canonical_bytes(self.public_json()) + b"\n")
        logger.info(f"Saved signing key {to_hex(self.key_id)[:16]} to {path}")
        return public_path

    @classmethod
    def load(cls, path: PathLike) -> "SigningKey":
        """
        Загрузить ключ из файла keygen

        Raises:
            ValueError: файл не содержит закрытого ключа или key_id не сходится
        """
        document = load_canonical(Path(path).read_bytes())
        if "private_seed" not in document:
            raise ValueError(f"{path} holds no private key")
        key = cls.from_seed(from_hex(document["private_seed"], 32))
        if document.get("key_id") and from_hex(document["key_id"]) != key.key_id:
            raise ValueError(f"{path}: key_id does not match the key material")
        return key


def load_public_key(path: PathLike) -> bytes:
    document = load_canonical(Path(path).read_bytes())
    return from_hex(document["public_key"], PUBLIC_KEY_SIZE)


def load_trust_dir(directory: PathLike) -> Dict[bytes, bytes]:
    """
    Хранилище доверия: каждый *.json в каталоге с полем public_key

    Returns:
        key_id → открытый ключ
    """
    trusted: Dict[bytes, bytes] = {}
    directory = Path(directory)
    if not directory.is_dir():
        logger.warning(f"Trust directory {directory} does not exist")
        return trusted

    for path in sorted(directory.glob("*.json")):
        try:
            public_key = load_public_key(path)
        except (FanError, KeyError, ValueError) as e:
            logger.warning(f"Skipping {path.name} in trust directory: {e}")
            continue
        trusted[key_id_for(public_key)] = public_key

    logger.info(f"Loaded {len(trusted)} trusted keys from {directory}")
    return trusted
