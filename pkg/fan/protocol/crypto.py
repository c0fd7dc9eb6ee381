"""
Крипто-провайдеры для луковичного шифрования

TestProvider: детерминированный и побитово специфицированный (splitmix64 + FNV-1a),
НЕ криптостойкий: нужен для межреализационных тест-векторов.
StreamProvider: вариант на реальных примитивах библиотеки cryptography.
"""

import hashlib
import logging
import struct
from abc import ABC, abstractmethod
from typing import Dict

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from fan.exceptions import CryptoError

logger = logging.getLogger(__name__)

MASK64 = 0xFFFFFFFFFFFFFFFF
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
BLOCKS_PER_CELL = 64
KEY_SIZE = 32


def fnv1a64(data: bytes, state: int = FNV_OFFSET) -> int:
    """FNV-1a 64, побайтно; state позволяет продолжить хэш"""
    h = state
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def keystream_from_seed(seed: int, cell_counter: int, length: int) -> bytes:
    """Блок j = splitmix64(seed + cell_counter*64 + j), 8 байт little-endian"""
    base = cell_counter * BLOCKS_PER_CELL
    blocks = (length + 7) // 8
    stream = b"".join(
        struct.pack("<Q", splitmix64((seed + base + j) & MASK64)) for j in range(blocks)
    )
    return stream[:length]


def xor_bytes(left: bytes, right: bytes) -> bytes:
    """XOR двух буферов одинаковой длины"""
    size = len(left)
    return (int.from_bytes(left, "little") ^ int.from_bytes(right, "little")).to_bytes(
        size, "little"
    )


class CryptoProvider(ABC):
    """Абстрактный провайдер: поток, дайджест и запечатывание ключа для узла"""

    name = "abstract"

    @abstractmethod
    def stream_xor(self, key: bytes, direction: int, cell_counter: int, buffer: bytes) -> bytes:
        """Наложить/снять один слой; инволюция при одинаковых параметрах"""

    @abstractmethod
    def digest_update(self, state: int, data: bytes) -> int:
        """Продолжить бегущий дайджест"""

    @abstractmethod
    def seal(self, relay_id: bytes, plaintext: bytes) -> bytes:
        """Зашифровать ключ шага для узла relay_id"""

    @abstractmethod
    def open(self, relay_private: bytes, sealed: bytes) -> bytes:
        """Расшифровать запечатанный ключ закрытым материалом узла"""


class TestProvider(CryptoProvider):
    """
    Тестовый провайдер, побитово совпадающий с нормативным описанием

    seed потока = FNV1a64(key ‖ байт направления), seal = XOR с потоком от
    FNV1a64("seal" ‖ relay_id) на счётчике 0; open совпадает с seal, поэтому
    закрытый материал узла: его же relay_id.
    """

    __test__ = False  # не тестовый класс для pytest
    name = "test"

    def stream_seed(self, key: bytes, direction: int) -> int:
        return fnv1a64(bytes(key) + bytes([direction]))

    def stream_xor(self, key: bytes, direction: int, cell_counter: int, buffer: bytes) -> bytes:
        keystream = keystream_from_seed(
            self.stream_seed(key, direction), cell_counter, len(buffer)
        )
        return xor_bytes(bytes(buffer), keystream)

    def digest_update(self, state: int, data: bytes) -> int:
        return fnv1a64(data, state)

    def seal(self, relay_id: bytes, plaintext: bytes) -> bytes:
        seed = fnv1a64(b"seal" + bytes(relay_id))
        return xor_bytes(bytes(plaintext), keystream_from_seed(seed, 0, len(plaintext)))

    def open(self, relay_private: bytes, sealed: bytes) -> bytes:
        return self.seal(relay_private, sealed)


class StreamProvider(CryptoProvider):
    """
    Провайдер на ChaCha20 / BLAKE2b / X25519+ChaCha20-Poly1305

    directory: relay_id → открытый X25519-ключ узла (32 байта).
    """

    name = "stream"

    def __init__(self, directory: Dict[bytes, bytes]):
        self.directory = dict(directory)

    def stream_xor(self, key: bytes, direction: int, cell_counter: int, buffer: bytes) -> bytes:
        # Первые 4 байта nonce: счётчик блоков ChaCha20, дальше направление и номер ячейки
        nonce = struct.pack("<IBQ3x", 0, direction, cell_counter)
        encryptor = Cipher(algorithms.ChaCha20(bytes(key), nonce), mode=None).encryptor()
        return encryptor.update(bytes(buffer))

    def digest_update(self, state: int, data: bytes) -> int:
        h = hashlib.blake2b(state.to_bytes(8, "little") + bytes(data), digest_size=32).digest()
        return int.from_bytes(h[:8], "little")

    def seal(self, relay_id: bytes, plaintext: bytes) -> bytes:
        public_bytes = self.directory.get(bytes(relay_id))
        if public_bytes is None:
            raise CryptoError(f"no public key for relay {bytes(relay_id).hex()}")
        ephemeral = X25519PrivateKey.generate()
        shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(public_bytes))
        ephemeral_public = ephemeral.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        key = self._derive(shared, ephemeral_public)
        return ephemeral_public + ChaCha20Poly1305(key).encrypt(bytes(12), bytes(plaintext), None)

    def open(self, relay_private: bytes, sealed: bytes) -> bytes:
        if len(sealed) < 32 + 16:
            raise CryptoError("sealed blob too short")
        ephemeral_public = bytes(sealed[:32])
        private_key = X25519PrivateKey.from_private_bytes(bytes(relay_private))
        shared = private_key.exchange(X25519PublicKey.from_public_bytes(ephemeral_public))
        key = self._derive(shared, ephemeral_public)
        try:
            return ChaCha20Poly1305(key).decrypt(bytes(12), bytes(sealed[32:]), None)
        except InvalidTag:
            logger.warning("Sealed hop key failed authentication, rejecting CREATE")
            raise CryptoError("sealed hop key failed authentication")

    @staticmethod
    def _derive(shared: bytes, ephemeral_public: bytes) -> bytes:
        return HKDF(
            algorithm=hashes.SHA256(), length=KEY_SIZE, salt=ephemeral_public, info=b"fan-seal"
        ).derive(shared)

