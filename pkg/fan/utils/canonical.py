"""
Каноническая JSON-сериализация: ключи отсортированы, без лишних пробелов, UTF-8

Одна форма для манифестов, конфигураций сценариев, трасс, отчётов и файлов ключей.
"""

import json
from typing import Any

from fan.exceptions import CanonicalizationMismatch


def canonical_dumps(obj: Any) -> str:
    """Канонический JSON как строка; недопустимые типы: TypeError"""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    )


def canonical_bytes(obj: Any) -> bytes:
    """Канонический JSON в UTF-8: то, что подписывается и хэшируется"""
    return canonical_dumps(obj).encode("utf-8")


def load_canonical(raw: bytes) -> Any:
    """
    Разобрать JSON и потребовать, чтобы байты были уже в канонической форме

    Raises:
        CanonicalizationMismatch: файл не в канонической форме или не JSON
    """
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CanonicalizationMismatch(f"not valid JSON: {e}")
    if canonical_bytes(obj) != raw.rstrip(b"\n"):
        raise CanonicalizationMismatch("document is not in canonical form")
    return obj


def to_hex(data: bytes) -> str:
    return bytes(data).hex()


def from_hex(text: str, size: int = 0) -> bytes:
    """Разобрать hex-поле; size > 0 требует точной длины"""
    try:
        data = bytes.fromhex(text)
    except (TypeError, ValueError):
        raise ValueError(f"invalid hex field: {text!r}")
    if size and len(data) != size:
        raise ValueError(f"hex field must be {size} bytes, got {len(data)}")
    return data
