"""
Пакеты .fanp: сборка, порядок проверок и стойкость подписи к мутациям
"""

import random
import struct

import pytest

from fan.abi import EventKind
from fan.exceptions import (
    BadMagic,
    FanError,
    MalformedPackage,
    SignatureInvalid,
    UnknownCapability,
    UnknownSigner,
    VerifierRejected,
)
from fan.plugins.package import (
    FLAG_EPHEMERAL_ONLY,
    TRAILER_SIZE,
    parse_and_verify,
    parse_version,
    peek_header,
)
from fan.toolkit.assembler import assemble
from fan.toolkit.samples import PADDING_FEATURE
from tests.helpers import asm_package, resign

GOOD_CODE = "movi r0, 1\nexit"
FEATURE_OFFSET = 51


# ===== Сборка и разбор =====


def test_round_trip_preserves_fields(samples, padding_package, trusted):
    sample = samples["padding"]
    package = parse_and_verify(padding_package, trusted)
    assert package.name == "padding"
    assert package.version == sample.version
    assert package.version_text == "1.0.0"
    assert package.capability_mask == sample.capability_mask
    assert package.feature_ids == [PADDING_FEATURE]
    assert sorted(package.entries) == sorted(sample.entries)
    assert package.memory_size == 4096
    assert package.code == sample.code
    assert package.raw == padding_package
    assert not package.ephemeral_only


def test_package_size_formula(owner_key):
    entries = [(int(EventKind.ON_ATTACH), 0), (int(EventKind.ON_FEATURE_CELL), 1)]
    source = "movi r0, 0\nexit\nexit"
    data = asm_package(source, owner_key, feature_ids=[40, 41, 42], entries=entries)
    assert len(data) == 51 + 3 + 1 + 6 * 2 + 4 + 4 + len(assemble(source)) + 32 + 64


def test_entry_lookup_and_flags(owner_key, trusted):
    data = asm_package(GOOD_CODE, owner_key, flags=FLAG_EPHEMERAL_ONLY)
    package = parse_and_verify(data, trusted)
    assert package.ephemeral_only
    assert package.entry_for(EventKind.ON_FEATURE_CELL) == 0
    assert package.entry_for(EventKind.ON_TIMER) is None


def test_lifecycle_only_plugin_without_features(owner_key, trusted):
    data = asm_package(GOOD_CODE, owner_key, feature_ids=[], entries=[(0, 0), (4, 0)])
    assert parse_and_verify(data, trusted).feature_ids == []


def test_peek_header_ignores_signature(owner_key):
    data = asm_package(GOOD_CODE, owner_key, name="peeked", capability_mask=0x21)
    assert peek_header(data[:-1] + b"\x00") == ("peeked", 0x21)
    with pytest.raises(BadMagic):
        peek_header(b"ELF\x00" + data[4:])


@pytest.mark.parametrize(
    "overrides",
    [
        {"name": ""},
        {"name": "x" * 33},
        {"feature_ids": [31]},
        {"feature_ids": [40, 40]},
        {"feature_ids": [], "entries": [(2, 0)]},
        {"entries": [(2, 0), (2, 1)]},
        {"entries": [(2, 2)]},
        {"memory_size": 4095},
        {"memory_size": 2 * 1024 * 1024},
    ],
)
def test_build_rejects_bad_layout(owner_key, overrides):
    with pytest.raises(ValueError):
        asm_package(GOOD_CODE, owner_key, **overrides)


def test_build_rejects_unverifiable_code(owner_key):
    with pytest.raises(VerifierRejected):
        asm_package("movi r10, 1\nexit", owner_key)


@pytest.mark.parametrize(
    "text, expected", [("1.2.3", (1, 2, 3)), ("0.0.65535", (0, 0, 65535)), (" 4.5.6 ", (4, 5, 6))]
)
def test_parse_version(text, expected):
    assert parse_version(text) == expected


@pytest.mark.parametrize("text", ["1.2", "1.2.3.4", "1.2.70000", "a.b.c"])
def test_parse_version_rejects(text):
    with pytest.raises(ValueError):
        parse_version(text)


# ===== Порядок проверок =====


@pytest.mark.parametrize("data", [b"", b"FANP", b"\x00" * 200])
def test_short_or_foreign_data_is_bad_magic(data, trusted):
    with pytest.raises(BadMagic):
        parse_and_verify(data, trusted)


def test_unsupported_format_version(owner_key, trusted):
    data = resign(asm_package(GOOD_CODE, owner_key), owner_key, _set_format_version)
    with pytest.raises(BadMagic):
        parse_and_verify(data, trusted)


def _set_format_version(body: bytearray) -> bytearray:
    body[4:6] = struct.pack("<H", 2)
    return body


def test_magic_checked_before_signer(stranger_key, trusted):
    data = asm_package(GOOD_CODE, stranger_key)
    with pytest.raises(BadMagic):
        parse_and_verify(b"XANP" + data[4:], trusted)


def test_unknown_signer(stranger_key, trusted):
    with pytest.raises(UnknownSigner):
        parse_and_verify(asm_package(GOOD_CODE, stranger_key), trusted)


def test_signer_checked_before_signature(stranger_key, trusted):
    data = bytearray(asm_package(GOOD_CODE, stranger_key))
    data[-1] ^= 0xFF
    with pytest.raises(UnknownSigner):
        parse_and_verify(bytes(data), trusted)


def test_signature_by_other_key_is_invalid(owner_key, stranger_key, trusted):
    data = asm_package(GOOD_CODE, owner_key)
    forged = data[:-64] + stranger_key.sign(data[:-TRAILER_SIZE])
    with pytest.raises(SignatureInvalid):
        parse_and_verify(forged, trusted)


def test_signature_checked_before_structure(owner_key, trusted):
    data = asm_package(GOOD_CODE, owner_key)
    body = data[:-TRAILER_SIZE] + b"\x00"
    with pytest.raises(SignatureInvalid):
        parse_and_verify(body + data[-TRAILER_SIZE:], trusted)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda body: body + b"\x00",
        lambda body: body[:-1],
        lambda body: body[:FEATURE_OFFSET] + bytes([31]) + body[FEATURE_OFFSET + 1 :],
    ],
    ids=["trailing-byte", "truncated", "feature-below-32"],
)
def test_signed_structure_errors_are_malformed(owner_key, trusted, mutate):
    data = resign(asm_package(GOOD_CODE, owner_key), owner_key, mutate)
    with pytest.raises(MalformedPackage):
        parse_and_verify(data, trusted)


def _swap_code(source: str):
    good, bad = assemble(GOOD_CODE), assemble(source)

    def mutate(body: bytearray) -> bytearray:
        return bytearray(bytes(body).replace(good, bad))

    return mutate


def test_signed_code_still_goes_through_verifier(owner_key, trusted):
    data = resign(asm_package(GOOD_CODE, owner_key), owner_key, _swap_code("movi r10, 1\nexit"))
    with pytest.raises(VerifierRejected):
        parse_and_verify(data, trusted)


def test_unknown_capability_bit(owner_key, trusted):
    data = asm_package(GOOD_CODE, owner_key, capability_mask=0x1FF)
    with pytest.raises(UnknownCapability):
        parse_and_verify(data, trusted)


def test_verifier_checked_before_capabilities(owner_key, trusted):
    data = asm_package(GOOD_CODE, owner_key, capability_mask=0x1FF)
    data = resign(data, owner_key, _swap_code("call 9\nexit"))
    with pytest.raises(VerifierRejected):
        parse_and_verify(data, trusted)


# ===== Мутации =====


def test_single_bit_mutations_are_all_rejected(padding_package, trusted):
    rng = random.Random(1000)
    accepted = []
    for bit in rng.sample(range(len(padding_package) * 8), 1000):
        mutated = bytearray(padding_package)
        mutated[bit // 8] ^= 1 << (bit % 8)
        try:
            parse_and_verify(bytes(mutated), trusted)
        except FanError:
            continue
        accepted.append(bit)
    assert accepted == []
