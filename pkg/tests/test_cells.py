"""
Формат link-ячеек и relay-нагрузки
"""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fan.exceptions import CellError
from fan.protocol.cells import (
    CELL_SIZE,
    PAYLOAD_SIZE,
    RELAY_DATA_SIZE,
    LinkCell,
    LinkCommand,
    RelayPayload,
    decode_cell,
    encode_cell,
    feature_id,
    is_extension_command,
)


def test_encode_relay_cell_layout():
    raw = encode_cell(LinkCell(circ_id=1, command=LinkCommand.RELAY, payload=bytes(PAYLOAD_SIZE)))
    assert len(raw) == CELL_SIZE
    assert raw[:5] == bytes([0x01, 0x00, 0x00, 0x00, 0x03])
    assert raw[5:] == bytes(PAYLOAD_SIZE)


def test_decode_restores_encoded_cell():
    cell = LinkCell(circ_id=0x80000002, command=LinkCommand.DESTROY, payload=b"\x07" * PAYLOAD_SIZE)
    assert decode_cell(encode_cell(cell)) == cell


@given(
    circ_id=st.integers(min_value=0, max_value=0xFFFFFFFF),
    command=st.integers(min_value=0, max_value=0xFF),
    payload=st.binary(min_size=PAYLOAD_SIZE, max_size=PAYLOAD_SIZE),
)
def test_decode_inverts_encode(circ_id, command, payload):
    cell = LinkCell(circ_id=circ_id, command=command, payload=payload)
    assert decode_cell(encode_cell(cell)) == cell


def test_unknown_link_command_is_preserved():
    raw = bytes([9, 0, 0, 0, 0x2A]) + bytes(PAYLOAD_SIZE)
    assert decode_cell(raw).command == 42


@pytest.mark.parametrize("size", [0, 511, 513])
def test_decode_rejects_wrong_length(size):
    with pytest.raises(CellError):
        decode_cell(bytes(size))


def test_encode_rejects_short_payload():
    with pytest.raises(CellError):
        encode_cell(LinkCell(circ_id=1, command=3, payload=bytes(506)))


def test_relay_payload_layout():
    payload = RelayPayload(relay_cmd=1, data=b"hi", stream_id=0x0102, digest=0xAABBCCDD)
    raw = payload.to_bytes()
    assert len(raw) == PAYLOAD_SIZE
    assert raw[:11] == bytes([1, 0, 0, 0x02, 0x01, 0xDD, 0xCC, 0xBB, 0xAA, 2, 0])
    assert raw[11:13] == b"hi"
    assert raw[13:] == bytes(RELAY_DATA_SIZE - 2)


def test_relay_payload_round_trip_drops_padding():
    payload = RelayPayload(relay_cmd=33, data=b"\x05" + bytes(7), stream_id=1)
    parsed = RelayPayload.from_bytes(payload.to_bytes())
    assert parsed == payload
    assert parsed.length == 8


def test_relay_payload_too_long():
    with pytest.raises(CellError):
        RelayPayload(relay_cmd=1, data=bytes(RELAY_DATA_SIZE + 1)).to_bytes()


def test_relay_payload_rejects_oversized_length_field():
    raw = bytearray(RelayPayload(relay_cmd=1).to_bytes())
    raw[9:11] = (RELAY_DATA_SIZE + 1).to_bytes(2, "little")
    with pytest.raises(CellError):
        RelayPayload.from_bytes(bytes(raw))


@pytest.mark.parametrize(
    "value, expected",
    [(1, False), (18, False), (31, False), (32, True), (48, True), (255, True), (256, False)],
)
def test_extension_command_space(value, expected):
    assert is_extension_command(value) is expected


def test_feature_id_below_32_rejected():
    assert feature_id(32) == 32
    with pytest.raises(ValueError):
        feature_id(31)
