"""
Сверка тестового провайдера и кодировок с эталоном, посчитанным независимо (make_vectors.sh)
"""

import struct

import pytest

from fan.protocol.cells import LinkCell, LinkCommand, encode_cell
from fan.protocol.crypto import TestProvider, fnv1a64, keystream_from_seed, splitmix64
from fan.relay.node import node_id_from_name
from fan.toolkit.assembler import assemble
from fan.vm.interpreter import HostTable, instantiate
from fan.vm.isa import parse_program

provider = TestProvider()


@pytest.mark.parametrize("name, data", [("empty", b""), ("a", b"a"), ("foobar", b"foobar")])
def test_fnv1a64(vectors, name, data):
    assert fnv1a64(data) == int(vectors["fnv1a64"][name], 16)


@pytest.mark.parametrize("value", [0, 1, 12345])
def test_splitmix64(vectors, value):
    assert splitmix64(value) == int(vectors["splitmix64"][str(value)], 16)


def test_stream_seeds(vectors):
    seeds = vectors["stream_seed"]
    assert provider.stream_seed(bytes(32), 1) == int(seeds["zero_key_forward"], 16)
    assert provider.stream_seed(bytes(32), 0) == int(seeds["zero_key_backward"], 16)
    seal_seed = fnv1a64(b"seal" + node_id_from_name("relay1"))
    assert seal_seed == int(seeds["seal_relay1"], 16)


@pytest.mark.parametrize(
    "name, seed_name, counter, length",
    [
        ("zero_key_forward_counter0", "zero_key_forward", 0, 16),
        ("zero_key_forward_counter1", "zero_key_forward", 1, 16),
        ("zero_key_backward_counter0", "zero_key_backward", 0, 16),
        ("seal_relay1", "seal_relay1", 0, 32),
    ],
)
def test_keystream(vectors, name, seed_name, counter, length):
    seed = int(vectors["stream_seed"][seed_name], 16)
    assert keystream_from_seed(seed, counter, length).hex() == vectors["keystream"][name]


def test_seal_is_keystream_xor_and_self_inverse(vectors):
    relay_id = node_id_from_name("relay1")
    sealed = provider.seal(relay_id, bytes(32))
    assert sealed.hex() == vectors["keystream"]["seal_relay1"]
    assert provider.open(relay_id, sealed) == bytes(32)


def test_create_cell_encoding():
    cell = LinkCell(circ_id=0x80000001, command=LinkCommand.CREATE, payload=bytes(507))
    assert encode_cell(cell)[:5].hex() == "0100008001"


def test_hand_assembled_constant_program():
    raw = bytes.fromhex("1b0000002a000000" "0000000000000000")
    program = parse_program(raw)
    assert assemble("movi r0, 42\nexit\n") == raw
    result = instantiate(program, 4096, HostTable([]), 0).run(0, gas_limit=10)
    assert (result.value, result.gas_used) == (42, 2)


def test_hand_assembled_addition_program():
    raw = b"".join(
        struct.pack("<BBhi", *fields)
        for fields in [
            (0x1B, 0x01, 0, 2),  # movi r1, 2
            (0x1B, 0x02, 0, 3),  # movi r2, 3
            (0x2B, 0x10, 0, 0),  # mov r0, r1
            (0x20, 0x20, 0, 0),  # add r0, r2
            (0x00, 0x00, 0, 0),  # exit
        ]
    )
    assert assemble("movi r1, 2\nmovi r2, 3\nmov r0, r1\nadd r0, r2\nexit") == raw
    result = instantiate(parse_program(raw), 4096, HostTable([]), 0).run(0)
    assert result.value == 5
