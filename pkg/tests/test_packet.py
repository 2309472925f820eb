"""Packet codec tests."""

from random import Random

import pytest
from hypothesis import given, strategies as st

from ringnet.address import MODULUS
from ringnet.packet import (
    DEFAULT_TTL,
    HEADER_LEN,
    Packet,
    PacketHeader,
    TYPE_LINK,
    TYPE_ROUTED,
    TooShort,
    UnknownType,
    advance_hop,
    decode,
    encode,
    make_link,
    make_routed,
)

headers = st.builds(
    PacketHeader,
    type=st.sampled_from([TYPE_LINK, TYPE_ROUTED]),
    hops=st.integers(0, 0xFFFF),
    ttl=st.integers(0, 0xFFFF),
    source=st.integers(0, MODULUS - 1),
    destination=st.integers(0, MODULUS - 1),
    payload_type=st.integers(0, 0xFF),
)
packets = st.builds(Packet, header=headers,
                    payload=st.binary(max_size=200))


def test_golden_layout():
    pkt = Packet(PacketHeader(TYPE_ROUTED, 1, 5, 1, 2, 0), b"hi")
    raw = encode(pkt)
    expected = (bytes([0x02])            # type at offset 0
                + b"\x00\x01"            # hops at 1..2
                + b"\x00\x05"            # ttl at 3..4
                + b"\x00" * 19 + b"\x01"  # source at 5..24
                + b"\x00" * 19 + b"\x02"  # destination at 25..44
                + b"\x00"                # payload type at 45
                + b"hi")
    assert raw == expected
    assert len(raw) == HEADER_LEN + 2


def test_routed_and_link_first_octet():
    assert encode(make_routed(0, 0, 0, b""))[0] == 0x02
    assert encode(make_link(0, 0, 0, b""))[0] == 0x01


def test_empty_payload_encodes_to_exactly_46_bytes():
    assert len(encode(make_routed(0, 0, 0, b""))) == 46


@given(packets)
def test_round_trip_identity(pkt):
    assert decode(encode(pkt)) == pkt


@given(packets)
def test_header_is_always_46_bytes(pkt):
    assert len(encode(pkt)) == HEADER_LEN + len(pkt.payload)


def test_bulk_random_round_trip():
    rng = Random(7)
    for _ in range(2000):
        pkt = Packet(
            PacketHeader(rng.choice((TYPE_LINK, TYPE_ROUTED)),
                         rng.randrange(1 << 16), rng.randrange(1 << 16),
                         rng.getrandbits(160), rng.getrandbits(160),
                         rng.randrange(256)),
            rng.randbytes(rng.randrange(64)))
        assert decode(encode(pkt)) == pkt


def test_too_short():
    with pytest.raises(TooShort):
        decode(b"\x02" + b"\x00" * 44)  # 45 bytes


def test_unknown_type():
    raw = bytearray(encode(make_routed(0, 0, 0, b"")))
    raw[0] = 0x7F
    with pytest.raises(UnknownType):
        decode(bytes(raw))


def test_advance_hop_increments():
    pkt = make_routed(1, 2, 0, b"", ttl=5)
    stepped = advance_hop(pkt)
    assert stepped.header.hops == 1
    assert stepped.header.ttl == 5
    assert stepped.payload == pkt.payload


def test_advance_hop_expires_at_ttl():
    pkt = Packet(PacketHeader(TYPE_ROUTED, 5, 5, 1, 2, 0), b"")
    assert advance_hop(pkt) is None


def test_default_ttl():
    assert make_routed(0, 1, 0, b"").header.ttl == DEFAULT_TTL
