"""Wire codec for overlay packets.

Every packet starts with a fixed 46-byte header followed by an opaque
payload.  Layout, all integers big-endian:

    offset  size  field
    0       1     type          (0x01 link-local, 0x02 routed)
    1       2     hops
    3       2     ttl
    5       20    source address
    25      20    destination address
    45      1     payload type

There is deliberately no checksum: edges are required to deliver whole,
uncorrupted packets, so integrity lives a layer down.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .address import address_from_bytes, address_to_bytes

HEADER_LEN = 46

TYPE_LINK = 0x01
TYPE_ROUTED = 0x02
_KNOWN_TYPES = (TYPE_LINK, TYPE_ROUTED)

# Payload type registry.
PAYLOAD_APP = 0x00
PAYLOAD_LINK = 0x01
PAYLOAD_STATUS = 0x02
PAYLOAD_CONNECT = 0x03

DEFAULT_TTL = 100

_HEADER = struct.Struct(">BHH20s20sB")
assert _HEADER.size == HEADER_LEN


class PacketError(ValueError):
    pass


class TooShort(PacketError):
    """Fewer bytes than one header; indicates a framing bug upstream."""


class UnknownType(PacketError):
    """First octet is not a known packet type; protocol mismatch."""


@dataclass(frozen=True)
class PacketHeader:
    type: int
    hops: int
    ttl: int
    source: int
    destination: int
    payload_type: int


@dataclass(frozen=True)
class Packet:
    header: PacketHeader
    payload: bytes = b""


def make_routed(source: int, destination: int, payload_type: int, payload: bytes,
                ttl: int = DEFAULT_TTL, hops: int = 0) -> Packet:
    return Packet(PacketHeader(TYPE_ROUTED, hops, ttl, source, destination, payload_type), payload)


def make_link(source: int, destination: int, payload_type: int, payload: bytes) -> Packet:
    return Packet(PacketHeader(TYPE_LINK, 0, 0, source, destination, payload_type), payload)


def encode(p: Packet) -> bytes:
    h = p.header
    return _HEADER.pack(
        h.type,
        h.hops,
        h.ttl,
        address_to_bytes(h.source),
        address_to_bytes(h.destination),
        h.payload_type,
    ) + p.payload


def decode(data: bytes) -> Packet:
    if len(data) < HEADER_LEN:
        raise TooShort(f"packet is {len(data)} bytes, header needs {HEADER_LEN}")
    ptype, hops, ttl, src, dst, payload_type = _HEADER.unpack_from(data)
    if ptype not in _KNOWN_TYPES:
        raise UnknownType(f"unknown packet type 0x{ptype:02x}")
    header = PacketHeader(ptype, hops, ttl, address_from_bytes(src),
                          address_from_bytes(dst), payload_type)
    return Packet(header, bytes(data[HEADER_LEN:]))


def advance_hop(p: Packet) -> Packet | None:
    """Copy with hops+1, or None once the hop budget is spent."""
    if p.header.hops >= p.header.ttl:
        return None
    return Packet(replace(p.header, hops=p.header.hops + 1), p.payload)
