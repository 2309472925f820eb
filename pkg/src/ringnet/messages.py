"""Protocol message bodies carried as packet payloads.

All bodies start with a kind byte; variable-length fields are
length-prefixed.  Byte layout (integers big-endian):

    ta        := u16 length | utf-8 text
    ta_list   := u8 count | ta...
    neighbor  := 20-byte address | ta_list
    link      := kind u8 | token u32 | address 20 | conn_type u8 |
                 status u8 | req_token u32 | observed ta | ta_list
    status    := kind u8 | token u32 | u8 count | neighbor...
    connect   := kind u8 | token u32 | address 20 | conn_type u8 | ta_list
    role/close are short fixed forms below.

Link, status, role and close bodies travel link-local (payload type
0x01/0x02); connect request/response bodies are routed (payload type
0x03).  The connect request keeps its conn_type at a fixed offset so
forwarding nodes can pick a routing mode without a full decode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .address import ADDRESS_BYTES, address_from_bytes, address_to_bytes

# Body kinds for payload type 0x01 (link) and 0x02 (status).
LINK_REQUEST = 0x01
LINK_RESPONSE = 0x02
STATUS_REQUEST = 0x03
STATUS_RESPONSE = 0x04
ROLE_ADD = 0x05
CLOSE = 0x06

# Body kinds for payload type 0x03 (connect).
CONNECT_REQUEST = 0x01
CONNECT_RESPONSE = 0x02
# Courier envelope: the rest of the payload is a whole packet to hand to
# a leaf peer (how a response reaches a joiner that is not yet routable).
CONNECT_RELAY = 0x03

# Link status codes.
LINK_OK = 0x00
LINK_COLLISION = 0x01
LINK_REJECTED = 0x02

# Connection type codes (see connections.py for the label strings).
CT_LEAF = 0x00
CT_NEAR = 0x01
CT_SHORTCUT = 0x02

# conn_type position inside an encoded connect body, for mode peeking.
_CONNECT_CTYPE_OFFSET = 1 + 4 + ADDRESS_BYTES


class MessageError(ValueError):
    pass


@dataclass(frozen=True)
class LinkMessage:
    kind: int
    token: int
    sender: int
    conn_type: int
    status: int
    req_token: int
    observed_remote: str
    transport_addresses: tuple[str, ...]


@dataclass(frozen=True)
class StatusMessage:
    kind: int
    token: int
    neighbors: tuple[tuple[int, tuple[str, ...]], ...]


@dataclass(frozen=True)
class ConnectionRequest:
    kind: int
    token: int
    sender: int
    conn_type: int
    transport_addresses: tuple[str, ...]
    # Ring address of a proxy that can relay the response to the sender
    # while it is still outside the ring; 0 when the sender is routable.
    via: int = 0


@dataclass(frozen=True)
class RoleChange:
    token: int
    conn_type: int


@dataclass(frozen=True)
class CloseMessage:
    reason: int = 0


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack(">B", v))

    def u16(self, v: int) -> None:
        self.parts.append(struct.pack(">H", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack(">I", v))

    def addr(self, a: int) -> None:
        self.parts.append(address_to_bytes(a))

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise MessageError("text field too long")
        self.u16(len(raw))
        self.parts.append(raw)

    def ta_list(self, tas: tuple[str, ...]) -> None:
        if len(tas) > 0xFF:
            raise MessageError("too many transport addresses")
        self.u8(len(tas))
        for t in tas:
            self.text(t)

    def done(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MessageError("truncated message body")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def addr(self) -> int:
        return address_from_bytes(self._take(ADDRESS_BYTES))

    def text(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def ta_list(self) -> tuple[str, ...]:
        return tuple(self.text() for _ in range(self.u8()))


def encode_link(msg: LinkMessage) -> bytes:
    w = _Writer()
    w.u8(msg.kind)
    w.u32(msg.token)
    w.addr(msg.sender)
    w.u8(msg.conn_type)
    w.u8(msg.status)
    w.u32(msg.req_token)
    w.text(msg.observed_remote)
    w.ta_list(msg.transport_addresses)
    return w.done()


def encode_status(msg: StatusMessage) -> bytes:
    w = _Writer()
    w.u8(msg.kind)
    w.u32(msg.token)
    if len(msg.neighbors) > 0xFF:
        raise MessageError("too many neighbors")
    w.u8(len(msg.neighbors))
    for addr, tas in msg.neighbors:
        w.addr(addr)
        w.ta_list(tas)
    return w.done()


def encode_connect(msg: ConnectionRequest) -> bytes:
    w = _Writer()
    w.u8(msg.kind)
    w.u32(msg.token)
    w.addr(msg.sender)
    w.u8(msg.conn_type)
    w.addr(msg.via)
    w.ta_list(msg.transport_addresses)
    return w.done()


def encode_relay(inner_packet: bytes) -> bytes:
    return bytes([CONNECT_RELAY]) + inner_packet


def encode_role(msg: RoleChange) -> bytes:
    w = _Writer()
    w.u8(ROLE_ADD)
    w.u32(msg.token)
    w.u8(msg.conn_type)
    return w.done()


def encode_close(msg: CloseMessage) -> bytes:
    w = _Writer()
    w.u8(CLOSE)
    w.u8(msg.reason)
    return w.done()


def decode_link_body(data: bytes) -> LinkMessage | StatusMessage | RoleChange | CloseMessage:
    """Decode a body carried link-local (payload types 0x01 and 0x02)."""
    r = _Reader(data)
    kind = r.u8()
    if kind in (LINK_REQUEST, LINK_RESPONSE):
        return LinkMessage(kind, r.u32(), r.addr(), r.u8(), r.u8(), r.u32(),
                           r.text(), r.ta_list())
    if kind in (STATUS_REQUEST, STATUS_RESPONSE):
        token = r.u32()
        count = r.u8()
        neighbors = tuple((r.addr(), r.ta_list()) for _ in range(count))
        return StatusMessage(kind, token, neighbors)
    if kind == ROLE_ADD:
        return RoleChange(r.u32(), r.u8())
    if kind == CLOSE:
        return CloseMessage(r.u8())
    raise MessageError(f"unknown link body kind 0x{kind:02x}")


def decode_connect_body(data: bytes) -> ConnectionRequest | bytes:
    """Decode a connect body; a relay envelope yields the inner packet."""
    r = _Reader(data)
    kind = r.u8()
    if kind == CONNECT_RELAY:
        return data[1:]
    if kind not in (CONNECT_REQUEST, CONNECT_RESPONSE):
        raise MessageError(f"unknown connect body kind 0x{kind:02x}")
    return ConnectionRequest(kind, token=r.u32(), sender=r.addr(),
                             conn_type=r.u8(), via=r.addr(),
                             transport_addresses=r.ta_list())


def peek_connect_type(data: bytes) -> int | None:
    """conn_type of an encoded connect body, without a full decode."""
    if len(data) > _CONNECT_CTYPE_OFFSET and data[0] == CONNECT_REQUEST:
        return data[_CONNECT_CTYPE_OFFSET]
    return None
