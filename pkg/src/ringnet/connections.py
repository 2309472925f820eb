"""Typed connection table kept by every overlay node.

A connection holds the live edge to one peer plus the set of role labels
it currently serves.  A peer has at most one table entry; an entry may
carry both a near and a shortcut role (a sampled shortcut that lands on
an existing ring neighbor is recorded on the same connection rather than
opening a second edge).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .address import Direction, directed_distance
from . import messages

if TYPE_CHECKING:  # pragma: no cover
    from typing import Any

LEAF = "leaf"
NEAR = "structured.near"
SHORTCUT = "structured.shortcut"

_CT_TO_LABEL = {
    messages.CT_LEAF: LEAF,
    messages.CT_NEAR: NEAR,
    messages.CT_SHORTCUT: SHORTCUT,
}
_LABEL_TO_CT = {v: k for k, v in _CT_TO_LABEL.items()}


def label_for(conn_type: int) -> str:
    try:
        return _CT_TO_LABEL[conn_type]
    except KeyError:
        raise ValueError(f"unknown connection type code {conn_type}")


def code_for(label: str) -> int:
    return _LABEL_TO_CT[label]


@dataclass
class Connection:
    peer: int
    edge: "Any"
    roles: set[str]
    peer_tas: list[str] = field(default_factory=list)
    established_at: float = 0.0
    last_seen: float = 0.0
    # True on the side that dialed the link handshake; the dialer owns
    # leaf teardown.
    initiated_by_me: bool = False
    # Set on the side that asked for the shortcut; the clockwise offset it
    # realized is what the distance law is checked against, and the gap
    # estimate used at sampling time tells the maintainer when the sample
    # has gone stale relative to the current network density.
    initiated_shortcut: bool = False
    shortcut_offset: int | None = None
    sampled_gap: int | None = None
    # Latest neighbor list received from this peer: ((addr, tas), ...).
    last_neighbors: tuple = ()

    def is_structured(self) -> bool:
        return NEAR in self.roles or SHORTCUT in self.roles


class ConnectionTable:
    """All connections of one node, indexed by peer address."""

    def __init__(self, owner: int, near_per_side: int = 2) -> None:
        self.owner = owner
        self.near_per_side = near_per_side
        self.by_peer: dict[int, Connection] = {}

    def __len__(self) -> int:
        return len(self.by_peer)

    def get(self, peer: int) -> Connection | None:
        return self.by_peer.get(peer)

    def add(self, conn: Connection) -> None:
        self.by_peer[conn.peer] = conn

    def remove(self, peer: int) -> Connection | None:
        return self.by_peer.pop(peer, None)

    def with_role(self, role: str) -> list[Connection]:
        return [c for c in self.by_peer.values() if role in c.roles]

    def structured_peers(self) -> list[int]:
        return [c.peer for c in self.by_peer.values() if c.is_structured()]

    def near_sorted(self, direction: Direction) -> list[Connection]:
        """Near-role connections ordered by arc length in ``direction``."""
        conns = self.with_role(NEAR)
        conns.sort(key=lambda c: directed_distance(self.owner, c.peer, direction))
        return conns

    def near_keep_set(self) -> set[int]:
        """Peers holding a currently-required near slot.

        The required set is the union of the closest ``near_per_side``
        peers in each direction; on tiny rings one peer may occupy slots
        on both sides.
        """
        keep: set[int] = set()
        for direction in Direction:
            for c in self.near_sorted(direction)[: self.near_per_side]:
                keep.add(c.peer)
        return keep

    def initiated_shortcuts(self) -> list[Connection]:
        return [c for c in self.by_peer.values()
                if SHORTCUT in c.roles and c.initiated_shortcut]
