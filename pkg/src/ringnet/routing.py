"""Next-hop decision rules for the ring.

Each decider is a pure function of the local address, an adjacency
snapshot (the structured peers of the deciding node), the previous hop,
and the target.  Three destination-based modes share the same argmin
core over ``adj ∪ {v}`` with ring distance to the target:

* greedy     - forward only to a strictly closer neighbor, otherwise the
               packet has arrived and is delivered here;
* exact      - deliver only at the exact target, drop at a dead end;
* annealing  - like greedy, but at a local minimum the packet is both
               delivered here and passed to the second-closest candidate,
               so the first hop may move away from the target.  This is
               what lets join traffic land on both sides of a gap in a
               damaged ring.

Direction-based routing ignores the target value entirely: the packet
walks hop by hop in a fixed direction and is delivered when its hop
count reaches its ttl.

Distance ties break toward the numerically smaller address, with the
deciding node winning ties against its neighbors, which makes every
decision deterministic for a given input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .address import Direction, directed_distance, ring_distance


class DecisionKind(enum.Enum):
    FORWARD = "forward"
    DELIVER_LOCAL = "deliver_local"
    DELIVER_AND_FORWARD = "deliver_and_forward"
    DROP = "drop"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    next_hop: int | None = None


DELIVER_LOCAL = Decision(DecisionKind.DELIVER_LOCAL)
DROP = Decision(DecisionKind.DROP)


def forward(next_hop: int) -> Decision:
    return Decision(DecisionKind.FORWARD, next_hop)


def deliver_and_forward(next_hop: int) -> Decision:
    return Decision(DecisionKind.DELIVER_AND_FORWARD, next_hop)


def _best_two(v: int, adj: Iterable[int], target: int) -> tuple[int, int | None]:
    """Closest and second-closest of ``adj ∪ {v}`` to target.

    Ordering key is (distance, candidate-is-not-v, address), so v wins
    ties with neighbors and neighbor ties go to the smaller address.
    """
    best = (ring_distance(v, target), 0, v)
    second = None
    for u in adj:
        key = (ring_distance(u, target), 1, u)
        if key < best:
            second = best
            best = key
        elif second is None or key < second:
            second = key
    return best[2], (second[2] if second is not None else None)


def greedy_next_hop(v: int, adj: Iterable[int], prev: int | None, target: int) -> Decision:
    u_min, _ = _best_two(v, adj, target)
    if u_min != v and u_min != prev:
        return forward(u_min)
    return DELIVER_LOCAL


def exact_next_hop(v: int, adj: Iterable[int], prev: int | None, target: int) -> Decision:
    if v == target:
        return DELIVER_LOCAL
    u_min, _ = _best_two(v, adj, target)
    if u_min != v and u_min != prev:
        return forward(u_min)
    return DROP


def annealing_next_hop(v: int, adj: Iterable[int], prev: int | None, target: int) -> Decision:
    u_min, u_sec = _best_two(v, adj, target)
    if u_min != v and u_min != prev:
        return forward(u_min)
    if u_sec is not None and u_sec != v and u_sec != prev:
        return deliver_and_forward(u_sec)
    return DELIVER_LOCAL


def directional_next_hop(v: int, adj: Iterable[int], direction: Direction,
                         hops: int, ttl: int) -> Decision:
    if hops >= ttl:
        return DELIVER_LOCAL
    best = None
    for u in adj:
        key = (directed_distance(v, u, direction), u)
        if best is None or key < best:
            best = key
    if best is None:
        return DROP
    return forward(best[1])
