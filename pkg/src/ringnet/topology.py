"""Topology construction helpers.

Two kinds of builders live here: pure snapshot synthesis (an ideal ring
with law-distributed shortcuts, used for routing experiments and as a
test oracle) and constructive seeding of live simulator nodes in an
already-converged state, which is how large "correct ring" starting
points for failure and merge scenarios are produced without paying for
a full protocol bootstrap.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from random import Random

from .address import MODULUS, random_class0
from .connections import Connection, LEAF, NEAR, SHORTCUT
from .metrics import NEAR_LABEL, SHORTCUT_LABEL, TopologySnapshot
from .node import NodeState, OverlayConfig, sample_shortcut_distance
from .simnet import SimNetwork


def ring_addresses(n: int, rng: Random) -> list[int]:
    """n distinct random ring addresses, sorted."""
    seen: set[int] = set()
    while len(seen) < n:
        seen.add(random_class0(rng))
    return sorted(seen)


def closest_index(ring: list[int], target: int) -> int:
    """Index of the ring address nearest target (symmetric metric)."""
    n = len(ring)
    i = bisect_left(ring, target) % n
    candidates = [(i - 1) % n, i, (i + 1) % n]
    def dist(j: int) -> tuple[int, int]:
        d = (ring[j] - target) % MODULUS
        d = min(d, MODULUS - d)
        return (d, ring[j])
    return min(candidates, key=dist)


def ideal_near_edges(ring: list[int], per_side: int = 2) -> set[tuple[int, int]]:
    n = len(ring)
    edges: set[tuple[int, int]] = set()
    for i, a in enumerate(ring):
        for step in range(1, per_side + 1):
            b = ring[(i + step) % n]
            if a != b:
                edges.add((min(a, b), max(a, b)))
    return edges


def law_shortcut_edges(ring: list[int], k: int,
                       rng: Random) -> list[tuple[int, int]]:
    """k clockwise shortcuts per node with 1/d-distributed offsets.

    Edges are oriented (requester, endpoint).  Draws that resolve to the
    requester itself are redrawn.
    """
    d_ave = MODULUS // len(ring)
    edges: list[tuple[int, int]] = []
    for a in ring:
        made = 0
        guard = 0
        while made < k and guard < 50 * k:
            guard += 1
            d = sample_shortcut_distance(d_ave, rng)
            b = ring[closest_index(ring, (a + d) % MODULUS)]
            if b == a:
                continue
            edges.append((a, b))
            made += 1
    return edges


def synthetic_snapshot(n: int, k: int, seed: int,
                       per_side: int = 2) -> TopologySnapshot:
    """A converged-looking snapshot built directly from the laws."""
    rng = Random(seed)
    ring = ring_addresses(n, rng)
    edges: list[tuple[int, int, str]] = []
    for a, b in sorted(ideal_near_edges(ring, per_side)):
        edges.append((a, b, NEAR_LABEL))
    for a, b in law_shortcut_edges(ring, k, rng):
        edges.append((a, b, SHORTCUT_LABEL))
    return TopologySnapshot(0.0, tuple(ring), tuple(edges))


# ----------------------------------------------------------------------
# live seeding


def install_connection(node_a: NodeState, node_b: NodeState, roles: set[str],
                       initiator: NodeState | None = None,
                       sampled_gap: int | None = None) -> None:
    """Wire an established connection between two live simulator nodes."""
    now = node_a.host.now()
    for me, other in ((node_a, node_b), (node_b, node_a)):
        edge = me.host.dial(other.host.ta)
        edge.peer_address = other.address
        conn = me.table.get(other.address)
        if conn is None:
            conn = Connection(other.address, edge, set(roles),
                              [other.host.ta], now, now)
            me.table.add(conn)
        else:
            conn.roles |= roles
        if SHORTCUT in roles and initiator is me:
            conn.initiated_shortcut = True
            conn.shortcut_offset = (other.address - me.address) % MODULUS
            conn.sampled_gap = sampled_gap


def seed_ring(network: SimNetwork, n: int, rng: Random,
              overlay: OverlayConfig, k: int | None = None,
              addresses: list[int] | None = None) -> dict[int, NodeState]:
    """Create n nodes pre-wired into a correct ring, keyed by address.

    Near links follow the per-side rule; when k is given each node also
    holds k law-distributed shortcuts, sampled against the true mean gap.
    """
    ring = sorted(addresses) if addresses else ring_addresses(n, rng)
    nodes: dict[int, NodeState] = {}
    for a in ring:
        host = network.new_host()
        node = NodeState(a, host, overlay, Random(rng.getrandbits(64)))
        node.joined = True
        node.joined_at = network.now
        host.attach(node)
        nodes[a] = node
    count = len(ring)
    for i, a in enumerate(ring):
        for step in range(1, overlay.near_per_side + 1):
            b = ring[(i + step) % count]
            if a != b:
                install_connection(nodes[a], nodes[b], {NEAR})
    if k:
        d_ave = MODULUS // count
        for a in ring:
            made = 0
            guard = 0
            while made < k and guard < 50 * k:
                guard += 1
                d = sample_shortcut_distance(d_ave, nodes[a].rng)
                b = ring[closest_index(ring, (a + d) % MODULUS)]
                if b == a:
                    continue
                install_connection(nodes[a], nodes[b], {SHORTCUT},
                                   initiator=nodes[a], sampled_gap=d_ave)
                made += 1
    for node in nodes.values():
        node._update_gap_ewma()
    return nodes
