"""Independent verification of topology snapshots.

This module checks what the protocol built without reusing any of its
machinery: it reimplements ring geometry from scratch over a static
snapshot and replays only the pure next-hop deciders.  Snapshots can be
read back from the line-oriented files the simulator emits, so analysis
works offline from run artifacts alone.

Checks provided: the ring-correctness predicate (every node linked to
its two nearest live addresses in each direction), routability (the
fraction of ordered pairs greedy routing delivers to the node closest to
the target), the shortcut distance law, and missing-edge counts against
the ideal ring.

Shortcut edges are recorded oriented, requester first, and their length
is the clockwise offset the requester sampled; that is the quantity the
1/d law constrains (a shortcut may stretch past the antipode, where the
symmetric ring metric would fold it back).
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass
from random import Random

from .address import (
    MODULUS,
    ring_distance,
    directed_distance,
    Direction,
    format_address,
    parse_address,
)
from .routing import DecisionKind, greedy_next_hop

NEAR_LABEL = "structured.near"
SHORTCUT_LABEL = "structured.shortcut"

D_MAX = MODULUS


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class TopologySnapshot:
    timestamp: float
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, str], ...]


@dataclass(frozen=True)
class RoutabilityReport:
    pairs_tested: int
    pairs_routable: int
    routability: float
    mean_hops: float
    max_hops: int


@dataclass(frozen=True)
class ShortcutReport:
    samples: int
    ks_distance: float
    d_ave: int


# ----------------------------------------------------------------------
# ring geometry


def required_near_map(nodes: tuple[int, ...], per_side: int = 2) -> dict[int, set[int]]:
    """For each live node, the set of addresses it must hold near links to."""
    ring = sorted(nodes)
    n = len(ring)
    required: dict[int, set[int]] = {a: set() for a in ring}
    if n < 2:
        return required
    for i, a in enumerate(ring):
        for step in range(1, per_side + 1):
            required[a].add(ring[(i + step) % n])
            required[a].add(ring[(i - step) % n])
        required[a].discard(a)
    return required


def near_adjacency(snapshot: TopologySnapshot) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {a: set() for a in snapshot.nodes}
    for a, b, label in snapshot.edges:
        if label != NEAR_LABEL:
            continue
        if a in adj and b in adj:
            adj[a].add(b)
            adj[b].add(a)
    return adj


def structured_adjacency(snapshot: TopologySnapshot) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {a: set() for a in snapshot.nodes}
    for a, b, label in snapshot.edges:
        if label not in (NEAR_LABEL, SHORTCUT_LABEL):
            continue
        if a in adj and b in adj:
            adj[a].add(b)
            adj[b].add(a)
    return adj


def ring_correct(snapshot: TopologySnapshot,
                 per_side: int = 2) -> tuple[dict[int, bool], float]:
    """Per-node correctness flags and the correct fraction."""
    required = required_near_map(snapshot.nodes, per_side)
    adj = near_adjacency(snapshot)
    flags = {a: required[a] <= adj[a] for a in snapshot.nodes}
    if not flags:
        return flags, 1.0
    return flags, sum(flags.values()) / len(flags)


def missing_edges(snapshot: TopologySnapshot, per_side: int = 2) -> int:
    """Count of (node, required near neighbor) relations absent."""
    required = required_near_map(snapshot.nodes, per_side)
    adj = near_adjacency(snapshot)
    return sum(len(required[a] - adj[a]) for a in snapshot.nodes)


# ----------------------------------------------------------------------
# routability


def closest_node(ring: list[int], target: int) -> int:
    """Nearest live address to target by the symmetric ring metric."""
    i = bisect_left(ring, target) % len(ring)
    best = None
    for j in (i - 1, i, (i + 1) % len(ring)):
        a = ring[j]
        key = (ring_distance(a, target), a)
        if best is None or key < best:
            best = key
    return best[1]


def route_greedy(adj: dict[int, set[int]], source: int,
                 target: int) -> tuple[int, int]:
    """Walk greedy decisions over a static graph.

    Returns (delivered_node, hops).  Greedy forwarding strictly reduces
    ring distance, so the walk always terminates.
    """
    current = source
    prev = None
    hops = 0
    limit = len(adj) + 2
    while hops <= limit:
        decision = greedy_next_hop(current, adj[current], prev, target)
        if decision.kind is not DecisionKind.FORWARD:
            return current, hops
        prev = current
        current = decision.next_hop
        hops += 1
    raise RuntimeError("greedy walk failed to terminate")


def routability(snapshot: TopologySnapshot, pair_budget: int | None = None,
                seed: int = 0) -> RoutabilityReport:
    """Replay greedy routing over the snapshot for ordered node pairs.

    All ordered pairs are tried when they fit in pair_budget (or when no
    budget is given); otherwise a uniform sample without replacement is
    drawn, seeded for reproducibility.  A pair counts as routable when
    the walk delivers at the live node closest to the target's address.
    """
    nodes = sorted(snapshot.nodes)
    n = len(nodes)
    if n == 0:
        raise ValueError("empty snapshot")
    if n == 1:
        return RoutabilityReport(0, 0, 1.0, 0.0, 0)
    adj = structured_adjacency(snapshot)
    total = n * (n - 1)
    if pair_budget is None or total <= pair_budget:
        pairs = ((s, t) for s in nodes for t in nodes if s != t)
        tested = total
    else:
        rng = Random(seed)
        chosen = rng.sample(range(total), pair_budget)
        def pair_of(index: int) -> tuple[int, int]:
            s, r = divmod(index, n - 1)
            t = r if r < s else r + 1
            return nodes[s], nodes[t]
        pairs = (pair_of(i) for i in sorted(chosen))
        tested = pair_budget

    ok = 0
    hop_total = 0
    hop_max = 0
    for s, t in pairs:
        # The target address is t's own address, so t is the unique
        # closest node; delivery anywhere else is a routing failure.
        delivered, hops = route_greedy(adj, s, t)
        if delivered == t:
            ok += 1
            hop_total += hops
            hop_max = max(hop_max, hops)
    return RoutabilityReport(tested, ok, ok / tested,
                             (hop_total / ok) if ok else 0.0, hop_max)


# ----------------------------------------------------------------------
# shortcut distance law


def shortcut_law_cdf(d_ave: int):
    """CDF of the 1/d shortcut law over [d_ave, 2**160]."""
    denom = math.log(D_MAX / d_ave)

    def cdf(length: float) -> float:
        if length <= d_ave:
            return 0.0
        if length >= D_MAX:
            return 1.0
        return math.log(length / d_ave) / denom

    return cdf


def ks_distance(samples: list[int], cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic against a CDF."""
    xs = sorted(samples)
    n = len(xs)
    worst = 0.0
    for i, x in enumerate(xs):
        f = cdf(x)
        worst = max(worst, (i + 1) / n - f, f - i / n)
    return worst


def shortcut_distances(snapshot: TopologySnapshot) -> list[int]:
    """Clockwise offsets of shortcut edges, requester first in the tuple."""
    return [directed_distance(a, b, Direction.CLOCKWISE)
            for a, b, label in snapshot.edges if label == SHORTCUT_LABEL]


def shortcut_cdf(snapshot: TopologySnapshot, min_samples: int = 50) -> ShortcutReport:
    distances = shortcut_distances(snapshot)
    if len(distances) < min_samples:
        raise InsufficientSamples(
            f"{len(distances)} shortcut edges, need {min_samples}")
    d_ave = MODULUS // max(1, len(snapshot.nodes))
    ks = ks_distance(distances, shortcut_law_cdf(d_ave))
    return ShortcutReport(len(distances), ks, d_ave)


# ----------------------------------------------------------------------
# snapshot files and DOT export


def read_snapshot(path: str) -> TopologySnapshot:
    timestamp = 0.0
    nodes: list[int] = []
    edges: list[tuple[int, int, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        saw_any = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            saw_any = True
            parts = line.split()
            try:
                if parts[0] == "#" and "time=" in line:
                    timestamp = float(line.split("time=")[1])
                elif parts[0] == "node" and len(parts) == 2:
                    nodes.append(parse_address(parts[1]))
                elif parts[0] == "edge" and len(parts) == 4:
                    edges.append((parse_address(parts[1]),
                                  parse_address(parts[2]), parts[3]))
                else:
                    raise ValueError(f"unrecognized line: {line!r}")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}")
    if not saw_any:
        raise ValueError(f"{path}: empty snapshot file")
    return TopologySnapshot(timestamp, tuple(nodes), tuple(edges))


def write_snapshot(snapshot: TopologySnapshot, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# ringnet-snapshot time={snapshot.timestamp:.3f}\n")
        for a in snapshot.nodes:
            fh.write(f"node {format_address(a)}\n")
        for a, b, label in snapshot.edges:
            fh.write(f"edge {format_address(a)} {format_address(b)} {label}\n")


def to_dot(snapshot: TopologySnapshot) -> str:
    """Graphviz rendering; near edges solid, shortcuts dashed chords."""
    lines = ["graph ring {", "  layout=circo;", "  node [shape=point];"]
    order = {a: i for i, a in enumerate(sorted(snapshot.nodes))}
    for a in sorted(snapshot.nodes):
        lines.append(f'  n{order[a]} [label="{format_address(a)[:8]}"];')
    seen = set()
    for a, b, label in snapshot.edges:
        if a not in order or b not in order:
            continue
        key = (min(order[a], order[b]), max(order[a], order[b]), label)
        if key in seen:
            continue
        seen.add(key)
        style = "solid" if label == NEAR_LABEL else "dashed"
        lines.append(f"  n{order[a]} -- n{order[b]} [style={style}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
