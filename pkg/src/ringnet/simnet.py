"""Seeded discrete-event network simulator.

Hosts many overlay nodes over virtual datagram endpoints with a
configurable latency model, optional loss, and per-host NAT boxes.  The
event queue is a single heap ordered by (time, insertion seq), so runs
are bit-deterministic for a fixed seed: same config, same events, same
metrics.

Simulated time is the clock for every protocol timer; nothing here reads
the wall clock.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field
from random import Random

from .transport import format_ta, parse_ta

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# latency models


@dataclass(frozen=True)
class ConstantLatency:
    seconds: float = 0.01

    def sample(self, rng: Random, src: str, dst: str) -> float:
        return self.seconds


@dataclass(frozen=True)
class UniformLatency:
    low: float
    high: float

    def __post_init__(self) -> None:
        if self.low > self.high:
            raise ValueError("uniform latency needs low <= high")

    def sample(self, rng: Random, src: str, dst: str) -> float:
        return rng.uniform(self.low, self.high)


@dataclass(frozen=True)
class PairLatency:
    """Fixed per-(src ip, dst ip) latencies with a default."""

    table: tuple[tuple[tuple[str, str], float], ...]
    default: float = 0.01

    def sample(self, rng: Random, src: str, dst: str) -> float:
        for (a, b), value in self.table:
            if a == src and b == dst:
                return value
        return self.default


@dataclass
class SimConfig:
    seed: int = 0
    latency: object = field(default_factory=ConstantLatency)
    loss_rate: float = 0.0
    tick_interval: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be a probability")


# ----------------------------------------------------------------------
# NAT model


class NatKind(enum.Enum):
    NONE = "none"
    FULL_CONE = "full_cone"
    RESTRICTED_CONE = "restricted_cone"
    PORT_RESTRICTED_CONE = "port_restricted_cone"
    # Unsupported by the traversal protocol; modeled as a negative control.
    SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class NatProfile:
    kind: NatKind = NatKind.PORT_RESTRICTED_CONE


class NatBox:
    """One NAT device translating a single internal host.

    Cone kinds keep one external port per internal (ip, port) and record
    the peers the host has sent to; the symmetric kind allocates a fresh
    external port per destination, which is what defeats hole punching.
    """

    def __init__(self, profile: NatProfile, external_ip: str) -> None:
        self.profile = profile
        self.external_ip = external_ip
        self._next_port = 30000
        # cone: (int_ip, int_port) -> ext_port
        self.mappings: dict[tuple, int] = {}
        # ext_port -> set of (dst_ip, dst_port) the internal host sent to
        self.permitted: dict[int, set[tuple[str, int]]] = {}
        # ext_port -> (int_ip, int_port); symmetric also records the dest
        self.reverse: dict[int, tuple] = {}

    def _alloc(self) -> int:
        port = self._next_port
        self._next_port += 1
        return port

    def outbound(self, int_ip: str, int_port: int,
                 dst_ip: str, dst_port: int) -> tuple[str, int]:
        """Translate an outgoing datagram; returns the external (ip, port)."""
        if self.profile.kind is NatKind.SYMMETRIC:
            key = (int_ip, int_port, dst_ip, dst_port)
        else:
            key = (int_ip, int_port)
        ext = self.mappings.get(key)
        if ext is None:
            ext = self._alloc()
            self.mappings[key] = ext
            self.reverse[ext] = key
            self.permitted[ext] = set()
        self.permitted[ext].add((dst_ip, dst_port))
        return self.external_ip, ext

    def inbound_allowed(self, ext_port: int, src_ip: str, src_port: int) -> bool:
        if ext_port not in self.reverse:
            return False
        kind = self.profile.kind
        if kind is NatKind.NONE or kind is NatKind.FULL_CONE:
            return True
        sent = self.permitted.get(ext_port, set())
        if kind is NatKind.RESTRICTED_CONE:
            return any(ip == src_ip for ip, _ in sent)
        if kind is NatKind.PORT_RESTRICTED_CONE:
            return (src_ip, src_port) in sent
        # Symmetric: the mapping exists per destination; only that exact
        # destination may answer on it.
        key = self.reverse[ext_port]
        return key[2] == src_ip and key[3] == src_port

    def internal_for(self, ext_port: int) -> tuple[str, int] | None:
        key = self.reverse.get(ext_port)
        if key is None:
            return None
        return key[0], key[1]


def nat_filter(box: NatBox, ext_port: int, src_ip: str, src_port: int) -> bool:
    """Would the box pass an inbound datagram to its external port?"""
    return box.inbound_allowed(ext_port, src_ip, src_port)


# ----------------------------------------------------------------------
# simulator core


class SimTimer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn) -> None:
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimNetwork:
    def __init__(self, config: SimConfig | None = None) -> None:
        self.config = config or SimConfig()
        self.rng = Random(self.config.seed)
        self.now = 0.0
        self._heap: list[tuple[float, int, SimTimer]] = []
        self._seq = itertools.count()
        self._host_seq = itertools.count(1)
        self.hosts: dict[str, "SimHost"] = {}          # plain ip -> host
        self.nat_externals: dict[str, NatBox] = {}     # external ip -> box
        self.stats: Counter = Counter()

    # -- scheduling --

    def call_later(self, delay: float, fn) -> SimTimer:
        timer = SimTimer(fn)
        heapq.heappush(self._heap, (self.now + max(0.0, delay),
                                    next(self._seq), timer))
        return timer

    def run_until(self, t: float) -> None:
        while self._heap and self._heap[0][0] <= t:
            when, _, timer = heapq.heappop(self._heap)
            self.now = when
            if not timer.cancelled:
                timer.fn()
        self.now = max(self.now, t)

    def run_for(self, duration: float) -> None:
        self.run_until(self.now + duration)

    def run_while(self, predicate, step: float = 1.0, limit: float = 1e9) -> None:
        deadline = self.now + limit
        while predicate() and self.now < deadline:
            self.run_until(min(self.now + step, deadline))

    # -- topology --

    def new_host(self, nat: NatProfile | None = None) -> "SimHost":
        index = next(self._host_seq)
        ip = f"10.{(index >> 16) & 255}.{(index >> 8) & 255}.{index & 255}"
        host = SimHost(self, ip, 7000, nat)
        self.hosts[ip] = host
        if host.nat_box is not None:
            self.nat_externals[host.nat_box.external_ip] = host.nat_box
        return host

    def remove_host(self, host: "SimHost") -> None:
        host.alive = False
        self.hosts.pop(host.ip, None)
        if host.nat_box is not None:
            self.nat_externals.pop(host.nat_box.external_ip, None)

    # -- datagram plane --

    def transmit(self, src_host: "SimHost", dst_ta: str, data: bytes) -> None:
        self.stats["datagrams"] += 1
        self.stats["bytes"] += len(data)
        try:
            dst = parse_ta(dst_ta)
        except ValueError:
            self.stats["bad_destination"] += 1
            return
        # Source address as the receiver will see it.
        if src_host.nat_box is not None:
            ext_ip, ext_port = src_host.nat_box.outbound(
                src_host.ip, src_host.port, dst.host, dst.port)
            visible_src = format_ta("udp", ext_ip, ext_port)
            src_ip, src_port = ext_ip, ext_port
        else:
            visible_src = src_host.ta
            src_ip, src_port = src_host.ip, src_host.port

        target = self._resolve(dst.host, dst.port, src_ip, src_port)
        if target is None:
            self.stats["undeliverable"] += 1
            return
        if self.config.loss_rate > 0.0 and self.rng.random() < self.config.loss_rate:
            self.stats["lost"] += 1
            return
        delay = self.config.latency.sample(self.rng, src_host.ip, dst.host)
        self.call_later(delay, lambda: target._receive(visible_src, data))

    def _resolve(self, dst_ip: str, dst_port: int,
                 src_ip: str, src_port: int) -> "SimHost | None":
        host = self.hosts.get(dst_ip)
        if host is not None and host.alive and host.port == dst_port:
            if host.nat_box is not None:
                # A NATed host's internal address is not routable from
                # outside; only its external mapping is.
                return None
            return host
        box = self.nat_externals.get(dst_ip)
        if box is not None:
            if not box.inbound_allowed(dst_port, src_ip, src_port):
                self.stats["nat_dropped"] += 1
                return None
            internal = box.internal_for(dst_port)
            if internal is None:
                return None
            inner = None
            for h in self.hosts.values():
                if h.ip == internal[0] and h.port == internal[1]:
                    inner = h
                    break
            if inner is not None and inner.alive:
                return inner
        return None


class SimEdge:
    """Virtual datagram edge: a (local host, remote ta) pair."""

    __slots__ = ("host", "remote_ta", "local_ta", "peer_address", "state", "dialed")

    def __init__(self, host: "SimHost", remote_ta: str, dialed: bool = True) -> None:
        self.host = host
        self.remote_ta = remote_ta
        self.local_ta = host.ta
        self.peer_address: int | None = None
        self.state = "open"
        self.dialed = dialed

    def send(self, data: bytes) -> None:
        if self.state != "open" or not self.host.alive:
            return
        self.host.network.transmit(self.host, self.remote_ta, data)

    def close(self) -> None:
        self.state = "closed"
        self.host.edges.pop(self.remote_ta, None)

    def __repr__(self) -> str:  # pragma: no cover
        return f"<SimEdge {self.local_ta} -> {self.remote_ta}>"


class SimHost:
    """One simulated endpoint; implements the host interface nodes need."""

    def __init__(self, network: SimNetwork, ip: str, port: int,
                 nat: NatProfile | None) -> None:
        self.network = network
        self.ip = ip
        self.port = port
        self.alive = True
        self.node = None
        self.edges: dict[str, SimEdge] = {}
        if nat is not None and nat.kind is not NatKind.NONE:
            ext_index = ip.split(".")[1:]
            self.nat_box: NatBox | None = NatBox(nat, "172." + ".".join(ext_index))
        else:
            self.nat_box = None
        self.ta = format_ta("udp", ip, port)

    # host interface ----------------------------------------------------

    def now(self) -> float:
        return self.network.now

    def call_later(self, delay: float, fn) -> SimTimer:
        def guarded():
            if self.alive:
                fn()
        return self.network.call_later(delay, guarded)

    def dial(self, ta: str) -> SimEdge | None:
        try:
            parse_ta(ta)
        except ValueError:
            return None
        edge = self.edges.get(ta)
        if edge is None or edge.state != "open":
            edge = SimEdge(self, ta)
            self.edges[ta] = edge
        return edge

    def local_tas(self) -> list[str]:
        return [self.ta]

    # plumbing ----------------------------------------------------------

    def attach(self, node) -> None:
        self.node = node

    def shutdown(self) -> None:
        """Abrupt removal: every edge dies with no goodbye."""
        self.alive = False
        if self.node is not None:
            self.node.stop()
        self.edges.clear()
        self.network.remove_host(self)

    def _receive(self, src_ta: str, data: bytes) -> None:
        if not self.alive or self.node is None:
            return
        edge = self.edges.get(src_ta)
        if edge is None:
            edge = SimEdge(self, src_ta, dialed=False)
            self.edges[src_ta] = edge
        self.node.on_datagram(edge, data)
