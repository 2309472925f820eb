"""Per-node protocol state machine.

A ``NodeState`` owns one ring position: its connection table, the link
handshakes in flight, routed connection requests it has issued, and the
periodic maintenance pass that repairs ring neighborhoods, prunes
surplus connections and keeps the shortcut set stocked.

The node is transport-agnostic.  Its environment ("host") must provide::

    host.now() -> float                   simulated or wall seconds
    host.call_later(delay, fn) -> timer   timer has .cancel()
    host.dial(ta) -> edge | None          start opening an edge
    host.local_tas() -> list[str]

and edges must provide ``send(bytes)``, ``close()``, ``remote_ta``,
``local_ta`` and a writable ``peer_address``.  Incoming datagrams are fed
to ``on_datagram(edge, data)``.  All events for one node must be
delivered serially; distinct nodes may run concurrently.

Connection establishment is a two round trip handshake over a fresh
edge: a link request/response that exchanges addresses, transport
addresses (including each side's view of the other, which is how a node
behind a NAT discovers its translated address) and the connection type,
then a status request/response that exchanges neighbor lists.  The
connection enters the table only when round two completes, on both ends.

Ring membership is bootstrapped by routing a connection request toward
the joining node's own address in annealing mode through a leaf proxy;
the nodes adjacent to that address connect back.  Neighbor lists then
"zip" the ring together: any listed address strictly closer than a
current near neighbor triggers a direct connection to it, which is also
what merges two formerly separate rings once a single node bridges them.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from random import Random
from typing import Callable

from .address import (
    Direction,
    HALF_MODULUS,
    MODULUS,
    direction_of,
    directed_distance,
    directional_address,
    format_address,
)
from . import messages
from .connections import (
    Connection,
    ConnectionTable,
    LEAF,
    NEAR,
    SHORTCUT,
    label_for,
)
from .messages import (
    CT_LEAF,
    CT_NEAR,
    CT_SHORTCUT,
    CloseMessage,
    ConnectionRequest,
    LinkMessage,
    RoleChange,
    StatusMessage,
)
from .packet import (
    PAYLOAD_APP,
    PAYLOAD_CONNECT,
    PAYLOAD_LINK,
    PAYLOAD_STATUS,
    Packet,
    TYPE_LINK,
    TYPE_ROUTED,
    PacketError,
    advance_hop,
    decode,
    encode,
    make_link,
    make_routed,
)
from . import routing
from .routing import DecisionKind

log = logging.getLogger(__name__)

D_MAX = MODULUS


class NotReady(Exception):
    """Raised when an estimate is requested before the node has near links."""


def shortcut_distance_from_uniform(d_ave: int, x: float) -> int:
    """Map a uniform draw x in [0, 1] to a shortcut distance.

    d = d_ave * (d_max / d_ave) ** x, which gives Prob(d <= L) =
    log(L / d_ave) / log(d_max / d_ave), i.e. density proportional to 1/d
    over [d_ave, d_max].
    """
    if d_ave < 1:
        raise ValueError("d_ave must be at least 1")
    if x <= 0.0:
        return d_ave
    if x >= 1.0:
        return D_MAX
    d = int(d_ave * (D_MAX / d_ave) ** x)
    return min(max(d, d_ave), D_MAX)


def sample_shortcut_distance(d_ave: int, rng: Random) -> int:
    return shortcut_distance_from_uniform(d_ave, rng.random())


@dataclass
class OverlayConfig:
    near_per_side: int = 2
    # None picks k from the local density estimate (about log2 N), capped.
    k_shortcuts: int | None = None
    k_max: int = 16
    default_ttl: int = 100
    tick_interval: float = 1.0
    # None disables idle probing entirely (quiet networks).
    status_interval: float | None = 5.0
    probe_timeout: float = 0.75
    probe_retries: int = 3
    handshake_timeout: float = 0.5
    handshake_retries: int = 4
    join_retry_timeout: float = 4.0
    join_retries: int = 4
    leaf_grace_ticks: int = 1
    connreq_timeout: float = 6.0
    push_status_debounce: float = 0.25
    # A required neighbor candidate farther than this many mean gaps is
    # treated as "no plausible candidate known" and triggers discovery.
    repair_horizon_gaps: float = 8.0
    # Resample a shortcut when the density estimate has moved by more
    # than this factor since it was drawn.  In a static network the two
    # values coincide, so refresh traffic only appears while the local
    # density is actually shifting.
    shortcut_stale_factor: float = 2.0
    gap_ewma_alpha: float = 0.25
    max_advertised_tas: int = 4
    trace: bool = False


_WAIT_LINK = "wait_link"
_WAIT_STATUS = "wait_status"


@dataclass
class _LinkAttempt:
    token: int
    tas: list[str]
    conn_type: int
    expect_addr: int | None
    req_token: int
    ta_index: int = 0
    state: str = _WAIT_LINK
    retries_left: int = 0
    backoff: float = 0.0
    timer: object | None = None
    edge: object | None = None
    peer: int | None = None
    peer_tas: tuple[str, ...] = ()
    on_established: Callable | None = None
    on_failed: Callable | None = None


@dataclass
class _Provisional:
    peer: int
    conn_type: int
    tas: list[str]
    req_token: int
    edge: object
    expires: float


@dataclass
class _PendingRequest:
    kind: str  # join | anchor | probe | shortcut
    expires: float
    probe_dir: Direction | None = None
    depth: int = 0
    sampled_gap: int | None = None


class NodeState:
    def __init__(self, address: int, host, config: OverlayConfig, rng: Random) -> None:
        self.address = address
        self.host = host
        self.cfg = config
        self.rng = rng
        self.table = ConnectionTable(address, config.near_per_side)
        self.alive = True
        self.joined = False
        self.join_started_at: float | None = None
        self.joined_at: float | None = None
        # Set once the ring position is held on both sides and the first
        # shortcut is up: the node is fully established.
        self.established_at: float | None = None

        self.pending_links: dict[int, _LinkAttempt] = {}
        self.provisional: dict[tuple[str, int], _Provisional] = {}
        self.pending_requests: dict[int, _PendingRequest] = {}
        self.pending_probes: dict[int, dict] = {}

        self.learned_tas: list[str] = []
        self.gap_ewma: float | None = None
        self.sides_converged = False
        self.stats: Counter = Counter()
        self.trace: list[tuple] = []
        self.app_handler: Callable | None = None
        self.on_joined: Callable | None = None
        self.on_join_failed: Callable | None = None

        self._token_seq = 0
        self._tick_count = 0
        self._first_near_tick: int | None = None
        self._join_timer = None
        self._join_attempts_left = 0
        self._push_timer = None
        self._tick_timer = host.call_later(
            rng.uniform(0.0, config.tick_interval), self.tick)

    # ------------------------------------------------------------------
    # lifecycle

    def stop(self) -> None:
        self.alive = False
        for t in (self._tick_timer, self._join_timer, self._push_timer):
            if t is not None:
                t.cancel()

    def _next_token(self) -> int:
        self._token_seq = (self._token_seq + 1) & 0xFFFFFFFF
        return self._token_seq or 1

    def _trace(self, *event) -> None:
        if self.cfg.trace:
            self.trace.append(event)

    def advertised_tas(self) -> list[str]:
        tas = list(self.learned_tas)
        for ta in self.host.local_tas():
            if ta not in tas:
                tas.append(ta)
        return tas[: self.cfg.max_advertised_tas]

    def _learn_self_ta(self, ta: str) -> None:
        if ta and ta not in self.learned_tas and ta not in self.host.local_tas():
            self.learned_tas.append(ta)
            del self.learned_tas[: -self.cfg.max_advertised_tas]

    # ------------------------------------------------------------------
    # joining

    def start_join(self, proxy_ta: str) -> None:
        """Bootstrap into the ring through a proxy reachable at proxy_ta."""
        self.join_started_at = self.host.now()
        self._join_attempts_left = self.cfg.join_retries
        self.initiate_link([proxy_ta], CT_LEAF,
                           on_established=self._leaf_ready,
                           on_failed=lambda reason: self._join_failed(reason))

    def add_bootstrap(self, proxy_ta: str) -> None:
        """Attach a further leaf proxy (e.g. to bridge a second ring)."""
        self.initiate_link([proxy_ta], CT_LEAF, on_established=self._leaf_ready)

    def _leaf_ready(self, conn: Connection) -> None:
        self._send_join_request(conn)
        if self._join_timer is None and not self.joined:
            self._join_timer = self.host.call_later(
                self.cfg.join_retry_timeout, self._join_check)

    def _send_join_request(self, leaf: Connection) -> None:
        token = self._next_token()
        self.pending_requests[token] = _PendingRequest(
            "join", self.host.now() + self.cfg.connreq_timeout)
        # The proxy's address rides along so the response can be couriered
        # back through it: we are not routable until the ring knows us.
        req = ConnectionRequest(messages.CONNECT_REQUEST, token, self.address,
                                CT_NEAR, tuple(self.advertised_tas()),
                                via=leaf.peer)
        pkt = make_routed(self.address, self.address, PAYLOAD_CONNECT,
                          messages.encode_connect(req), ttl=self.cfg.default_ttl)
        leaf.edge.send(encode(pkt))
        self.stats["join_requests"] += 1

    def _join_check(self) -> None:
        self._join_timer = None
        if self.joined or not self.alive:
            return
        leafs = self.table.with_role(LEAF)
        if self._join_attempts_left > 0 and leafs:
            self._join_attempts_left -= 1
            self._send_join_request(leafs[0])
            self._join_timer = self.host.call_later(
                self.cfg.join_retry_timeout, self._join_check)
        else:
            self._join_failed("timeout")

    def _join_failed(self, reason: str) -> None:
        if self.joined or not self.alive:
            return
        self.stats["join_failed"] += 1
        if self.on_join_failed is not None:
            self.on_join_failed(self, reason)

    def _join_succeeded(self) -> None:
        self.joined = True
        self.joined_at = self.host.now()
        if self._join_timer is not None:
            self._join_timer.cancel()
            self._join_timer = None
        if self.on_joined is not None:
            self.on_joined(self)

    # ------------------------------------------------------------------
    # link handshake, initiator side

    def initiate_link(self, tas: list[str], conn_type: int, *,
                      expect_addr: int | None = None, req_token: int = 0,
                      on_established: Callable | None = None,
                      on_failed: Callable | None = None) -> int | None:
        tas = [t for t in tas if t]
        if not tas:
            return None
        token = self._next_token()
        attempt = _LinkAttempt(token, tas, conn_type, expect_addr, req_token,
                               on_established=on_established, on_failed=on_failed)
        self.pending_links[token] = attempt
        self._attempt_dial(attempt)
        return token

    def _dialing_addrs(self) -> set[int]:
        out = {a.expect_addr for a in self.pending_links.values()
               if a.expect_addr is not None}
        out.update(a.peer for a in self.pending_links.values()
                   if a.peer is not None)
        return out

    def _attempt_dial(self, at: _LinkAttempt) -> None:
        while at.ta_index < len(at.tas):
            edge = self.host.dial(at.tas[at.ta_index])
            if edge is not None:
                at.edge = edge
                at.retries_left = self.cfg.handshake_retries
                at.backoff = self.cfg.handshake_timeout
                self._attempt_send(at)
                return
            at.ta_index += 1
        self._abort_attempt(at, "no dialable transport address")

    def _attempt_send(self, at: _LinkAttempt) -> None:
        if at.state == _WAIT_LINK:
            msg = LinkMessage(messages.LINK_REQUEST, at.token, self.address,
                              at.conn_type, messages.LINK_OK, at.req_token,
                              at.tas[at.ta_index], tuple(self.advertised_tas()))
            body = messages.encode_link(msg)
            pkt = make_link(self.address, at.expect_addr or 0, PAYLOAD_LINK, body)
        else:
            msg = StatusMessage(messages.STATUS_REQUEST, at.token,
                                self._neighbor_listing())
            pkt = make_link(self.address, at.peer or 0, PAYLOAD_STATUS,
                            messages.encode_status(msg))
        at.edge.send(encode(pkt))
        at.timer = self.host.call_later(
            at.backoff, lambda: self._attempt_timeout(at.token))

    def _attempt_timeout(self, token: int) -> None:
        at = self.pending_links.get(token)
        if at is None:
            return
        at.retries_left -= 1
        if at.retries_left > 0:
            at.backoff *= 2
            self._attempt_send(at)
            return
        if at.state == _WAIT_LINK and at.ta_index + 1 < len(at.tas):
            at.ta_index += 1
            self._close_unused_edge(at.edge)
            self._attempt_dial(at)
            return
        self._abort_attempt(at, "timeout")

    def _abort_attempt(self, at: _LinkAttempt, reason: str) -> None:
        self.pending_links.pop(at.token, None)
        if at.timer is not None:
            at.timer.cancel()
        self._close_unused_edge(at.edge)
        self.stats["link_failed"] += 1
        self._trace("link_failed", at.expect_addr, reason)
        if at.on_failed is not None:
            at.on_failed(reason)

    def on_edge_failed(self, edge) -> None:
        """Transport-level open failure (e.g. TCP connect refused)."""
        for at in list(self.pending_links.values()):
            if at.edge is edge and at.state == _WAIT_LINK:
                if at.timer is not None:
                    at.timer.cancel()
                at.ta_index += 1
                self._attempt_dial(at)
                return

    def _close_unused_edge(self, edge) -> None:
        if edge is None:
            return
        for conn in self.table.by_peer.values():
            if conn.edge is edge:
                return
        edge.close()

    # ------------------------------------------------------------------
    # datagram entry point

    def on_datagram(self, edge, data: bytes) -> None:
        if not self.alive:
            return
        try:
            pkt = decode(data)
        except PacketError as exc:
            log.debug("node %s: dropping undecodable datagram: %s",
                      format_address(self.address)[:8], exc)
            self.stats["bad_packet"] += 1
            return
        peer = getattr(edge, "peer_address", None)
        if peer is not None:
            conn = self.table.get(peer)
            if conn is not None:
                conn.last_seen = self.host.now()
        if pkt.header.type == TYPE_LINK:
            self._dispatch_link(edge, pkt)
        elif pkt.header.type == TYPE_ROUTED:
            self._route_packet(pkt, prev=peer)

    def _dispatch_link(self, edge, pkt: Packet) -> None:
        try:
            body = messages.decode_link_body(pkt.payload)
        except messages.MessageError as exc:
            log.debug("bad link body: %s", exc)
            self.stats["bad_body"] += 1
            return
        if isinstance(body, LinkMessage):
            if body.kind == messages.LINK_REQUEST:
                self._handle_link_request(edge, body)
            else:
                self._handle_link_response(edge, body)
        elif isinstance(body, StatusMessage):
            if body.kind == messages.STATUS_REQUEST:
                self._handle_status_request(edge, body)
            else:
                self._handle_status_response(edge, body)
        elif isinstance(body, RoleChange):
            self._handle_role(edge, body)
        elif isinstance(body, CloseMessage):
            peer = getattr(edge, "peer_address", None)
            if peer is not None:
                self._drop_connection(peer, notify=False, reason="peer closed")

    # ------------------------------------------------------------------
    # link handshake, responder side

    def _handle_link_request(self, edge, msg: LinkMessage) -> None:
        if msg.sender == self.address:
            reply = LinkMessage(messages.LINK_RESPONSE, msg.token, self.address,
                                msg.conn_type, messages.LINK_COLLISION,
                                msg.req_token, edge.remote_ta, ())
            edge.send(encode(make_link(self.address, msg.sender, PAYLOAD_LINK,
                                       messages.encode_link(reply))))
            self.stats["address_collision"] += 1
            return
        self._learn_self_ta(msg.observed_remote)
        edge.peer_address = msg.sender
        key = (edge.remote_ta, msg.token)
        if key not in self.provisional:
            window = self.cfg.handshake_timeout * (2 ** (self.cfg.handshake_retries + 2))
            self.provisional[key] = _Provisional(
                msg.sender, msg.conn_type, list(msg.transport_addresses),
                msg.req_token, edge, self.host.now() + window)
        reply = LinkMessage(messages.LINK_RESPONSE, msg.token, self.address,
                            msg.conn_type, messages.LINK_OK, msg.req_token,
                            edge.remote_ta, tuple(self.advertised_tas()))
        edge.send(encode(make_link(self.address, msg.sender, PAYLOAD_LINK,
                                   messages.encode_link(reply))))

    def _handle_link_response(self, edge, msg: LinkMessage) -> None:
        at = self.pending_links.get(msg.token)
        if at is None or at.state != _WAIT_LINK:
            return
        if at.timer is not None:
            at.timer.cancel()
        if msg.status != messages.LINK_OK or msg.sender == self.address:
            self._abort_attempt(at, "collision" if
                                msg.status == messages.LINK_COLLISION else "rejected")
            return
        self._learn_self_ta(msg.observed_remote)
        at.peer = msg.sender
        at.peer_tas = msg.transport_addresses
        at.state = _WAIT_STATUS
        at.retries_left = self.cfg.handshake_retries
        at.backoff = self.cfg.handshake_timeout
        edge.peer_address = msg.sender
        self._attempt_send(at)

    def _handle_status_request(self, edge, msg: StatusMessage) -> None:
        key = (edge.remote_ta, msg.token)
        prov = self.provisional.pop(key, None)
        if prov is not None:
            conn = self._commit(prov.peer, prov.edge, prov.conn_type, prov.tas,
                                req_token=prov.req_token, initiated_by_me=False)
            self._process_status(conn, msg.neighbors)
        else:
            peer = getattr(edge, "peer_address", None)
            conn = self.table.get(peer) if peer is not None else None
            if conn is None:
                return
            self._process_status(conn, msg.neighbors)
        reply = StatusMessage(messages.STATUS_RESPONSE, msg.token,
                              self._neighbor_listing())
        edge.send(encode(make_link(self.address, edge.peer_address or 0,
                                   PAYLOAD_STATUS, messages.encode_status(reply))))

    def _handle_status_response(self, edge, msg: StatusMessage) -> None:
        at = self.pending_links.pop(msg.token, None)
        if at is not None:
            if at.timer is not None:
                at.timer.cancel()
            conn = self._commit(at.peer, at.edge, at.conn_type, list(at.peer_tas),
                                req_token=at.req_token, initiated_by_me=True)
            self._process_status(conn, msg.neighbors)
            if at.on_established is not None:
                at.on_established(conn)
            return
        probe = self.pending_probes.pop(msg.token, None)
        if probe is not None and probe["timer"] is not None:
            probe["timer"].cancel()
        peer = getattr(edge, "peer_address", None)
        conn = self.table.get(peer) if peer is not None else None
        if conn is not None:
            self._process_status(conn, msg.neighbors)

    def _handle_role(self, edge, msg: RoleChange) -> None:
        pend = self.pending_requests.pop(msg.token, None)
        peer = getattr(edge, "peer_address", None)
        conn = self.table.get(peer) if peer is not None else None
        if conn is None:
            return
        label = label_for(msg.conn_type)
        if label not in conn.roles:
            conn.roles.add(label)
            if label == NEAR:
                self._near_changed()
        if pend is not None and pend.kind == "shortcut" and label == SHORTCUT:
            conn.initiated_shortcut = True
            conn.shortcut_offset = directed_distance(
                self.address, conn.peer, Direction.CLOCKWISE)
            conn.sampled_gap = pend.sampled_gap

    # ------------------------------------------------------------------
    # connection table updates

    def _commit(self, peer: int, edge, conn_type: int, tas: list[str], *,
                req_token: int, initiated_by_me: bool) -> Connection:
        label = label_for(conn_type)
        now = self.host.now()
        conn = self.table.get(peer)
        if conn is None:
            conn = Connection(peer, edge, {label}, list(tas), now, now,
                              initiated_by_me=initiated_by_me)
            self.table.add(conn)
        else:
            conn.edge = edge
            conn.roles.add(label)
            conn.last_seen = now
            conn.initiated_by_me = conn.initiated_by_me or initiated_by_me
            for ta in tas:
                if ta not in conn.peer_tas:
                    conn.peer_tas.append(ta)
        edge.peer_address = peer
        pend = self.pending_requests.pop(req_token, None) if req_token else None
        if pend is not None and pend.kind == "shortcut" and label == SHORTCUT:
            conn.initiated_shortcut = True
            conn.shortcut_offset = directed_distance(self.address, peer,
                                                     Direction.CLOCKWISE)
            conn.sampled_gap = pend.sampled_gap
        self._trace("commit", peer, label)
        self.stats["connections_established"] += 1
        if label == NEAR:
            self._near_changed()
        return conn

    def _drop_connection(self, peer: int, *, notify: bool, reason: str) -> None:
        conn = self.table.remove(peer)
        if conn is None:
            return
        if notify:
            try:
                conn.edge.send(encode(make_link(
                    self.address, peer, PAYLOAD_LINK,
                    messages.encode_close(CloseMessage()))))
            except Exception:  # edge may already be dead
                pass
        conn.edge.close()
        for token, probe in list(self.pending_probes.items()):
            if probe["peer"] == peer:
                if probe["timer"] is not None:
                    probe["timer"].cancel()
                del self.pending_probes[token]
        self._trace("drop", peer, reason)
        self.stats["connections_dropped"] += 1
        if NEAR in conn.roles:
            self._near_changed()

    def _near_changed(self) -> None:
        self.sides_converged = False
        if self.table.with_role(NEAR):
            if self._first_near_tick is None:
                self._first_near_tick = self._tick_count
            if not self.joined:
                self._join_succeeded()
        self._push_status_soon()

    # ------------------------------------------------------------------
    # neighbor lists and ring zipping

    def _neighbor_listing(self) -> tuple[tuple[int, tuple[str, ...]], ...]:
        seen: dict[int, tuple[str, ...]] = {}
        for direction in Direction:
            for c in self.table.near_sorted(direction)[: self.cfg.near_per_side]:
                if c.peer not in seen:
                    seen[c.peer] = tuple(c.peer_tas[:3])
        return tuple(seen.items())

    def _side_of(self, a: int) -> Direction:
        if directed_distance(self.address, a, Direction.CLOCKWISE) <= HALF_MODULUS:
            return Direction.CLOCKWISE
        return Direction.COUNTERCLOCKWISE

    def _strict_side(self, direction: Direction) -> list[Connection]:
        conns = [c for c in self.table.with_role(NEAR)
                 if self._side_of(c.peer) is direction]
        conns.sort(key=lambda c: directed_distance(self.address, c.peer, direction))
        return conns

    def _near_candidate(self, a: int) -> bool:
        direction = self._side_of(a)
        side = self._strict_side(direction)
        if len(side) < self.cfg.near_per_side:
            return True
        worst = directed_distance(self.address, side[self.cfg.near_per_side - 1].peer,
                                  direction)
        return directed_distance(self.address, a, direction) < worst

    def _process_status(self, conn: Connection, neighbors) -> None:
        conn.last_seen = self.host.now()
        conn.last_neighbors = tuple(neighbors)
        if not self.joined:
            return
        dialing = self._dialing_addrs()
        for a, tas in neighbors:
            if a == self.address or not tas:
                continue
            if self.table.get(a) is not None or a in dialing:
                continue
            if self._near_candidate(a):
                self.initiate_link(list(tas), CT_NEAR, expect_addr=a)
                dialing.add(a)

    def _push_status_soon(self) -> None:
        if self._push_timer is not None or not self.alive:
            return
        self._push_timer = self.host.call_later(
            self.cfg.push_status_debounce, self._push_status)

    def _push_status(self) -> None:
        self._push_timer = None
        if not self.alive:
            return
        listing = self._neighbor_listing()
        for c in self.table.with_role(NEAR):
            msg = StatusMessage(messages.STATUS_REQUEST, self._next_token(), listing)
            c.edge.send(encode(make_link(self.address, c.peer, PAYLOAD_STATUS,
                                         messages.encode_status(msg))))

    # ------------------------------------------------------------------
    # routed packets

    def adjacency(self) -> list[int]:
        return self.table.structured_peers()

    def originate(self, pkt: Packet) -> None:
        if self.table.structured_peers():
            self._route_packet(pkt, prev=None)
            return
        leafs = self.table.with_role(LEAF)
        if leafs:
            leafs[0].edge.send(encode(pkt))
        else:
            self.stats["unroutable"] += 1

    def _route_packet(self, pkt: Packet, prev: int | None) -> None:
        hdr = pkt.header
        adj = self.adjacency()
        if hdr.source != self.address:
            # A packet never revisits its source; this also keeps requests
            # from chasing a stale entry for a node that died and rejoined
            # under the same address.
            adj = [a for a in adj if a != hdr.source]
        direction = direction_of(hdr.destination)
        if direction is not None:
            decision = routing.directional_next_hop(
                self.address, adj, direction, hdr.hops, hdr.ttl)
        elif (hdr.payload_type == PAYLOAD_CONNECT
              and messages.peek_connect_type(pkt.payload) in (CT_NEAR, CT_LEAF)):
            decision = routing.annealing_next_hop(self.address, adj, prev,
                                                  hdr.destination)
        else:
            decision = routing.greedy_next_hop(self.address, adj, prev,
                                               hdr.destination)
        self._trace("route", hdr.destination, decision.kind.value, decision.next_hop)
        if decision.kind is DecisionKind.FORWARD:
            self._forward(pkt, decision.next_hop)
        elif decision.kind is DecisionKind.DELIVER_LOCAL:
            self._deliver_local(pkt)
        elif decision.kind is DecisionKind.DELIVER_AND_FORWARD:
            self._deliver_local(pkt)
            self._forward(pkt, decision.next_hop)
        else:
            self.stats["dropped_packets"] += 1

    def _forward(self, pkt: Packet, next_hop: int) -> None:
        advanced = advance_hop(pkt)
        if advanced is None:
            self.stats["expired_packets"] += 1
            return
        conn = self.table.get(next_hop)
        if conn is None:
            self.stats["forward_no_edge"] += 1
            return
        conn.edge.send(encode(advanced))

    def _deliver_local(self, pkt: Packet) -> None:
        ptype = pkt.header.payload_type
        if ptype == PAYLOAD_CONNECT:
            try:
                body = messages.decode_connect_body(pkt.payload)
            except messages.MessageError as exc:
                log.debug("bad connect body: %s", exc)
                self.stats["bad_body"] += 1
                return
            if isinstance(body, bytes):
                self._relay_to_leaf(body)
            elif body.kind == messages.CONNECT_REQUEST:
                self._handle_connect_request(body)
            else:
                self._handle_connect_response(body)
        elif ptype == PAYLOAD_APP:
            if self.app_handler is not None:
                self.app_handler(self, pkt)
            self.stats["app_delivered"] += 1

    # ------------------------------------------------------------------
    # routed connection requests

    def send_connect_request(self, target: int, conn_type: int, *,
                             kind: str, probe_dir: Direction | None = None,
                             depth: int = 0, sampled_gap: int | None = None,
                             ttl: int | None = None,
                             expires_in: float | None = None) -> int:
        token = self._next_token()
        timeout = self.cfg.connreq_timeout if expires_in is None else expires_in
        self.pending_requests[token] = _PendingRequest(
            kind, self.host.now() + timeout,
            probe_dir=probe_dir, depth=depth, sampled_gap=sampled_gap)
        req = ConnectionRequest(messages.CONNECT_REQUEST, token, self.address,
                                conn_type, tuple(self.advertised_tas()))
        pkt = make_routed(self.address, target, PAYLOAD_CONNECT,
                          messages.encode_connect(req),
                          ttl=self.cfg.default_ttl if ttl is None else ttl)
        self.originate(pkt)
        self.stats["connect_requests"] += 1
        return token

    def _handle_connect_request(self, body: ConnectionRequest) -> None:
        if body.sender == self.address:
            self.pending_requests.pop(body.token, None)
            return
        conn = self.table.get(body.sender)
        if conn is not None and self._peer_moved(conn, body.transport_addresses):
            # Same address, different endpoints: the peer died and came
            # back; the edge we hold leads nowhere.
            self._drop_connection(conn.peer, notify=False, reason="peer moved")
            conn = None
        if conn is not None:
            label = label_for(body.conn_type)
            if label not in conn.roles:
                conn.roles.add(label)
                if label == NEAR:
                    self._near_changed()
            conn.edge.send(encode(make_link(
                self.address, body.sender, PAYLOAD_LINK,
                messages.encode_role(RoleChange(body.token, body.conn_type)))))
            return
        if body.sender not in self._dialing_addrs():
            self.initiate_link(list(body.transport_addresses), body.conn_type,
                               expect_addr=body.sender, req_token=body.token)
        resp = ConnectionRequest(messages.CONNECT_RESPONSE, body.token,
                                 self.address, body.conn_type,
                                 tuple(self.advertised_tas()))
        resp_pkt = make_routed(self.address, body.sender, PAYLOAD_CONNECT,
                               messages.encode_connect(resp),
                               ttl=self.cfg.default_ttl)
        if body.via and body.via != self.address:
            # The requester is not routable yet; courier the response to
            # its proxy, which hands it down the leaf edge.
            self.originate(make_routed(
                self.address, body.via, PAYLOAD_CONNECT,
                messages.encode_relay(encode(resp_pkt)),
                ttl=self.cfg.default_ttl))
        else:
            self.originate(resp_pkt)

    def _peer_moved(self, conn: Connection, advertised) -> bool:
        # A datagram edge's remote TA is the peer's canonical endpoint, so
        # a mismatch against the freshly advertised list means the peer
        # came back on new endpoints.  Accepted TCP edges carry ephemeral
        # ports that never match a listener, and dead TCP sockets announce
        # themselves anyway, so they are exempt.
        if not advertised or conn.edge.remote_ta in advertised:
            return False
        if ".tcp:" in conn.edge.remote_ta and not getattr(conn.edge, "dialed", True):
            return False
        return True

    def _relay_to_leaf(self, inner: bytes) -> None:
        """Hand a couriered packet to the leaf peer it is addressed to."""
        try:
            pkt = decode(inner)
        except PacketError:
            self.stats["bad_body"] += 1
            return
        dest = pkt.header.destination
        if dest == self.address:
            self._deliver_local(pkt)
            return
        conn = self.table.get(dest)
        if conn is not None and LEAF in conn.roles:
            conn.edge.send(inner)
        else:
            self.stats["relay_no_leaf"] += 1

    def _handle_connect_response(self, body: ConnectionRequest) -> None:
        pend = self.pending_requests.get(body.token)
        if pend is None:
            return
        if self.table.get(body.sender) is not None:
            return
        if body.sender in self._dialing_addrs():
            return
        # The responder could not reach us; dial it ourselves.
        self.initiate_link(list(body.transport_addresses), body.conn_type,
                           expect_addr=body.sender, req_token=body.token)

    # ------------------------------------------------------------------
    # density estimate and shortcut sampling

    def estimate_d_ave(self) -> int:
        """Mean clockwise gap seen across self and the near neighborhood."""
        est = self._gap_estimate()
        if est is None:
            raise NotReady("need at least one near connection per side")
        return est

    def _gap_estimate(self) -> int | None:
        spans = 0
        count = 0
        for direction in Direction:
            ordered = self.table.near_sorted(direction)[: self.cfg.near_per_side]
            if not ordered:
                return None
            spans += directed_distance(self.address, ordered[-1].peer, direction)
            count += len(ordered)
        return max(1, spans // count)

    def _update_gap_ewma(self) -> None:
        est = self._gap_estimate()
        if est is None:
            return
        if self.gap_ewma is None:
            self.gap_ewma = float(est)
        else:
            a = self.cfg.gap_ewma_alpha
            self.gap_ewma = (1 - a) * self.gap_ewma + a * est

    def _target_k(self) -> int:
        if self.cfg.k_shortcuts is not None:
            return self.cfg.k_shortcuts
        if self.gap_ewma is None:
            return 0
        n_est = max(2.0, D_MAX / self.gap_ewma)
        return max(1, min(self.cfg.k_max, math.ceil(math.log2(n_est))))

    # ------------------------------------------------------------------
    # maintenance pass

    def tick(self) -> None:
        if not self.alive:
            return
        self._tick_count += 1
        now = self.host.now()
        self._expire_pending(now)
        self._probe_stale(now)
        if self.joined:
            self._update_gap_ewma()
            self._leaf_teardown()
            self._near_repair(now)
            self._trim_near(now)
            self._maintain_shortcuts(now)
            if (self.established_at is None and self.sides_converged
                    and (self._target_k() == 0
                         or self.table.initiated_shortcuts())):
                self.established_at = now
        self._tick_timer = self.host.call_later(self.cfg.tick_interval, self.tick)

    def _expire_pending(self, now: float) -> None:
        for token, pend in list(self.pending_requests.items()):
            if pend.expires <= now:
                del self.pending_requests[token]
        for key, prov in list(self.provisional.items()):
            if prov.expires <= now:
                del self.provisional[key]

    def _probe_stale(self, now: float) -> None:
        if self.cfg.status_interval is None:
            return
        probing = {p["peer"] for p in self.pending_probes.values()}
        for conn in list(self.table.by_peer.values()):
            if conn.peer in probing:
                continue
            if now - conn.last_seen > self.cfg.status_interval:
                self._send_probe(conn)

    def _send_probe(self, conn: Connection) -> None:
        token = self._next_token()
        rec = {"peer": conn.peer, "retries": self.cfg.probe_retries,
               "backoff": self.cfg.probe_timeout, "timer": None}
        self.pending_probes[token] = rec
        self._probe_send(token)

    def _probe_send(self, token: int) -> None:
        rec = self.pending_probes.get(token)
        if rec is None:
            return
        conn = self.table.get(rec["peer"])
        if conn is None:
            self.pending_probes.pop(token, None)
            return
        msg = StatusMessage(messages.STATUS_REQUEST, token, self._neighbor_listing())
        conn.edge.send(encode(make_link(self.address, conn.peer, PAYLOAD_STATUS,
                                        messages.encode_status(msg))))
        rec["timer"] = self.host.call_later(
            rec["backoff"], lambda: self._probe_timeout(token))

    def _probe_timeout(self, token: int) -> None:
        rec = self.pending_probes.get(token)
        if rec is None:
            return
        rec["retries"] -= 1
        if rec["retries"] > 0:
            rec["backoff"] *= 2
            self._probe_send(token)
            return
        self.pending_probes.pop(token, None)
        self.stats["probe_deaths"] += 1
        self._drop_connection(rec["peer"], notify=False, reason="probe timeout")

    def _leaf_teardown(self) -> None:
        if self._first_near_tick is None:
            return
        if self._tick_count - self._first_near_tick < self.cfg.leaf_grace_ticks:
            return
        for conn in self.table.with_role(LEAF):
            if conn.is_structured():
                conn.roles.discard(LEAF)
            elif conn.initiated_by_me:
                self._drop_connection(conn.peer, notify=True, reason="leaf done")

    # -- near repair ----------------------------------------------------

    def _known_neighborhood(self) -> dict[int, tuple[str, ...]]:
        """Structured peers plus everyone the near peers last listed."""
        known: dict[int, tuple[str, ...]] = {}
        for conn in self.table.by_peer.values():
            if conn.is_structured():
                known[conn.peer] = tuple(conn.peer_tas[:3])
        for conn in self.table.with_role(NEAR):
            for a, tas in conn.last_neighbors:
                if a != self.address and a not in known:
                    known[a] = tuple(tas)
        return known

    def _near_repair(self, now: float) -> None:
        near = self.table.with_role(NEAR)
        if not near:
            leafs = self.table.with_role(LEAF)
            if self._has_pending("anchor", None):
                return
            if leafs:
                self._send_join_request(leafs[0])
            elif self.table.structured_peers():
                self.send_connect_request(self.address, CT_NEAR, kind="anchor")
            return

        known = self._known_neighborhood()
        k = self.cfg.near_per_side
        slots = min(k, len(known))
        horizon = (self.cfg.repair_horizon_gaps * self.gap_ewma
                   if self.gap_ewma else None)
        dialing = None
        converged = True
        for direction in Direction:
            ordered = sorted(known,
                             key=lambda a: directed_distance(self.address, a, direction))
            satisfied = True
            acted = False
            for a in ordered[:slots]:
                conn = self.table.get(a)
                if conn is not None and NEAR in conn.roles:
                    continue
                satisfied = False
                if conn is not None:
                    # Linked for another role; claim it as a ring neighbor.
                    conn.roles.add(NEAR)
                    self._near_changed()
                    conn.edge.send(encode(make_link(
                        self.address, a, PAYLOAD_LINK,
                        messages.encode_role(RoleChange(0, CT_NEAR)))))
                    continue
                if acted:
                    continue
                dist = directed_distance(self.address, a, direction)
                plausible = horizon is None or dist <= horizon
                if plausible and known[a]:
                    if dialing is None:
                        dialing = self._dialing_addrs()
                    if a not in dialing:
                        self.initiate_link(list(known[a]), CT_NEAR, expect_addr=a)
                        dialing.add(a)
                    acted = True
                else:
                    self._discover(direction)
                    acted = True
            converged = converged and satisfied
        self.sides_converged = converged

    def _has_pending(self, kind: str, direction: Direction | None) -> bool:
        for pend in self.pending_requests.values():
            if pend.kind == kind and (direction is None
                                      or pend.probe_dir is direction):
                return True
        return False

    def _discover(self, direction: Direction) -> None:
        """Find unknown ring neighbors: walk the ring a bounded number of
        hops in the deficient direction, or re-anchor around our own
        address when that side is entirely dark."""
        strict = self._strict_side(direction)
        if strict and len(strict) <= self.cfg.near_per_side:
            if self._has_pending("probe", direction):
                return
            depth = min(len(strict), self.cfg.near_per_side) + 1
            self.send_connect_request(
                directional_address(direction), CT_NEAR, kind="probe",
                probe_dir=direction, depth=depth, ttl=depth,
                expires_in=self.cfg.tick_interval * 0.9)
        else:
            if self._has_pending("anchor", None):
                return
            self.send_connect_request(self.address, CT_NEAR, kind="anchor")

    def _trim_near(self, now: float) -> None:
        near = self.table.with_role(NEAR)
        if len(near) <= self.cfg.near_per_side:
            return
        keep = self.table.near_keep_set()
        for conn in near:
            if conn.peer in keep:
                continue
            if now - conn.established_at < self.cfg.tick_interval:
                continue
            if SHORTCUT in conn.roles or LEAF in conn.roles:
                conn.roles.discard(NEAR)
                self._near_changed()
            else:
                self._drop_connection(conn.peer, notify=True, reason="trim")
            self.stats["near_trimmed"] += 1

    # -- shortcut upkeep --------------------------------------------------

    def _maintain_shortcuts(self, now: float) -> None:
        k = self._target_k()
        if k <= 0 or not self.sides_converged or self.gap_ewma is None:
            return
        mine = self.table.initiated_shortcuts()
        pending = sum(1 for p in self.pending_requests.values()
                      if p.kind == "shortcut")
        if len(mine) > k:
            victim = max(mine, key=lambda c: c.established_at)
            self._demote_shortcut(victim)
            return
        if len(mine) + pending < k:
            gap = max(1, int(self.gap_ewma))
            d = sample_shortcut_distance(gap, self.rng)
            target = (self.address + d) % MODULUS
            self.send_connect_request(target, CT_SHORTCUT, kind="shortcut",
                                      sampled_gap=gap)
            return
        if pending == 0:
            self._refresh_stale_shortcut(mine)

    def _refresh_stale_shortcut(self, mine: list[Connection]) -> None:
        # A shortcut goes stale when the local density has drifted far
        # from the estimate it was sampled under.  The realized offset is
        # left alone: landing nearer than the sampled distance is normal
        # closest-node resolution, not a contract violation.
        factor = self.cfg.shortcut_stale_factor
        gap = self.gap_ewma
        for conn in sorted(mine, key=lambda c: c.established_at):
            sampled = conn.sampled_gap
            if sampled is not None and (sampled > gap * factor
                                        or sampled * factor < gap):
                self._demote_shortcut(conn)
                self.stats["shortcut_refreshed"] += 1
                return

    def _demote_shortcut(self, conn: Connection) -> None:
        conn.initiated_shortcut = False
        conn.shortcut_offset = None
        conn.sampled_gap = None
        if NEAR in conn.roles or LEAF in conn.roles:
            conn.roles.discard(SHORTCUT)
        else:
            self._drop_connection(conn.peer, notify=True, reason="shortcut refresh")
