"""Declarative experiments over the simulator.

A ``Scenario`` is an ordered list of phases (bootstrap, wait, massive
join, massive failure, churn, ring merge) plus a measurement interval.
Running one produces a ``SimTrace``: per-interval metric rows, topology
snapshots, and the network's message counters.  Runs are deterministic
for a fixed (scenario, seed) pair; rerunning writes byte-identical CSV.

Departures here are always abrupt: a node's endpoints vanish and every
edge it held dies silently; rejoining nodes keep their address by
default and bootstrap again through a random live proxy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from random import Random

from .address import random_class0
from .connections import LEAF, NEAR, SHORTCUT
from .metrics import (
    NEAR_LABEL,
    SHORTCUT_LABEL,
    TopologySnapshot,
    missing_edges,
    ring_correct,
    routability,
    write_snapshot,
)
from .node import NodeState, OverlayConfig
from .simnet import SimConfig, SimNetwork
from . import topology


class ScenarioInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Bootstrap:
    n: int
    spacing: float = 0.5


@dataclass(frozen=True)
class Wait:
    seconds: float


@dataclass(frozen=True)
class MassiveJoin:
    n: int


@dataclass(frozen=True)
class MassiveFail:
    count: int | None = None
    fraction: float | None = None


@dataclass(frozen=True)
class Churn:
    duration: float
    p_leave: float


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    settle: float = 5.0


@dataclass
class Scenario:
    phases: list
    measurement_interval: float = 2.0
    pair_budget: int = 1000
    rejoin_fresh_address: bool = False

    def validate(self) -> None:
        if self.measurement_interval <= 0:
            raise ScenarioInvalid("measurement_interval must be positive")
        for phase in self.phases:
            if isinstance(phase, (Bootstrap, MassiveJoin)) and phase.n < 1:
                raise ScenarioInvalid("population phases need n >= 1")
            if isinstance(phase, Churn) and not 0.0 <= phase.p_leave < 1.0:
                raise ScenarioInvalid("churn probability must be in [0, 1)")
            if isinstance(phase, Churn) and phase.duration <= 0:
                raise ScenarioInvalid("churn duration must be positive")
            if isinstance(phase, Merge) and (phase.left < 1 or phase.right < 1):
                raise ScenarioInvalid("merge ring sizes must be >= 1")
            if isinstance(phase, MassiveFail):
                if (phase.count is None) == (phase.fraction is None):
                    raise ScenarioInvalid("massive_fail needs count or fraction")
                if phase.fraction is not None and not 0.0 < phase.fraction < 1.0:
                    raise ScenarioInvalid("massive_fail fraction must be in (0,1)")


def churn_events(node_ids: list[int], p_leave: float, duration: float,
                 rng: Random) -> list[tuple[int, int]]:
    """Per-second Bernoulli departures for every node, as (second, id).

    Each node departs in any given second with probability p_leave and
    rejoins immediately, so realized session lengths are geometric with
    mean 1/p_leave seconds (the discrete analogue of exponential session
    times).
    """
    events: list[tuple[int, int]] = []
    for second in range(1, int(duration) + 1):
        for nid in node_ids:
            if rng.random() < p_leave:
                events.append((second, nid))
    return events


def take_snapshot(nodes: list[NodeState], timestamp: float) -> TopologySnapshot:
    """Freeze the live population's view into a checkable snapshot.

    Near and leaf edges are exported undirected (present if either side
    holds them); shortcut edges are exported oriented, requester first.
    """
    live = sorted(n.address for n in nodes)
    edges: set[tuple[int, int, str]] = set()
    for node in nodes:
        for conn in node.table.by_peer.values():
            if NEAR in conn.roles:
                a, b = sorted((node.address, conn.peer))
                edges.add((a, b, NEAR_LABEL))
            if SHORTCUT in conn.roles and conn.initiated_shortcut:
                edges.add((node.address, conn.peer, SHORTCUT_LABEL))
            if LEAF in conn.roles:
                a, b = sorted((node.address, conn.peer))
                edges.add((a, b, LEAF))
    return TopologySnapshot(timestamp, tuple(live), tuple(sorted(edges)))


@dataclass
class TraceRow:
    simulated_time_s: float
    live_nodes: int
    routability: float
    ring_correct_fraction: float
    missing_edges: int
    mean_hops: float


CSV_HEADER = ("simulated_time_s,live_nodes,routability,"
              "ring_correct_fraction,missing_edges,mean_hops")


@dataclass
class SimTrace:
    rows: list[TraceRow] = field(default_factory=list)
    snapshots: list[TopologySnapshot] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    join_durations: list[float] = field(default_factory=list)
    # Time from join start to a held ring position plus first shortcut.
    establish_durations: list[float] = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in self.rows:
                fh.write(f"{r.simulated_time_s:.3f},{r.live_nodes},"
                         f"{r.routability:.6f},{r.ring_correct_fraction:.6f},"
                         f"{r.missing_edges},{r.mean_hops:.3f}\n")

    def write_snapshots(self, directory: str, dot: bool = False) -> list[str]:
        from .metrics import to_dot
        os.makedirs(directory, exist_ok=True)
        paths = []
        for snap in self.snapshots:
            base = os.path.join(directory, f"snapshot_{snap.timestamp:012.3f}")
            write_snapshot(snap, base + ".snap")
            paths.append(base + ".snap")
            if dot:
                with open(base + ".dot", "w", encoding="utf-8") as fh:
                    fh.write(to_dot(snap))
        return paths


@dataclass
class _Handle:
    node_id: int
    address: int
    host: object
    node: NodeState
    alive: bool = True


class ScenarioRunner:
    def __init__(self, scenario: Scenario, config: SimConfig,
                 overlay: OverlayConfig | None = None) -> None:
        scenario.validate()
        self.scenario = scenario
        self.config = config
        self.network = SimNetwork(config)
        self.overlay = overlay or OverlayConfig(tick_interval=config.tick_interval)
        self.rng = Random((config.seed << 1) ^ 0x5CE)
        self.metrics_seed = config.seed ^ 0xA17
        self.handles: dict[int, _Handle] = {}
        self._next_id = 0
        self._addresses: set[int] = set()
        self.trace = SimTrace()
        self._next_measure = 0.0

    # -- population -------------------------------------------------------

    def live_nodes(self) -> list[NodeState]:
        return [h.node for h in self.handles.values() if h.alive]

    def _new_address(self) -> int:
        while True:
            a = random_class0(self.rng)
            if a not in self._addresses:
                self._addresses.add(a)
                return a

    def _pick_proxy(self, exclude: int | None = None) -> _Handle | None:
        ready = [h for h in self.handles.values()
                 if h.alive and h.node.joined and h.node_id != exclude]
        if not ready:
            ready = [h for h in self.handles.values()
                     if h.alive and h.node_id != exclude]
        if not ready:
            return None
        return ready[self.rng.randrange(len(ready))]

    def _spawn(self, address: int | None = None, node_id: int | None = None,
               proxy_ta: str | None = None) -> _Handle:
        if node_id is None:
            node_id = self._next_id
            self._next_id += 1
        if address is None:
            address = self._new_address()
        host = self.network.new_host()
        node = NodeState(address, host, self.overlay,
                         Random(self.rng.getrandbits(64)))
        host.attach(node)
        handle = _Handle(node_id, address, host, node)
        self.handles[node_id] = handle
        node.on_joined = lambda n: self._record_join(n)
        node.on_join_failed = lambda n, reason: self._rejoin_later(node_id)
        if proxy_ta is None:
            proxy = self._pick_proxy(exclude=node_id)
            proxy_ta = proxy.host.ta if proxy is not None else None
        if proxy_ta is None:
            node.joined = True  # genesis node anchors the ring
        else:
            node.start_join(proxy_ta)
        return handle

    def _record_join(self, node: NodeState) -> None:
        if node.join_started_at is not None and node.joined_at is not None:
            self.trace.join_durations.append(node.joined_at - node.join_started_at)

    def _rejoin_later(self, node_id: int) -> None:
        self.network.call_later(1.0, lambda: self._respawn(node_id))

    def _respawn(self, node_id: int) -> None:
        handle = self.handles.get(node_id)
        if handle is None or not handle.alive:
            return
        handle.host.shutdown()
        address = (self._new_address() if self.scenario.rejoin_fresh_address
                   else handle.address)
        self.handles.pop(node_id, None)
        self._spawn(address=address, node_id=node_id)

    def _harvest_establish(self, handle: _Handle) -> None:
        node = handle.node
        if node.join_started_at is not None and node.established_at is not None:
            self.trace.establish_durations.append(
                node.established_at - node.join_started_at)

    def _kill(self, node_id: int, rejoin: bool) -> None:
        handle = self.handles.pop(node_id, None)
        if handle is None:
            return
        self._harvest_establish(handle)
        handle.alive = False
        handle.host.shutdown()
        if rejoin:
            address = (self._new_address() if self.scenario.rejoin_fresh_address
                       else handle.address)
            self._spawn(address=address, node_id=node_id)

    # -- measurement ------------------------------------------------------

    def _measure(self) -> None:
        nodes = self.live_nodes()
        now = self.network.now
        snap = take_snapshot(nodes, now)
        if len(snap.nodes) == 0:
            return
        report = routability(snap, self.scenario.pair_budget, seed=self.metrics_seed)
        _, correct = ring_correct(snap, self.overlay.near_per_side)
        self.trace.rows.append(TraceRow(
            now, len(snap.nodes), report.routability, correct,
            missing_edges(snap, self.overlay.near_per_side), report.mean_hops))
        self.trace.snapshots.append(snap)

    def _advance(self, duration: float) -> None:
        end = self.network.now + duration
        while True:
            if self._next_measure <= end + 1e-9:
                self.network.run_until(self._next_measure)
                self._measure()
                self._next_measure += self.scenario.measurement_interval
            else:
                self.network.run_until(end)
                return

    # -- phases -------------------------------------------------------------

    def _run_bootstrap(self, phase: Bootstrap) -> None:
        for _ in range(phase.n):
            self._spawn()
            self._advance(phase.spacing)

    def _run_massive_join(self, phase: MassiveJoin) -> None:
        for _ in range(phase.n):
            self._spawn()

    def _run_massive_fail(self, phase: MassiveFail) -> None:
        live = sorted(nid for nid, h in self.handles.items() if h.alive)
        count = phase.count
        if count is None:
            count = int(round(phase.fraction * len(live)))
        if count >= len(live):
            raise ScenarioInvalid(f"cannot fail {count} of {len(live)} nodes")
        for nid in self.rng.sample(live, count):
            self._kill(nid, rejoin=False)

    def _run_churn(self, phase: Churn) -> None:
        ids = sorted(nid for nid, h in self.handles.items() if h.alive)
        events = churn_events(ids, phase.p_leave, phase.duration, self.rng)
        cursor = 0
        start = self.network.now
        for second in range(1, int(phase.duration) + 1):
            self._advance((start + second) - self.network.now)
            while cursor < len(events) and events[cursor][0] <= second:
                nid = events[cursor][1]
                cursor += 1
                if nid in self.handles and self.handles[nid].alive:
                    self._kill(nid, rejoin=True)

    def _run_merge(self, phase: Merge) -> None:
        if self.handles:
            raise ScenarioInvalid("merge must start from an empty population")
        sides = []
        for size in (phase.left, phase.right):
            seeded = topology.seed_ring(self.network, size, self.rng, self.overlay)
            for addr, node in seeded.items():
                self._addresses.add(addr)
                handle = _Handle(self._next_id, addr, node.host, node)
                self.handles[self._next_id] = handle
                self._next_id += 1
            sides.append(seeded)
        self._advance(phase.settle)
        left_proxy = next(iter(sides[0].values()))
        right_proxy = next(iter(sides[1].values()))
        bridge = self._spawn(proxy_ta=left_proxy.host.ta)
        bridge.node.add_bootstrap(right_proxy.host.ta)

    # -- entry point --------------------------------------------------------

    def run(self) -> SimTrace:
        self._next_measure = self.network.now
        for phase in self.scenario.phases:
            if isinstance(phase, Bootstrap):
                self._run_bootstrap(phase)
            elif isinstance(phase, Wait):
                self._advance(phase.seconds)
            elif isinstance(phase, MassiveJoin):
                self._run_massive_join(phase)
            elif isinstance(phase, MassiveFail):
                self._run_massive_fail(phase)
            elif isinstance(phase, Churn):
                self._run_churn(phase)
            elif isinstance(phase, Merge):
                self._run_merge(phase)
            else:
                raise ScenarioInvalid(f"unknown phase {phase!r}")
        self._measure()
        for handle in self.handles.values():
            if handle.alive:
                self._harvest_establish(handle)
        self.trace.counters = dict(self.network.stats)
        return self.trace


def run(scenario: Scenario, config: SimConfig,
        overlay: OverlayConfig | None = None) -> SimTrace:
    return ScenarioRunner(scenario, config, overlay).run()
