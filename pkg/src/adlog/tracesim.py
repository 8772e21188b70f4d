"""Deterministic packet-level simulator emitting ns-2 style traces.

Each flow is a constant-rate source with optional seeded jitter on its
inter-packet gaps. Every packet produces an enqueue and a dequeue event at the
sending node and a receive event at the next hop. Links are point-to-point
FIFO queues with a fixed bandwidth and propagation delay.

A hidden channel joins two nodes that sit behind different gateways. Packets
sourced by either member travel over the hidden link to the other member
instead of to their declared server; the packet's destination address still
names the declared server.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .trace import NO_FLAGS, EventKind, TraceEvent

PROTOCOLS = ("udp", "tcp", "http")
ACK_SIZE = 40
ACK_FLAGS = "---A---"
ARP_SIZE = 28
MAX_PACKET_ID = 2**31 - 1
TIME_DECIMALS = 6


class ScenarioError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowSpec:
    src: int
    dst: int
    protocol: str = "udp"
    packet_size: int = 1500
    rate: float = 1.0e6
    start: float = 0.0
    stop: float = math.inf

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ScenarioError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.packet_size <= 0:
            raise ScenarioError("packet_size must be positive")
        if self.rate <= 0:
            raise ScenarioError("rate must be positive")
        if not self.start < self.stop:
            raise ScenarioError("flow start must precede stop")
        if self.src == self.dst:
            raise ScenarioError(f"flow source and destination are both node {self.src}")

    @property
    def interval(self) -> float:
        return self.packet_size * 8 / self.rate


@dataclass(frozen=True)
class HiddenChannel:
    pair: tuple[int, int]

    @property
    def redirect(self) -> dict[int, int]:
        """Collaborator node -> node its traffic is delivered to."""
        a, b = self.pair
        return {a: b, b: a}

    def to_dict(self) -> dict:
        return {"pair": list(self.pair)}


@dataclass
class ScenarioConfig:
    nodes: int = 16
    gateways: list[list[int]] = field(default_factory=list)
    flows: list[FlowSpec] = field(default_factory=list)
    hidden_pair: tuple[int, int] | None = None
    seed: int = 0
    duration: float = 1.0
    jitter: float = 0.01
    bandwidth: float = 1.0e7
    delay: float = 0.001
    control_packets: bool = True

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        flows = [f if isinstance(f, FlowSpec) else FlowSpec(**f) for f in data.pop("flows", [])]
        pair = data.pop("hidden_pair", None)
        link = data.pop("link", None) or {}
        cfg = cls(flows=flows, hidden_pair=tuple(pair) if pair is not None else None, **data)
        if "bandwidth" in link:
            cfg.bandwidth = float(link["bandwidth"])
        if "delay" in link:
            cfg.delay = float(link["delay"])
        return cfg

    def to_dict(self) -> dict:
        flows = []
        for f in self.flows:
            d = {"src": f.src, "dst": f.dst, "protocol": f.protocol,
                 "packet_size": f.packet_size, "rate": f.rate, "start": f.start}
            if math.isfinite(f.stop):
                d["stop"] = f.stop
            flows.append(d)
        return {
            "nodes": self.nodes,
            "gateways": [list(g) for g in self.gateways],
            "flows": flows,
            "hidden_pair": list(self.hidden_pair) if self.hidden_pair else None,
            "seed": self.seed,
            "duration": self.duration,
            "jitter": self.jitter,
            "link": {"bandwidth": self.bandwidth, "delay": self.delay},
            "control_packets": self.control_packets,
        }


@dataclass(frozen=True)
class Topology:
    nodes: int
    gateway_of: dict[int, int]
    flows: tuple[FlowSpec, ...]
    hidden: HiddenChannel | None
    jitter: float
    bandwidth: float
    delay: float
    control_packets: bool

    def hop(self, src: int, dst: int) -> int:
        if self.hidden is not None and src in self.hidden.redirect:
            return self.hidden.redirect[src]
        return dst


@dataclass
class TraceLog:
    events: list[TraceEvent]
    attack_present: bool
    ground_truth: HiddenChannel | None = None


# Flows of the default 16-node scenario: every pair stays behind one gateway.
# Node 15 is idle unless it collaborates with node 14.
DEFAULT_FLOWS = ((14, 2), (0, 12), (4, 6), (8, 10), (1, 3), (5, 7), (9, 11), (13, 11))
DEFAULT_GATEWAYS = [list(range(0, 16, 2)), list(range(1, 16, 2))]


def default_scenario(duration: float, seed: int = 0, attack: bool = True,
                     jitter: float = 0.01) -> ScenarioConfig:
    """The 16-node, 8 UDP pair network; ``attack`` adds the (14, 15) hidden pair."""
    interval = 1500 * 8 / 1.0e6
    flows = [
        FlowSpec(src=s, dst=d, protocol="udp", packet_size=1500, rate=1.0e6,
                 start=round(i * interval / len(DEFAULT_FLOWS), TIME_DECIMALS))
        for i, (s, d) in enumerate(DEFAULT_FLOWS)
    ]
    return ScenarioConfig(
        nodes=16,
        gateways=[list(g) for g in DEFAULT_GATEWAYS],
        flows=flows,
        hidden_pair=(14, 15) if attack else None,
        seed=seed,
        duration=duration,
        jitter=jitter,
    )


def build_topology(config: ScenarioConfig) -> Topology:
    if config.nodes < 2:
        raise ScenarioError("a topology needs at least two nodes")
    if not 0 <= config.jitter < 1:
        raise ScenarioError("jitter must lie in [0, 1)")
    if config.bandwidth <= 0 or config.delay < 0:
        raise ScenarioError("link bandwidth must be positive and delay non-negative")
    gateway_of: dict[int, int] = {}
    groups = config.gateways or [list(range(config.nodes))]
    for gw, members in enumerate(groups):
        for node in members:
            if not 0 <= node < config.nodes:
                raise ScenarioError(f"gateway {gw} lists unknown node {node}")
            if node in gateway_of:
                raise ScenarioError(f"node {node} assigned to gateways {gateway_of[node]} and {gw}")
            gateway_of[node] = gw
    missing = [n for n in range(config.nodes) if n not in gateway_of]
    if missing:
        raise ScenarioError(f"nodes without a gateway: {missing}")
    for f in config.flows:
        for node in (f.src, f.dst):
            if not 0 <= node < config.nodes:
                raise ScenarioError(f"flow {f.src}->{f.dst} references unknown node {node}")
    hidden = None
    if config.hidden_pair is not None:
        a, b = config.hidden_pair
        for node in (a, b):
            if not 0 <= node < config.nodes:
                raise ScenarioError(f"hidden pair references unknown node {node}")
        if a == b:
            raise ScenarioError("hidden pair needs two distinct nodes")
        if gateway_of[a] == gateway_of[b]:
            raise ScenarioError(f"hidden pair ({a}, {b}) sits behind a single gateway")
        hidden = HiddenChannel((a, b))
    return Topology(
        nodes=config.nodes,
        gateway_of=gateway_of,
        flows=tuple(config.flows),
        hidden=hidden,
        jitter=config.jitter,
        bandwidth=config.bandwidth,
        delay=config.delay,
        control_packets=config.control_packets,
    )


def packets_per_flow(flow: FlowSpec, duration: float) -> int:
    """Packets a jitter-free flow fits into ``[start, min(stop, duration))``.

    Each packet occupies one full interval of ``8 * packet_size / rate``
    seconds, counted on the grid of whole intervals: a start offset shorter
    than one interval is a phase and does not cost a packet. A flow starting
    at 0 sends ``floor(rate * duration / (8 * packet_size))`` packets.
    """
    end = min(flow.stop, duration)
    if end - flow.start <= 0:
        return 0
    interval = flow.interval
    phase = math.fmod(flow.start, interval)
    if phase > interval - 1e-9:
        phase = 0.0
    ratio = (end - (flow.start - phase)) / interval
    return max(0, math.floor(ratio + 1e-9))


@dataclass
class _Packet:
    pkt_id: int
    fid: int
    ptype: str
    size: int
    flags: str
    src: int
    dst: int
    hop_from: int
    hop_to: int
    seq: int
    ack_on_receive: bool = False
    reply_on_receive: bool = False


class _Simulator:
    def __init__(self, topo: Topology, seed: int, duration: float,
                 max_packet_id: int):
        self.topo = topo
        self.seed = seed
        self.duration = duration
        self.max_packet_id = max_packet_id
        self.heap: list = []
        self.order = 0
        self.next_pkt_id = 0
        self.events: list[TraceEvent] = []
        self.link_busy: dict[tuple[int, int], bool] = {}
        self.queues: dict[tuple[int, int], deque] = {}

    def schedule(self, time: float, action, *args) -> None:
        heapq.heappush(self.heap, (time, self.order, action, args))
        self.order += 1

    def new_packet(self, **kw) -> _Packet:
        if self.next_pkt_id > self.max_packet_id:
            raise SimulationError(f"packet id counter overflow past {self.max_packet_id}")
        pkt = _Packet(pkt_id=self.next_pkt_id, **kw)
        self.next_pkt_id += 1
        return pkt

    def emit(self, kind: EventKind, time: float, pkt: _Packet) -> None:
        self.events.append(TraceEvent(
            kind=kind,
            time=round(time, TIME_DECIMALS),
            from_node=pkt.hop_from,
            to_node=pkt.hop_to,
            ptype=pkt.ptype,
            size=pkt.size,
            flags=pkt.flags,
            fid=pkt.fid,
            src=(pkt.src, 0),
            dst=(pkt.dst, 0),
            seq=pkt.seq,
            pkt_id=pkt.pkt_id,
        ))

    def send(self, now: float, pkt: _Packet) -> None:
        self.emit(EventKind.ENQUEUE, now, pkt)
        link = (pkt.hop_from, pkt.hop_to)
        if self.link_busy.get(link):
            self.queues.setdefault(link, deque()).append(pkt)
        else:
            self.start_tx(now, pkt)

    def start_tx(self, now: float, pkt: _Packet) -> None:
        link = (pkt.hop_from, pkt.hop_to)
        self.link_busy[link] = True
        self.emit(EventKind.DEQUEUE, now, pkt)
        tx = pkt.size * 8 / self.topo.bandwidth
        self.schedule(now + tx, self.tx_done, link)
        self.schedule(now + tx + self.topo.delay, self.receive, pkt)

    def tx_done(self, now: float, link) -> None:
        queue = self.queues.get(link)
        if queue:
            self.start_tx(now, queue.popleft())
        else:
            self.link_busy[link] = False

    def receive(self, now: float, pkt: _Packet) -> None:
        self.emit(EventKind.RECEIVE, now, pkt)
        if pkt.ack_on_receive:
            ack = self.new_packet(
                fid=pkt.fid, ptype=pkt.ptype, size=ACK_SIZE, flags=ACK_FLAGS,
                src=pkt.hop_to, dst=pkt.src, hop_from=pkt.hop_to, hop_to=pkt.hop_from,
                seq=pkt.seq,
            )
            self.send(now, ack)
        if pkt.reply_on_receive:
            reply = self.new_packet(
                fid=pkt.fid, ptype="arp", size=ARP_SIZE, flags=NO_FLAGS,
                src=pkt.hop_to, dst=pkt.src, hop_from=pkt.hop_to, hop_to=pkt.hop_from,
                seq=pkt.seq + 1,
            )
            self.send(now, reply)

    def generate(self, now: float, fid: int, flow: FlowSpec, seq: int, count: int,
                 end: float, rng: np.random.Generator) -> None:
        hop = self.topo.hop(flow.src, flow.dst)
        pkt = self.new_packet(
            fid=fid, ptype=flow.protocol, size=flow.packet_size, flags=NO_FLAGS,
            src=flow.src, dst=flow.dst, hop_from=flow.src, hop_to=hop, seq=seq,
            ack_on_receive=flow.protocol != "udp",
        )
        self.send(now, pkt)
        if seq + 1 >= count:
            return
        gap = flow.interval
        if self.topo.jitter:
            gap *= 1.0 + self.topo.jitter * rng.uniform(-1.0, 1.0)
        nxt = now + gap
        if nxt < end - 1e-12:
            self.schedule(nxt, self.generate, fid, flow, seq + 1, count, end, rng)

    def arp(self, now: float, fid: int, flow: FlowSpec) -> None:
        hop = self.topo.hop(flow.src, flow.dst)
        pkt = self.new_packet(
            fid=fid, ptype="arp", size=ARP_SIZE, flags=NO_FLAGS,
            src=flow.src, dst=flow.dst, hop_from=flow.src, hop_to=hop, seq=0,
            reply_on_receive=True,
        )
        self.send(now, pkt)

    def run(self) -> list[TraceEvent]:
        for index, flow in enumerate(self.topo.flows):
            fid = index + 1
            count = packets_per_flow(flow, self.duration)
            if count == 0:
                continue
            end = min(flow.stop, self.duration)
            # per-flow stream: jitter draws do not depend on other flows
            rng = np.random.default_rng([self.seed, index])
            if self.topo.control_packets:
                self.schedule(flow.start, self.arp, fid, flow)
            self.schedule(flow.start, self.generate, fid, flow, 0, count, end, rng)
        while self.heap:
            time, _, action, args = heapq.heappop(self.heap)
            action(time, *args)
        return self.events


def simulate(topology: Topology, seed: int, duration: float,
             max_packet_id: int = MAX_PACKET_ID) -> TraceLog:
    """Run every flow of ``topology`` for ``duration`` seconds.

    In-flight packets are drained after the last send, so receive events may
    trail ``duration`` by one link traversal.
    """
    if not duration > 0:
        raise ScenarioError("duration must be positive")
    events = _Simulator(topology, seed, duration, max_packet_id).run()
    return TraceLog(events=events, attack_present=topology.hidden is not None,
                    ground_truth=topology.hidden)


def data_packet_counts(log: TraceLog) -> dict[int, int]:
    """Distinct data packets per source node, from the enqueue events at the source."""
    counts: dict[int, int] = {}
    for e in log.events:
        if e.kind is EventKind.ENQUEUE and e.ptype in PROTOCOLS and e.flags == NO_FLAGS \
                and e.from_node == e.src[0]:
            counts[e.src[0]] = counts.get(e.src[0], 0) + 1
    return counts
