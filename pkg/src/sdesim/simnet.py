"""Deterministic discrete-event network engine.

Time is kept in integer microseconds. Events with the same fire time run in
the order they were scheduled. Links are full duplex, with a FIFO drop-tail
queue per direction; a packet's arrival time is fixed when it enters the
link, so taking a link down only has to cancel the packets still waiting
behind the serializer.

Every packet carries a fixed 40-byte header in its wire size.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, NamedTuple, Optional

logger = logging.getLogger(__name__)

SYN = 1
ACK = 2
FIN = 4
RST = 8
_FLAG_NAMES = ((SYN, "SYN"), (ACK, "ACK"), (FIN, "FIN"), (RST, "RST"))

HEADER_BYTES = 40
US_PER_S = 1_000_000

Endpoint = tuple  # (node id, port)


class SimulationError(Exception):
    pass


def format_flags(flags: int) -> str:
    return "|".join(name for bit, name in _FLAG_NAMES if flags & bit)


def parse_flags(text: str) -> int:
    lookup = {name: bit for bit, name in _FLAG_NAMES}
    return sum(lookup[part] for part in text.split("|") if part)


class Packet:
    """A transport segment in flight.

    ``flow_id`` identifies the connection end to end; switches that rewrite
    addresses keep it unchanged.
    """

    __slots__ = ("src", "dst", "flow_id", "seq", "ack", "flags", "payload")

    def __init__(self, src, dst, flow_id, seq=0, ack=0, flags=0, payload=b""):
        if flags & SYN and flags & RST:
            raise ValueError("SYN and RST cannot be combined")
        if payload and flags & (SYN | RST):
            raise ValueError("SYN/RST segments carry no payload")
        self.src = src
        self.dst = dst
        self.flow_id = flow_id
        self.seq = seq
        self.ack = ack
        self.flags = flags
        self.payload = payload

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def wire_size(self) -> int:
        return len(self.payload) + HEADER_BYTES

    def copy(self, **changes) -> "Packet":
        p = Packet.__new__(Packet)
        p.src = changes.get("src", self.src)
        p.dst = changes.get("dst", self.dst)
        p.flow_id = changes.get("flow_id", self.flow_id)
        p.seq = changes.get("seq", self.seq)
        p.ack = changes.get("ack", self.ack)
        p.flags = changes.get("flags", self.flags)
        p.payload = changes.get("payload", self.payload)
        return p

    def __repr__(self):
        return (f"Packet({self.src}->{self.dst} flow={self.flow_id} seq={self.seq} "
                f"ack={self.ack} [{format_flags(self.flags)}] len={len(self.payload)})")


class TraceRecord(NamedTuple):
    time_us: int
    node: str
    kind: str
    flow_id: str = ""
    seq: int = 0
    ack: int = 0
    flags: str = ""
    payload_len: int = 0
    detail: str = ""


TRACE_COLUMNS = TraceRecord._fields


def trace_to_csv(records: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    writer.writerows(records)
    return buf.getvalue()


def trace_from_csv(text: str) -> list[TraceRecord]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None:
        return []
    out = []
    for r in rows:
        out.append(TraceRecord(int(r[0]), r[1], r[2], r[3], int(r[4]), int(r[5]),
                               r[6], int(r[7]), r[8]))
    return out


@dataclass
class Event:
    """Public event descriptor accepted by :meth:`Simulator.schedule`.

    ``kind`` is one of ``packet_arrival``, ``timer_expiry`` or
    ``scripted_action``. For scripted actions ``payload`` is a zero-argument
    callable.
    """

    fire_time: int
    target: str
    kind: str
    payload: Any = None


EVENT_KINDS = ("packet_arrival", "timer_expiry", "scripted_action")


class Simulator:
    """Event loop, clock, trace and the single seeded random source."""

    def __init__(self, seed: int = 0, trace_packets: bool = True):
        self.now = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self.trace_packets = trace_packets
        self.trace: list[TraceRecord] = []
        self._queue: list = []
        self._counter = 0
        self._targets: dict[str, Any] = {}
        self.events_processed = 0

    # -- scheduling -------------------------------------------------------
    def call_at(self, time_us: int, fn: Callable, *args) -> list:
        if time_us < self.now:
            raise SimulationError(
                f"cannot schedule at t={time_us}us, clock is already at {self.now}us")
        self._counter += 1
        entry = [time_us, self._counter, fn, args]
        heapq.heappush(self._queue, entry)
        return entry

    def call_later(self, delay_us: int, fn: Callable, *args) -> list:
        return self.call_at(self.now + delay_us, fn, *args)

    @staticmethod
    def cancel(handle: Optional[list]) -> None:
        if handle is not None:
            handle[2] = None

    def register(self, name: str, target: Any) -> None:
        self._targets[name] = target

    def schedule(self, event: Event) -> list:
        if event.kind not in EVENT_KINDS:
            raise SimulationError(f"unknown event kind {event.kind!r}")
        if event.kind == "scripted_action":
            return self.call_at(event.fire_time, event.payload)
        target = self._targets.get(event.target)
        if target is None:
            raise SimulationError(f"unknown event target {event.target!r}")
        if event.kind == "packet_arrival":
            return self.call_at(event.fire_time, target.receive, event.payload, None)
        return self.call_at(event.fire_time, target.on_timer, event.payload)

    # -- running ----------------------------------------------------------
    def run_until(self, t_end: int) -> list[TraceRecord]:
        start = len(self.trace)
        queue = self._queue
        pop = heapq.heappop
        processed = 0
        while queue and queue[0][0] <= t_end:
            entry = pop(queue)
            fn = entry[2]
            if fn is None:
                continue
            self.now = entry[0]
            fn(*entry[3])
            processed += 1
        self.events_processed += processed
        if t_end > self.now:
            self.now = t_end
        return self.trace[start:]

    def pending(self) -> int:
        return sum(1 for e in self._queue if e[2] is not None)

    # -- tracing ----------------------------------------------------------
    def record(self, node: str, kind: str, flow_id: str = "", seq: int = 0, ack: int = 0,
               flags: str = "", payload_len: int = 0, detail: str = "") -> None:
        self.trace.append(TraceRecord(self.now, node, kind, flow_id, seq, ack, flags,
                                      payload_len, detail))

    def record_packet(self, node: str, kind: str, pkt: Packet, detail: str = "") -> None:
        self.trace.append(TraceRecord(self.now, node, kind, str(pkt.flow_id), pkt.seq,
                                      pkt.ack, format_flags(pkt.flags), len(pkt.payload),
                                      detail))


class _Direction:
    __slots__ = ("src", "dst", "busy_until", "queue", "accepted", "drop_at",
                 "delivered", "dropped")

    def __init__(self, src: str, dst: str):
        self.src = src
        self.dst = dst
        self.busy_until = 0
        # (serialization finish time, arrival handle, packet) for packets not
        # yet fully on the wire
        self.queue: deque = deque()
        self.accepted = 0
        self.drop_at: set[int] = set()
        self.delivered = 0
        self.dropped = 0


class Link:
    """Full-duplex point-to-point link."""

    def __init__(self, a: str, b: str, delay_us: int, capacity_bps: int,
                 queue_limit: int = 1000, up: bool = True):
        if delay_us <= 0 or capacity_bps <= 0:
            raise ValueError("link delay and capacity must be strictly positive")
        if queue_limit <= 0:
            raise ValueError("queue_limit must be positive")
        self.a = a
        self.b = b
        self.delay_us = int(delay_us)
        self.capacity_bps = int(capacity_bps)
        self.queue_limit = int(queue_limit)
        self.up = up
        self.directions = {a: _Direction(a, b), b: _Direction(b, a)}
        self._bit_us = 8 * US_PER_S

    @property
    def name(self) -> str:
        return f"{self.a}-{self.b}"

    def other(self, node: str) -> str:
        return self.b if node == self.a else self.a

    def serialization_us(self, wire_size: int) -> int:
        # ceiling, so back-to-back packets never overlap on the wire
        return -(-wire_size * self._bit_us // self.capacity_bps)

    def queue_occupancy(self, from_node: str, now: int) -> int:
        return sum(1 for entry in self.directions[from_node].queue if entry[0] > now)

    def drop_nth(self, from_node: str, n: int) -> None:
        """Script the loss of the n-th packet (1-based) accepted in one direction."""
        self.directions[from_node].drop_at.add(n)

    def __repr__(self):
        return (f"Link({self.a}<->{self.b}, {self.delay_us}us, {self.capacity_bps}bps, "
                f"q={self.queue_limit}, {'up' if self.up else 'down'})")


class Node:
    """A network element. Subclasses override :meth:`deliver` and/or :meth:`receive`."""

    def __init__(self, node_id: str):
        self.id = node_id
        self.net: Optional[Network] = None

    @property
    def sim(self) -> Simulator:
        return self.net.sim

    def receive(self, packet: Packet, link: Optional[Link]) -> None:
        if packet.dst[0] == self.id:
            self.deliver(packet, link)
        else:
            self.net.send(self.id, packet)

    def deliver(self, packet: Packet, link: Optional[Link]) -> None:
        self.sim.record_packet(self.id, "unhandled", packet)

    def on_timer(self, token) -> None:
        pass


class Network:
    """Topology, static shortest-hop routing and packet transmission."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.nodes: dict[str, Node] = {}
        self.links: dict[frozenset, Link] = {}
        self._adj: dict[str, list[str]] = {}
        self._routes: dict[str, dict[str, Link]] = {}
        self.gateways: dict[str, str] = {}

    def set_gateway(self, node: str, neighbour: str) -> None:
        """Forward traffic for unknown destinations from ``node`` to ``neighbour``."""
        self.link(node, neighbour)
        self.gateways[node] = neighbour
        self._routes.clear()

    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise SimulationError(f"duplicate node {node.id!r}")
        node.net = self
        self.nodes[node.id] = node
        self._adj[node.id] = []
        self.sim.register(node.id, node)
        self._routes.clear()
        return node

    def add_link(self, link: Link) -> Link:
        for end in (link.a, link.b):
            if end not in self.nodes:
                raise SimulationError(f"link references unknown node {end!r}")
        key = frozenset((link.a, link.b))
        if key in self.links:
            raise SimulationError(f"duplicate link {link.name}")
        self.links[key] = link
        self._adj[link.a].append(link.b)
        self._adj[link.b].append(link.a)
        self._routes.clear()
        return link

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise SimulationError(f"no link between {a!r} and {b!r}") from None

    def _table(self, src: str) -> dict[str, Link]:
        table = self._routes.get(src)
        if table is not None:
            return table
        # BFS in neighbour insertion order: deterministic shortest-hop routes
        table = {}
        first_hop: dict[str, str] = {}
        frontier = deque()
        for nb in self._adj[src]:
            if nb not in first_hop:
                first_hop[nb] = nb
                frontier.append(nb)
        while frontier:
            cur = frontier.popleft()
            for nb in self._adj[cur]:
                if nb != src and nb not in first_hop:
                    first_hop[nb] = first_hop[cur]
                    frontier.append(nb)
        for dst, hop in first_hop.items():
            table[dst] = self.links[frozenset((src, hop))]
        self._routes[src] = table
        return table

    def next_link(self, src: str, dst_node: str) -> Link:
        table = self._table(src)
        link = table.get(dst_node)
        if link is None and src in self.gateways:
            link = table[dst_node] = self.link(src, self.gateways[src])
        if link is None:
            raise SimulationError(f"no route from {src!r} to {dst_node!r}")
        return link

    def send(self, from_node: str, packet: Packet) -> Optional[list]:
        """Route ``packet`` one hop toward ``packet.dst``."""
        try:
            link = self._routes[from_node][packet.dst[0]]
        except KeyError:
            link = self.next_link(from_node, packet.dst[0])
        return self.transmit(packet, link, from_node)

    def send_via(self, from_node: str, neighbour: str, packet: Packet) -> Optional[list]:
        return self.transmit(packet, self.link(from_node, neighbour), from_node)

    def transmit(self, packet: Packet, link: Link, from_node: str) -> Optional[list]:
        """Enqueue ``packet`` on ``link`` leaving ``from_node``.

        Returns the arrival event handle, or None when the packet was dropped.
        """
        sim = self.sim
        d = link.directions[from_node]
        if not link.up:
            d.dropped += 1
            sim.record_packet(from_node, "drop", packet, f"link_down {link.name}")
            return None
        now = sim.now
        q = d.queue
        while q and q[0][0] <= now:
            q.popleft()
        if len(q) >= link.queue_limit:
            d.dropped += 1
            sim.record_packet(from_node, "drop", packet, f"queue_full {link.name}")
            return None
        d.accepted += 1
        if d.drop_at and d.accepted in d.drop_at:
            d.dropped += 1
            sim.record_packet(from_node, "drop", packet, f"scripted {link.name}")
            return None
        start = d.busy_until if d.busy_until > now else now
        # ceiling division keeps back-to-back packets from overlapping
        finish = start - (-(len(packet.payload) + HEADER_BYTES) * link._bit_us
                          // link.capacity_bps)
        d.busy_until = finish
        sim._counter += 1
        handle = [finish + link.delay_us, sim._counter, self._arrive, (packet, link, d)]
        heapq.heappush(sim._queue, handle)
        q.append((finish, handle, packet))
        return handle

    def _arrive(self, packet: Packet, link: Link, d: _Direction) -> None:
        d.delivered += 1
        if self.sim.trace_packets or packet.flags & (SYN | FIN | RST):
            self.sim.record_packet(d.dst, "arrival", packet, link.name)
        self.nodes[d.dst].receive(packet, link)

    def set_link_state(self, a: str, b: str, up: bool, at: Optional[int] = None) -> None:
        """Change link state at time ``at`` (default: now)."""
        link = self.link(a, b)
        when = self.sim.now if at is None else at
        self.sim.call_at(when, self._apply_link_state, link, up)

    def _apply_link_state(self, link: Link, up: bool) -> None:
        sim = self.sim
        if link.up == up:
            return
        link.up = up
        sim.record(link.a, "link_up" if up else "link_down", detail=link.name)
        if up:
            return
        now = sim.now
        for d in link.directions.values():
            while d.queue:
                finish, handle, packet = d.queue.popleft()
                if finish <= now:
                    continue  # already on the wire, will arrive
                Simulator.cancel(handle)
                d.dropped += 1
                sim.record_packet(d.src, "drop", packet, f"link_down_discard {link.name}")
            d.busy_until = now
