"""Datacenter entrance: terminates client connections and load-balances requests.

The entrance node plays the role of the datacenter load-balancing switch.
Requests arriving on a client connection are handed, one by one in
round-robin order, to a coordinator server; responses are written back on
the connection in request order, so two datacenters fed the same request
stream emit the same response bytes.
"""

from __future__ import annotations

import logging
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Optional

from ..simnet import Link, Network, Packet
from ..transport import Connection, Host, TransportConfig
from .quorum import QuorumSystem
from .server import INTERNAL_PORT, KVServer
from .tags import ZERO_TAG, Tag
from .wire import (FORWARD, PUT, RESULT, FrameDecoder, Message, decode_message,
                   decode_request, encode_message, encode_request)

logger = logging.getLogger(__name__)

SERVICE_PORT = 80


def client_id_for(node_id: str) -> int:
    """Stable numeric identity of a client host (stands in for its IP address)."""
    return zlib.crc32(node_id.encode()) or 1


class LoadBalancer:
    """Round-robin over live servers, in a fixed order."""

    def __init__(self, servers: list[KVServer]):
        self.servers = servers
        self._next = 0

    def pick(self) -> Optional[KVServer]:
        n = len(self.servers)
        for i in range(n):
            srv = self.servers[(self._next + i) % n]
            if srv.alive:
                self._next = (self._next + i + 1) % n
                return srv
        return None


class _Pending:
    __slots__ = ("request", "response", "dispatched")

    def __init__(self, request):
        self.request = request
        self.response: Optional[bytes] = None
        self.dispatched = False


class _Session:
    def __init__(self, conn: Connection):
        self.conn = conn
        self.client_id = client_id_for(conn.remote[0])
        self.decoder = FrameDecoder()
        self.queue: deque[_Pending] = deque()


class Frontend(Host):
    def __init__(self, node_id: str, config: Optional[TransportConfig] = None,
                 port: int = SERVICE_PORT):
        super().__init__(node_id, config)
        self.servers: list[KVServer] = []
        self.balancer = LoadBalancer(self.servers)
        self.quorums: Optional[QuorumSystem] = None
        self.sessions: dict[str, _Session] = {}
        self.request_streams: dict[str, bytearray] = {}
        self.requests_served = 0
        self.requests_dropped = 0
        self._tokens: dict[int, tuple[_Session, _Pending]] = {}
        self._next_token = 1
        self.stack.listen(port, self._accept)

    def serve(self, port: int) -> None:
        """Accept client connections on another port as well."""
        self.stack.listen(port, self._accept)

    def attach(self, servers: list[KVServer], quorums: QuorumSystem) -> None:
        self.servers[:] = servers
        self.quorums = quorums

    # -- client side --------------------------------------------------------
    def _accept(self, conn: Connection) -> None:
        session = _Session(conn)
        self.sessions[conn.flow_id] = session
        self.request_streams.setdefault(conn.flow_id, bytearray())
        conn.on_data = self._on_data
        conn.on_reset = conn.on_closed = self._on_gone

    def _on_gone(self, conn: Connection) -> None:
        self.sessions.pop(conn.flow_id, None)

    def _on_data(self, conn: Connection, data: bytes) -> None:
        session = self.sessions.get(conn.flow_id)
        if session is None:
            return
        self.request_streams[conn.flow_id] += data
        for frame in session.decoder.feed(data):
            session.queue.append(_Pending(decode_request(frame)))
        self._dispatch(session)

    def _dispatch(self, session: _Session) -> None:
        # a request waits behind earlier ones on the same key when either is a put
        busy: dict[bytes, bool] = {}
        dropped = []
        for p in session.queue:
            req = p.request
            if p.response is not None:
                continue
            conflict = req.key in busy and (req.kind == PUT or busy[req.key])
            if not p.dispatched and not conflict:
                srv = self.balancer.pick()
                if srv is None:
                    self.requests_dropped += 1
                    self.sim.record(self.id, "request_dropped", session.conn.flow_id,
                                    detail="no live server")
                    dropped.append(p)
                    continue
                token = self._next_token
                self._next_token += 1
                self._tokens[token] = (session, p)
                p.dispatched = True
                self._send(srv.id, Message(FORWARD, token, value=encode_request(req),
                                           client_id=session.client_id))
            busy[req.key] = busy.get(req.key, False) or req.kind == PUT
        for p in dropped:
            session.queue.remove(p)
        if dropped:
            self._flush(session)

    def _flush(self, session: _Session) -> None:
        q = session.queue
        while q and q[0].response is not None:
            p = q.popleft()
            self.requests_served += 1
            if session.conn.is_open:
                session.conn.send(p.response)

    # -- intra-datacenter side ----------------------------------------------------
    def _send(self, dst: str, msg: Message) -> None:
        self.net.send(self.id, Packet((self.id, INTERNAL_PORT), (dst, INTERNAL_PORT),
                                      f"rpc:{self.id}>{dst}", payload=encode_message(msg)))

    def deliver(self, packet: Packet, link) -> None:
        if packet.dst[1] == INTERNAL_PORT:
            msg = decode_message(packet.payload)
            if msg.type == RESULT:
                entry = self._tokens.pop(msg.op_id, None)
                if entry is not None:
                    session, p = entry
                    p.response = msg.value
                    self._flush(session)
                    self._dispatch(session)
            return
        self.stack.on_packet(packet)

    # -- state inspection -------------------------------------------------------
    def live_servers(self) -> list[KVServer]:
        return [s for s in self.servers if s.alive]

    def stored_tag(self, key: bytes) -> Tag:
        """Highest tag held for ``key`` by any live server."""
        best = ZERO_TAG
        for srv in self.live_servers():
            best = max(best, srv.server_query(key)[1])
        return best

    def stored_value(self, key: bytes) -> tuple[bytes, Tag]:
        best = (b"", ZERO_TAG)
        for srv in self.live_servers():
            got = srv.server_query(key)
            if got[1] > best[1]:
                best = got
        return best

    def keys(self) -> list[bytes]:
        seen: dict[bytes, None] = {}
        for srv in self.servers:
            for k in srv.store:
                seen.setdefault(k, None)
        return sorted(seen)

    def preload(self, key: bytes, value: bytes, tag: Tag) -> None:
        for srv in self.servers:
            srv.server_store(key, value, tag)


@dataclass
class DatacenterConfig:
    rows: int = 3
    cols: int = 3
    rows_read: bool = True
    intra_delay_us: int = 100
    intra_capacity_bps: int = 1_000_000_000
    intra_queue_limit: int = 10_000
    timeout_floor_us: int = 100_000


def build_datacenter(net: Network, frontend: Frontend,
                     config: Optional[DatacenterConfig] = None) -> list[KVServer]:
    """Create the grid of servers behind ``frontend`` (star topology)."""
    config = config or DatacenterConfig()
    ids = [f"{frontend.id}.srv{i + 1}" for i in range(config.rows * config.cols)]
    quorums = QuorumSystem.from_servers(ids, config.rows, config.cols, config.rows_read)
    servers = []
    for sid in ids:
        srv = KVServer(sid, quorums, config.timeout_floor_us)
        net.add_node(srv)
        net.add_link(Link(frontend.id, sid, config.intra_delay_us, config.intra_capacity_bps,
                          config.intra_queue_limit))
        servers.append(srv)
    frontend.attach(servers, quorums)
    return servers
