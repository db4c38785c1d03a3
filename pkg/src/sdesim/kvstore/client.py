"""Key-value clients and the workloads used by the experiments."""

from __future__ import annotations

import logging
from collections import deque
from typing import Callable, Optional

from ..transport import ESTABLISHED, Connection, Host
from .tags import Tag
from .wire import (ERROR, GET, KIND_NAMES, PUT, FrameDecoder, Request, Response,
                   decode_response, encode_request)

logger = logging.getLogger(__name__)

ResponseCallback = Callable[[Request, Response], None]


class KVClient:
    """Issues requests over one connection and matches responses by request id.

    Requests made before the handshake completes are held and sent once the
    connection is established.
    """

    def __init__(self, conn: Connection, first_request_id: int = 1):
        self.conn = conn
        self.decoder = FrameDecoder()
        self.pending: dict[int, tuple[Request, ResponseCallback, int]] = {}
        self._held: deque[bytes] = deque()
        self._next_id = first_request_id
        conn.on_data = self._on_data
        conn.on_established = self._on_established

    @property
    def next_request_id(self) -> int:
        return self._next_id

    def get(self, key: bytes, callback: ResponseCallback) -> Request:
        return self._issue(Request(GET, key, request_id=self._take_id()), callback)

    def put(self, key: bytes, value: bytes, callback: ResponseCallback,
            critical: bool = False) -> Request:
        return self._issue(Request(PUT, key, value, critical, self._take_id()), callback)

    def _take_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _issue(self, req: Request, callback: ResponseCallback) -> Request:
        self.pending[req.request_id] = (req, callback, self.conn.sim.now)
        frame = encode_request(req)
        if self.conn.state == ESTABLISHED:
            self.conn.send(frame)
        else:
            self._held.append(frame)
        return req

    def _on_established(self, conn: Connection) -> None:
        while self._held:
            conn.send(self._held.popleft())

    def _on_data(self, conn: Connection, data: bytes) -> None:
        for frame in self.decoder.feed(data):
            resp = decode_response(frame)
            entry = self.pending.pop(resp.request_id, None)
            if entry is None:
                conn.sim.record(conn.local[0], "unexpected_response", conn.flow_id,
                                detail=f"req={resp.request_id}")
                continue
            req, callback, _ = entry
            callback(req, resp)


def response_detail(req: Request, resp: Response) -> str:
    return (f"req={req.request_id} op={KIND_NAMES[resp.kind]} key={req.key.decode()} "
            f"tag={resp.tag} critical={int(req.critical)} len={len(resp.value)}")


class _Workload:
    """Shared connection management: (re)connect to the service address."""

    def __init__(self, host: Host, service, name: str):
        self.host = host
        self.service = service
        self.name = name
        self.client: Optional[KVClient] = None
        self.connections: list[Connection] = []
        self.resets = 0
        self.bytes_received = 0
        self.next_request_id = 1

    @property
    def sim(self):
        return self.host.sim

    @property
    def conn(self) -> Optional[Connection]:
        return self.client.conn if self.client else None

    def connect(self) -> None:
        if self.client is not None:
            self.next_request_id = self.client.next_request_id
        conn = self.host.stack.connect(self.service)
        self.connections.append(conn)
        self.client = KVClient(conn, self.next_request_id)
        inner = conn.on_data

        def on_data(c, data):
            self.bytes_received += len(data)
            inner(c, data)

        conn.on_data = on_data
        conn.on_reset = self._on_lost
        conn.on_failed = self._on_lost
        self.on_connected()

    def _on_lost(self, conn: Connection) -> None:
        if self.client is None or conn is not self.client.conn:
            return
        self.resets += 1
        self.sim.record(self.host.id, "app_reconnect", conn.flow_id, detail=self.name)
        self.connect()

    def on_connected(self) -> None:
        pass

    def _record(self, req: Request, resp: Response) -> None:
        self.sim.record(self.host.id, "app_response", self.client.conn.flow_id,
                        detail=f"{response_detail(req, resp)} svc={self.service[0]}")


class BulkReader(_Workload):
    """Reads one large value over and over, keeping ``depth`` gets outstanding."""

    def __init__(self, host: Host, service, key: bytes, depth: int = 8, name: str = "bulk"):
        super().__init__(host, service, name)
        self.key = key
        self.depth = depth
        self.responses = 0

    def start(self) -> None:
        self.connect()

    def on_connected(self) -> None:
        for _ in range(self.depth):
            self.client.get(self.key, self._on_response)

    def _on_response(self, req: Request, resp: Response) -> None:
        self.responses += 1
        self._record(req, resp)
        self.client.get(self.key, self._on_response)


class PutStream(_Workload):
    """Open-loop puts: one every ``interval_us`` until ``count`` have been issued.

    Puts that have not been acknowledged when a connection is reset are
    issued again on the new connection.
    """

    def __init__(self, host: Host, service, keys: list[bytes], count: int, interval_us: int,
                 value_size: int, critical: bool, rng, name: str = "puts"):
        super().__init__(host, service, name)
        self.keys = keys
        self.count = count
        self.interval_us = interval_us
        self.value_size = value_size
        self.critical = critical
        self.rng = rng
        self.issued = 0
        self.acked: list[tuple[bytes, Tag, bytes]] = []
        self.errors = 0
        self._outstanding: dict[int, tuple[bytes, bytes]] = {}

    def start(self) -> None:
        self.connect()
        self._tick()

    def on_connected(self) -> None:
        retry = list(self._outstanding.values())
        self._outstanding.clear()
        for key, value in retry:
            self._put(key, value)

    def _tick(self) -> None:
        if self.issued >= self.count:
            return
        key = self.keys[self.issued % len(self.keys)]
        value = self.rng.randbytes(self.value_size)
        self.issued += 1
        self._put(key, value)
        self.sim.call_later(self.interval_us, self._tick)

    def _put(self, key: bytes, value: bytes) -> None:
        req = self.client.put(key, value, self._on_response, critical=self.critical)
        self._outstanding[req.request_id] = (key, value)

    def _on_response(self, req: Request, resp: Response) -> None:
        self._outstanding.pop(req.request_id, None)
        self._record(req, resp)
        if resp.kind == ERROR:
            self.errors += 1
            return
        self.acked.append((req.key, resp.tag, req.value))
