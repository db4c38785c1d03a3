"""Storage servers. Any server can coordinate a two-phase get or put."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from ..simnet import Node, Packet
from .quorum import QuorumSystem
from .tags import ZERO_TAG, Tag
from .wire import (ERROR, FORWARD, GET, PUT, QUERY, QUERY_REPLY, RESULT, STORE, STORE_ACK,
                   Message, Request, decode_message, decode_request, encode_message,
                   encode_response, response_for)

logger = logging.getLogger(__name__)

INTERNAL_PORT = 7000
ABSENT = b""


@dataclass
class StoredValue:
    key: bytes
    value: bytes
    tag: Tag


class _Operation:
    __slots__ = ("token", "frontend", "request", "client_id", "phase", "attempt",
                 "quorums", "waiting", "best", "target", "timer", "started")

    def __init__(self, token, frontend, request, client_id):
        self.token = token
        self.frontend = frontend
        self.request = request
        self.client_id = client_id
        self.phase = 0
        self.attempt = 0
        self.quorums = []
        self.waiting: set = set()
        self.best = (ABSENT, ZERO_TAG)
        self.target = None
        self.timer = None
        self.started = 0


class KVServer(Node):
    def __init__(self, node_id: str, quorums: Optional[QuorumSystem] = None,
                 timeout_floor_us: int = 100_000):
        super().__init__(node_id)
        self.store: dict[bytes, StoredValue] = {}
        self.quorums = quorums
        self.alive = True
        self.timeout_floor_us = timeout_floor_us
        self.srtt_us: Optional[int] = None
        self._ops: dict[int, _Operation] = {}
        self._msg_ops: dict[int, _Operation] = {}
        self._next_msg = 1
        self.retries = 0

    # -- local storage ----------------------------------------------------------
    def server_query(self, key: bytes) -> tuple[bytes, Tag]:
        sv = self.store.get(key)
        if sv is None:
            return ABSENT, ZERO_TAG
        return sv.value, sv.tag

    def server_store(self, key: bytes, value: bytes, tag: Tag) -> bool:
        """Keep the value iff ``tag`` is newer. Always acknowledged."""
        sv = self.store.get(key)
        if sv is None or tag > sv.tag:
            self.store[key] = StoredValue(key, value, tag)
        return True

    # -- messaging ----------------------------------------------------------
    def _send(self, dst: str, msg: Message) -> None:
        if dst == self.id:
            self.sim.call_at(self.sim.now, self._handle, msg, self.id)
            return
        self.net.send(self.id, Packet((self.id, INTERNAL_PORT), (dst, INTERNAL_PORT),
                                      f"rpc:{self.id}>{dst}", payload=encode_message(msg)))

    def deliver(self, packet: Packet, link) -> None:
        if not self.alive:
            return
        self._handle(decode_message(packet.payload), packet.src[0])

    def _handle(self, msg: Message, sender: str) -> None:
        if not self.alive:
            return
        t = msg.type
        if t == QUERY:
            value, tag = self.server_query(msg.key)
            self._send(sender, Message(QUERY_REPLY, msg.op_id, msg.key, value, tag))
        elif t == STORE:
            self.server_store(msg.key, msg.value, msg.tag)
            self._send(sender, Message(STORE_ACK, msg.op_id, msg.key))
        elif t == QUERY_REPLY or t == STORE_ACK:
            self._on_reply(msg, sender)
        elif t == FORWARD:
            self.coordinate(decode_request(msg.value), msg.client_id, sender, msg.op_id)

    # -- coordination -------------------------------------------------------
    def quorum_timeout_us(self) -> int:
        if self.srtt_us is None:
            return self.timeout_floor_us
        return max(4 * self.srtt_us, self.timeout_floor_us)

    def coordinate(self, request: Request, client_id: int, frontend: str, token: int) -> None:
        """Run phase 1 (read quorum) then phase 2 (write quorum) for one request."""
        op = _Operation(token, frontend, request, client_id)
        op.quorums = self.quorums.read_quorum_order(self.id)
        self._start_phase(op, 1)

    def _start_phase(self, op: _Operation, phase: int) -> None:
        if phase != op.phase:
            op.phase = phase
            op.attempt = 0
            op.quorums = (self.quorums.read_quorum_order(self.id) if phase == 1
                          else self.quorums.write_quorum_order(self.id))
        if op.attempt >= len(op.quorums):
            self._finish(op, None)
            return
        quorum = op.quorums[op.attempt]
        msg_id = self._next_msg
        self._next_msg += 1
        self._msg_ops[msg_id] = op
        op.waiting = set(quorum)
        op.started = self.sim.now
        if phase == 1:
            op.best = (ABSENT, ZERO_TAG)
            msgs = [(s, Message(QUERY, msg_id, op.request.key)) for s in quorum]
        else:
            value, tag = op.target
            msgs = [(s, Message(STORE, msg_id, op.request.key, value, tag)) for s in quorum]
        op.timer = self.sim.call_later(self.quorum_timeout_us(), self._timeout, op, msg_id)
        for dst, msg in msgs:
            self._send(dst, msg)

    def _on_reply(self, msg: Message, sender: str) -> None:
        op = self._msg_ops.get(msg.op_id)
        if op is None or sender not in op.waiting:
            return
        op.waiting.discard(sender)
        if msg.type == QUERY_REPLY and msg.tag > op.best[1]:
            op.best = (msg.value, msg.tag)
        if op.waiting:
            return
        del self._msg_ops[msg.op_id]
        self.sim.cancel(op.timer)
        sample = self.sim.now - op.started
        self.srtt_us = sample if self.srtt_us is None else (7 * self.srtt_us + sample) // 8
        if op.phase == 1:
            value, tag = op.best
            if op.request.kind == PUT:
                op.target = (op.request.value, tag.next_for(op.client_id))
            else:
                op.target = (value, tag)
            self._start_phase(op, 2)
        else:
            self._finish(op, op.target)

    def _timeout(self, op: _Operation, msg_id: int) -> None:
        if self._msg_ops.pop(msg_id, None) is None:
            return
        self.retries += 1
        self.sim.record(self.id, "quorum_retry", detail=f"phase={op.phase} attempt={op.attempt}")
        op.attempt += 1
        self._start_phase(op, op.phase)

    def _finish(self, op: _Operation, result) -> None:
        req = op.request
        if result is None:
            resp = response_for(req, b"", ZERO_TAG, kind=ERROR)
        elif req.kind == GET:
            resp = response_for(req, result[0], result[1])
        else:
            resp = response_for(req, b"", result[1])
        self._send(op.frontend, Message(RESULT, op.token, value=encode_response(resp)))
