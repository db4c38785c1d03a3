"""Simplified TCP-like reliable byte stream.

Fixed send window (no congestion control), immediate cumulative acks,
retransmission of the earliest unacknowledged segment on timeout with
exponential backoff ``rto = min(rto_initial * 2**backoff, rto_cap)``.
"""

from __future__ import annotations

import logging
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .seqnum import MOD, seq_add, seq_diff
from .simnet import ACK, FIN, RST, SYN, Node, Packet, Simulator, format_flags

logger = logging.getLogger(__name__)

INITIATOR = "initiator"
RESPONDER = "responder"

CLOSED = "closed"
SYN_SENT = "syn_sent"
SYN_RECEIVED = "syn_received"
ESTABLISHED = "established"
FIN_WAIT = "fin_wait"
CLOSING = "closing"
RESET = "reset"


class TransportError(Exception):
    pass


@dataclass
class TransportConfig:
    rto_initial_us: int = 1_000_000
    rto_cap_us: int = 8_000_000
    window: int = 1_250_000
    mss: int = 1460
    # the connect attempt fails on this many consecutive SYN timeouts
    syn_timeouts: int = 6

    def __post_init__(self):
        if min(self.rto_initial_us, self.rto_cap_us, self.window, self.mss) <= 0:
            raise ValueError("transport parameters must be strictly positive")
        if self.window < self.mss:
            raise ValueError("window must be at least one mss")
        if self.syn_timeouts <= 0:
            raise ValueError("syn_timeouts must be positive")

    def rto_for(self, backoff: int) -> int:
        return min(self.rto_initial_us << backoff, self.rto_cap_us)


class _Segment:
    __slots__ = ("seq", "payload", "flags", "sent_at", "retransmitted")

    def __init__(self, seq, payload, flags, sent_at):
        self.seq = seq
        self.payload = payload
        self.flags = flags
        self.sent_at = sent_at
        self.retransmitted = False

    @property
    def length(self) -> int:
        # SYN and FIN each occupy one sequence number
        return len(self.payload) + (1 if self.flags & (SYN | FIN) else 0)


class Connection:
    """One end of a connection. Driven entirely by the simulator loop."""

    def __init__(self, stack: "TransportStack", flow_id: str, local, remote, role: str,
                 isn: int):
        self.stack = stack
        self.sim: Simulator = stack.sim
        self.config: TransportConfig = stack.config
        self.flow_id = flow_id
        self.local = local
        self.remote = remote
        self.role = role
        self.state = CLOSED
        self.isn_local = isn
        self.isn_remote: Optional[int] = None
        self.snd_una = isn
        self.snd_nxt = isn
        self.rcv_nxt = 0
        self.window = self.config.window
        self.srtt: Optional[int] = None
        self.rto = self.config.rto_initial_us
        self.backoff_count = 0
        self.retransmit_buffer: deque[_Segment] = deque()
        self._out = bytearray()
        self._out_off = 0
        self._ooo: dict[int, bytes] = {}
        self._close_requested = False
        self._fin_sent = False
        self._fin_received = False
        self._fin_at: Optional[int] = None
        self._deadline: Optional[int] = None
        self._timer = None

        self.bytes_received = 0
        self.bytes_sent = 0
        self.dup_acks = 0
        self.retransmissions = 0
        self.rtt_samples = 0

        # application callbacks
        self.on_data: Callable[[Connection, bytes], None] = lambda c, d: None
        self.on_established: Callable[[Connection], None] = lambda c: None
        self.on_closed: Callable[[Connection], None] = lambda c: None
        self.on_reset: Callable[[Connection], None] = lambda c: None
        self.on_failed: Callable[[Connection], None] = lambda c: None

    def __repr__(self):
        return f"Connection({self.flow_id}, {self.role}, {self.state})"

    # -- introspection ----------------------------------------------------
    @property
    def bytes_in_flight(self) -> int:
        return seq_diff(self.snd_nxt, self.snd_una)

    @property
    def queued_bytes(self) -> int:
        return len(self._out) - self._out_off

    @property
    def is_open(self) -> bool:
        return self.state in (SYN_SENT, SYN_RECEIVED, ESTABLISHED, FIN_WAIT, CLOSING)

    # -- emission ---------------------------------------------------------
    def _emit(self, seq: int, flags: int, payload: bytes = b"") -> None:
        ack = self.rcv_nxt if flags & ACK else 0
        self.stack.emit(Packet(self.local, self.remote, self.flow_id, seq, ack, flags,
                               payload))

    def _send_ack(self) -> None:
        self._emit(self.snd_nxt, ACK)

    def _queue_segment(self, payload: bytes, flags: int) -> None:
        seg = _Segment(self.snd_nxt, payload, flags, self.sim.now)
        self.retransmit_buffer.append(seg)
        self.snd_nxt = seq_add(self.snd_nxt, seg.length)
        self._emit(seg.seq, flags, payload)
        if self._deadline is None:
            self._arm_timer()

    # -- timer --------------------------------------------------------------
    def _arm_timer(self) -> None:
        # one pending event per connection; it re-arms itself when the deadline moved
        self._deadline = deadline = self.sim.now + self.rto
        timer = self._timer
        if timer is not None and timer[2] is not None:
            if timer[0] <= deadline:
                return
            timer[2] = None
        self._timer = self.sim.call_at(deadline, self._timer_fired)

    def _cancel_timer(self) -> None:
        self._deadline = None

    def _timer_fired(self) -> None:
        self._timer = None
        if self._deadline is None or not self.is_open:
            return
        if self.sim.now < self._deadline:
            self._timer = self.sim.call_at(self._deadline, self._timer_fired)
            return
        self.on_retransmission_timeout()

    def on_retransmission_timeout(self) -> None:
        if not self.retransmit_buffer:
            self._deadline = None
            return
        self.backoff_count += 1
        if self.state == SYN_SENT and self.backoff_count >= self.config.syn_timeouts:
            self.sim.record(self.local[0], "connect_failed", self.flow_id,
                            detail=f"after {self.backoff_count} timeouts")
            self._teardown(RESET)
            self.on_failed(self)
            return
        seg = self.retransmit_buffer[0]
        seg.retransmitted = True
        self.retransmissions += 1
        flags = seg.flags | (ACK if self.isn_remote is not None else 0)
        self._emit(seg.seq, flags, seg.payload)
        self.sim.record(self.local[0], "retransmit", self.flow_id, seg.seq, 0,
                        format_flags(flags), len(seg.payload), f"backoff={self.backoff_count}")
        self.rto = self.config.rto_for(self.backoff_count)
        self._arm_timer()

    # -- application API ----------------------------------------------------
    def send(self, data: bytes) -> None:
        if self.state != ESTABLISHED:
            raise TransportError(f"send on {self.state} connection {self.flow_id}")
        if self._close_requested:
            raise TransportError(f"send after close on {self.flow_id}")
        self._out += data
        self._pump()

    send_stream = send

    def close(self) -> None:
        if self.state in (CLOSED, RESET) or self._close_requested:
            return
        self._close_requested = True
        self._pump()

    def abort(self) -> None:
        if self.state in (CLOSED, RESET):
            return
        self._emit(self.snd_nxt, RST)
        self._teardown(RESET)

    def _pump(self) -> None:
        if self.state not in (ESTABLISHED, CLOSING, FIN_WAIT):
            return
        mss = self.config.mss
        window = self.window
        out = self._out
        while True:
            remaining = len(out) - self._out_off
            if remaining <= 0:
                break
            room = window - seq_diff(self.snd_nxt, self.snd_una)
            n = mss if mss < remaining else remaining
            if room < n:
                break
            off = self._out_off
            payload = bytes(out[off:off + n])
            self._out_off = off + n
            self.bytes_sent += n
            self._queue_segment(payload, ACK)
        if self._out_off > (1 << 20):
            del out[:self._out_off]
            self._out_off = 0
        if (self._close_requested and not self._fin_sent
                and len(out) == self._out_off):
            self._fin_sent = True
            self._queue_segment(b"", FIN | ACK)
            if self.state == ESTABLISHED:
                self.state = FIN_WAIT

    # -- input --------------------------------------------------------------
    def on_packet(self, pkt: Packet) -> None:
        flags = pkt.flags
        if flags & RST:
            self.sim.record_packet(self.local[0], "reset", pkt)
            self._teardown(RESET)
            self.on_reset(self)
            return
        state = self.state
        if state == SYN_SENT:
            if flags & SYN and flags & ACK and pkt.ack == seq_add(self.isn_local, 1):
                self.isn_remote = pkt.seq
                self.rcv_nxt = seq_add(pkt.seq, 1)
                self.on_ack(pkt)
                self.state = ESTABLISHED
                self._send_ack()
                self.sim.record(self.local[0], "established", self.flow_id,
                                self.snd_nxt, self.rcv_nxt)
                self.on_established(self)
                self._pump()
            return
        if state == SYN_RECEIVED:
            if flags & SYN:
                # our SYN+ACK was lost: answer again
                self._emit(self.isn_local, SYN | ACK)
                return
            if flags & ACK and seq_diff(pkt.ack, self.isn_local) >= 1:
                self.on_ack(pkt)
                self.state = ESTABLISHED
                self.sim.record(self.local[0], "established", self.flow_id,
                                self.snd_nxt, self.rcv_nxt)
                self.stack.accepted(self)
                # fall through: the ACK may carry data
            else:
                return
        elif state not in (ESTABLISHED, FIN_WAIT, CLOSING):
            return
        elif flags & SYN:
            # duplicate SYN+ACK after our final ACK was lost
            if flags & ACK:
                self._send_ack()
            return

        if flags & ACK:
            self.on_ack(pkt)
        if pkt.payload or flags & FIN:
            self._on_segment(pkt)
        self._maybe_finish()

    def on_ack(self, pkt: Packet) -> None:
        ack = pkt.ack
        advanced = seq_diff(ack, self.snd_una)
        if advanced <= 0:
            if advanced == 0 and not pkt.payload and self.retransmit_buffer:
                self.dup_acks += 1
            elif advanced < 0:
                self.dup_acks += 1
            return
        if seq_diff(ack, self.snd_nxt) > 0:
            return  # acknowledges data never sent
        now = self.sim.now
        buf = self.retransmit_buffer
        sample = None
        while buf:
            seg = buf[0]
            end = seq_add(seg.seq, seg.length)
            if seq_diff(end, ack) <= 0:
                buf.popleft()
                if not seg.retransmitted:
                    sample = now - seg.sent_at
            else:
                cut = seq_diff(ack, seg.seq)
                if cut > 0:
                    seg.payload = seg.payload[cut:]
                    seg.seq = ack
                break
        self.snd_una = ack
        if sample is not None:
            self.rtt_samples += 1
            if self.srtt is None:
                self.srtt = sample
            else:
                self.srtt = (7 * self.srtt + sample) // 8
        self.backoff_count = 0
        self.rto = self.config.rto_initial_us
        if buf:
            self._arm_timer()
        else:
            self._cancel_timer()
        self._pump()

    def _on_segment(self, pkt: Packet) -> None:
        payload = pkt.payload
        if pkt.flags & FIN:
            self._fin_at = seq_add(pkt.seq, len(payload))
        off = seq_diff(pkt.seq, self.rcv_nxt)
        if off > 0:
            if payload:
                self._ooo[pkt.seq] = payload
        else:
            if off < 0:
                payload = payload[-off:]
            if payload:
                self._deliver(payload)
                self._drain_ooo()
        if (self._fin_at is not None and self._fin_at == self.rcv_nxt
                and not self._fin_received):
            self._fin_received = True
            self.rcv_nxt = seq_add(self.rcv_nxt, 1)
            if self.state == ESTABLISHED:
                self.state = CLOSING
            self._send_ack()
            self.close()
            return
        self._send_ack()

    def _drain_ooo(self) -> None:
        ooo = self._ooo
        while ooo:
            nxt = ooo.pop(self.rcv_nxt, None)
            if nxt is None:
                # a buffered segment may straddle rcv_nxt
                for k in sorted(ooo, key=lambda k: seq_diff(k, self.rcv_nxt)):
                    if seq_diff(k, self.rcv_nxt) > 0:
                        return
                    data = ooo.pop(k)
                    over = seq_diff(seq_add(k, len(data)), self.rcv_nxt)
                    if over > 0:
                        nxt = data[len(data) - over:]
                        break
                if nxt is None:
                    return
            self._deliver(nxt)

    def _deliver(self, data: bytes) -> None:
        self.rcv_nxt = seq_add(self.rcv_nxt, len(data))
        self.bytes_received += len(data)
        self.on_data(self, data)

    def _maybe_finish(self) -> None:
        if (self._fin_sent and self._fin_received and not self.retransmit_buffer
                and self.state in (FIN_WAIT, CLOSING)):
            self.sim.record(self.local[0], "closed", self.flow_id, self.snd_nxt, self.rcv_nxt)
            self._teardown(CLOSED)
            self.on_closed(self)

    def _teardown(self, state: str) -> None:
        self.state = state
        self.retransmit_buffer.clear()
        self._out = bytearray()
        self._out_off = 0
        self._ooo.clear()
        self._cancel_timer()
        self.stack.forget(self)


class TransportStack:
    """Per-host connection table and listener registry."""

    EPHEMERAL_BASE = 40000

    def __init__(self, node: Node, config: Optional[TransportConfig] = None):
        self.node = node
        self.config = config or TransportConfig()
        self.connections: dict[str, Connection] = {}
        self.listeners: dict[int, Callable[[Connection], None]] = {}
        self._next_port = self.EPHEMERAL_BASE
        self._rng = None
        self.closed_connections: list[Connection] = []

    @property
    def sim(self) -> Simulator:
        return self.node.sim

    @property
    def rng(self):
        if self._rng is None:
            self._rng = random.Random(f"{self.sim.seed}:{self.node.id}")
        return self._rng

    def emit(self, pkt: Packet) -> None:
        self.node.net.send(self.node.id, pkt)

    def new_isn(self) -> int:
        return self.rng.randrange(MOD)

    def listen(self, port: int, on_accept: Callable[[Connection], None]) -> None:
        self.listeners[port] = on_accept

    def connect(self, remote, local_port: Optional[int] = None,
                flow_id: Optional[str] = None, isn: Optional[int] = None) -> Connection:
        if local_port is None:
            local_port = self._next_port
            self._next_port += 1
        local = (self.node.id, local_port)
        if flow_id is None:
            flow_id = f"{local[0]}:{local[1]}>{remote[0]}:{remote[1]}"
        if flow_id in self.connections:
            raise TransportError(f"connection {flow_id} already exists")
        conn = Connection(self, flow_id, local, remote, INITIATOR,
                          self.new_isn() if isn is None else isn)
        self.connections[flow_id] = conn
        conn.state = SYN_SENT
        conn._queue_segment(b"", SYN)
        self.sim.record(self.node.id, "connect", flow_id, conn.isn_local)
        return conn

    def accepted(self, conn: Connection) -> None:
        cb = self.listeners.get(conn.local[1])
        if cb is not None:
            cb(conn)

    def forget(self, conn: Connection) -> None:
        if self.connections.get(conn.flow_id) is conn:
            del self.connections[conn.flow_id]
            self.closed_connections.append(conn)

    def on_packet(self, pkt: Packet) -> None:
        conn = self.connections.get(pkt.flow_id)
        if conn is not None:
            conn.on_packet(pkt)
            return
        if pkt.flags & SYN and not pkt.flags & ACK and pkt.dst[1] in self.listeners:
            conn = Connection(self, pkt.flow_id, pkt.dst, pkt.src, RESPONDER, self.new_isn())
            conn.isn_remote = pkt.seq
            conn.rcv_nxt = seq_add(pkt.seq, 1)
            conn.state = SYN_RECEIVED
            self.connections[pkt.flow_id] = conn
            seg = _Segment(conn.snd_nxt, b"", SYN | ACK, self.sim.now)
            conn.retransmit_buffer.append(seg)
            conn.snd_nxt = seq_add(conn.snd_nxt, 1)
            conn._emit(seg.seq, SYN | ACK)
            conn._arm_timer()
            return
        if not pkt.flags & RST:
            self.sim.record_packet(self.node.id, "no_connection", pkt)


class Host(Node):
    """An end host running a transport stack."""

    def __init__(self, node_id: str, config: Optional[TransportConfig] = None):
        super().__init__(node_id)
        self.stack = TransportStack(self, config)

    def deliver(self, packet: Packet, link) -> None:
        self.stack.on_packet(packet)
