"""Software-defined edge: an edge switch and its controller.

The controller owns the disaster detector and the per-service redirect rules.
The switch owns the flow table and rewrites packets:

* plain flows go to the service's primary datacenter, or to the secondary
  one once the primary is declared down; return traffic always appears to
  come from the service address;
* critical flows are duplicated to both datacenters. The first datacenter to
  answer the handshake becomes the master and talks to the client; the other
  one (the slave) is fed a copy of the client stream whose acknowledgment
  numbers are shifted into its own sequence space, and its replies are
  consumed by the switch. Client segments stay buffered until the slave
  acknowledges them.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .seqnum import MOD, seq_add, seq_diff, seq_ge, seq_gt, seq_le
from .simnet import ACK, FIN, RST, SYN, Link, Node, Packet, format_flags

logger = logging.getLogger(__name__)

PLAIN = "plain"
DUPLICATED = "duplicated"
REDIRECTED = "redirected"
PROMOTED = "promoted"


# -- sequence translation -----------------------------------------------------

def offset_between(slave_isn: int, master_isn: int) -> int:
    """Acknowledgment offset ``slave_isn - master_isn`` as a signed 32-bit value."""
    return seq_diff(slave_isn, master_isn)


def to_slave_space(value: int, offset: int) -> int:
    return (value + offset) % MOD


def to_master_space(value: int, offset: int) -> int:
    return (value - offset) % MOD


def translate_client_to_slave(pkt: Packet, offset: int, slave_dc) -> Packet:
    """Copy of a client segment as the slave should see it (ack shifted)."""
    ack = to_slave_space(pkt.ack, offset) if pkt.flags & ACK else pkt.ack
    return pkt.copy(dst=slave_dc, ack=ack)


def translate_slave_to_client(pkt: Packet, offset: int, service_address) -> Packet:
    """Copy of a slave segment as the client should see it (seq shifted)."""
    return pkt.copy(src=service_address, seq=to_master_space(pkt.seq, offset))


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ServiceConfig:
    address: tuple
    primary_dc: tuple
    secondary_dc: tuple
    critical: bool = False


@dataclass(frozen=True)
class RedirectRule:
    service_address: tuple
    primary_dc: tuple
    secondary_dc: tuple

    def __post_init__(self):
        if self.primary_dc == self.secondary_dc:
            raise ValueError("primary and secondary datacenters must differ")


# -- detection ----------------------------------------------------------------

class Detector:
    """Duplicate-packet disaster detector, one counter per datacenter.

    A client retransmission toward a datacenter increments its counter; any
    packet coming back from that datacenter resets it. Reaching ``threshold``
    puts the datacenter in disaster mode for the rest of the run.

    With ``scope="flow"`` the counters are kept per (datacenter, flow) instead.
    """

    def __init__(self, threshold: int = 5, scope: str = "datacenter"):
        if threshold < 1:
            raise ValueError("threshold must be at least 1")
        if scope not in ("datacenter", "flow"):
            raise ValueError(f"unknown counter scope {scope!r}")
        self.threshold = threshold
        self.scope = scope
        self.possible_disaster: dict = {}
        self.disaster_mode: dict[str, bool] = {}
        self.affected_flows: dict[str, list] = {}

    def _key(self, dc: str, flow_id) -> object:
        return dc if self.scope == "datacenter" else (dc, flow_id)

    def in_disaster(self, dc: str) -> bool:
        return self.disaster_mode.get(dc, False)

    def counter(self, dc: str, flow_id=None) -> int:
        return self.possible_disaster.get(self._key(dc, flow_id), 0)

    def on_client_retransmission(self, dc: str, flow_id=None) -> bool:
        """Returns True when this retransmission switches ``dc`` into disaster mode."""
        key = self._key(dc, flow_id)
        count = self.possible_disaster.get(key, 0) + 1
        self.possible_disaster[key] = count
        if count >= self.threshold and not self.in_disaster(dc):
            self.disaster_mode[dc] = True
            return True
        return False

    def on_dc_packet(self, dc: str, flow_id=None) -> None:
        if self.scope == "datacenter":
            self.possible_disaster[dc] = 0
        else:
            self.possible_disaster[(dc, flow_id)] = 0


# -- flow table ---------------------------------------------------------------

class _Reassembler:
    """In-order byte stream recovered from segments that may repeat or reorder."""

    def __init__(self, start: int):
        self.next = start
        self._ooo: dict[int, bytes] = {}

    def add(self, seq: int, payload: bytes) -> bytes:
        off = seq_diff(seq, self.next)
        if off > 0:
            self._ooo[seq] = payload
            return b""
        if -off >= len(payload):
            return b""
        out = [payload[-off:]] if off else [payload]
        self.next = seq_add(self.next, len(out[0]))
        while self._ooo:
            nxt = self._ooo.pop(self.next, None)
            if nxt is None:
                stale = [k for k in self._ooo if seq_diff(k, self.next) < 0]
                if not stale:
                    break
                for k in stale:
                    data = self._ooo.pop(k)
                    over = seq_diff(seq_add(k, len(data)), self.next)
                    if over > 0:
                        self._ooo[self.next] = data[len(data) - over:]
                continue
            out.append(nxt)
            self.next = seq_add(self.next, len(nxt))
        return b"".join(out)


class _Buffered:
    __slots__ = ("seq", "payload", "flags", "sent_at", "retransmitted")

    def __init__(self, seq, payload, flags, sent_at):
        self.seq = seq
        self.payload = payload
        self.flags = flags
        self.sent_at = sent_at
        self.retransmitted = False

    @property
    def end(self) -> int:
        return seq_add(self.seq, len(self.payload) + (1 if self.flags & FIN else 0))

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass
class FlowEntry:
    flow_id: str
    client_endpoint: tuple
    service_address: tuple
    service: ServiceConfig
    mode: str
    master_dc: Optional[tuple] = None
    slave_dc: Optional[tuple] = None
    master_isn: Optional[int] = None
    slave_isn: Optional[int] = None
    ack_offset: Optional[int] = None
    slave_acked: Optional[int] = None
    unacked_buffer: deque = field(default_factory=deque)
    last_client_seq_seen: Optional[int] = None
    client_isn: Optional[int] = None
    # latest acknowledgment the client sent (server sequence space, master view)
    client_ack: Optional[int] = None
    slave_ack_sent: Optional[int] = None
    # highest ack forged for data the slave had already sent
    slave_forged_ack: Optional[int] = None
    master_acked: Optional[int] = None
    client_fin_end: Optional[int] = None
    master_fin_end: Optional[int] = None
    slave_fin_end: Optional[int] = None
    slave_srtt: Optional[int] = None
    slave_syn_at: Optional[int] = None
    retired: bool = False
    diverged: bool = False
    max_buffered: int = 0
    slave_retransmissions: int = 0
    client_packets: int = 0
    dc_packets: int = 0
    seen: set = field(default_factory=set)
    master_stream: Optional[_Reassembler] = None
    slave_stream: Optional[_Reassembler] = None
    master_pending: bytearray = field(default_factory=bytearray)
    slave_pending: bytearray = field(default_factory=bytearray)
    # slave bytes the client has not acknowledged yet; ends at slave_stream.next
    slave_held: bytearray = field(default_factory=bytearray)
    compared_bytes: int = 0
    slave_timer: Optional[list] = None
    slave_deadline: Optional[int] = None
    close_timer: Optional[list] = None

    @property
    def target_dc(self) -> tuple:
        """Datacenter currently answering the client."""
        if self.mode == PROMOTED:
            return self.slave_dc
        if self.mode == DUPLICATED:
            return self.master_dc or self.service.primary_dc
        return self.master_dc

    @property
    def buffered_bytes(self) -> int:
        return sum(b.size for b in self.unacked_buffer)

    def observe_client(self, pkt: Packet) -> bool:
        """Record a client SYN/data segment; True when it was already seen."""
        if not (pkt.flags & SYN or pkt.payload):
            return False
        if pkt.seq in self.seen:
            return True
        self.seen.add(pkt.seq)
        return False

    def prune_seen(self, acked: int) -> None:
        if len(self.seen) > 512:
            self.seen = {s for s in self.seen if seq_ge(s, acked)}


# -- controller and switch -------------------------------------------------------

class EdgeController:
    """Logically centralized controller for the edge switches of one domain."""

    def __init__(self, services: list[ServiceConfig], threshold: int = 5,
                 duplication: bool = True, counter_scope: str = "datacenter"):
        self.services: dict[tuple, ServiceConfig] = {}
        self.rules: dict[tuple, RedirectRule] = {}
        for svc in services:
            if svc.address in self.services:
                raise ValueError(f"duplicate service address {svc.address}")
            self.services[svc.address] = svc
            self.rules[svc.address] = RedirectRule(svc.address, svc.primary_dc,
                                                   svc.secondary_dc)
        self.detector = Detector(threshold, counter_scope)
        self.duplication = duplication
        self.switches: list[EdgeSwitch] = []
        self.disaster_times: dict[str, int] = {}

    def attach(self, switch: "EdgeSwitch") -> None:
        self.switches.append(switch)
        switch.controller = self

    def target_for(self, svc: ServiceConfig) -> tuple:
        rule = self.rules[svc.address]
        if self.detector.in_disaster(rule.primary_dc[0]):
            return rule.secondary_dc
        return rule.primary_dc

    def client_retransmission(self, switch: "EdgeSwitch", flow: FlowEntry) -> None:
        dc = flow.target_dc[0]
        if self.detector.in_disaster(dc):
            return
        tripped = self.detector.on_client_retransmission(dc, flow.flow_id)
        switch.sim.record(switch.id, "detect", flow.flow_id,
                          detail=f"dc={dc} count={self.detector.counter(dc, flow.flow_id)}")
        if tripped:
            self.declare_disaster(dc, switch)

    def dc_packet(self, dc: str, flow_id=None) -> None:
        self.detector.on_dc_packet(dc, flow_id)

    def declare_disaster(self, dc: str, switch: "EdgeSwitch") -> None:
        sim = switch.sim
        self.detector.disaster_mode[dc] = True
        self.disaster_times[dc] = sim.now
        sim.record(switch.id, "disaster", detail=f"dc={dc}")
        for sw in self.switches:
            affected = sw.on_disaster(dc)
            self.detector.affected_flows.setdefault(dc, []).extend(affected)


class EdgeSwitch(Node):
    """Edge switch. ``client_side`` lists the neighbours that face clients."""

    def __init__(self, node_id: str, client_side: list[str],
                 slave_rto_default_us: int = 1_000_000, close_timeout_us: int = 60_000_000,
                 mss: int = 1460):
        super().__init__(node_id)
        self.mss = mss
        self.client_side = set(client_side)
        self.flows: dict[str, FlowEntry] = {}
        self.controller: Optional[EdgeController] = None
        self.slave_rto_default_us = slave_rto_default_us
        self.close_timeout_us = close_timeout_us
        self.retired_flows: list[FlowEntry] = []

    # -- plumbing -------------------------------------------------------------
    def receive(self, packet: Packet, link: Optional[Link]) -> None:
        if link is not None:
            from_client = link.other(self.id) in self.client_side
        else:
            from_client = packet.src[0] in self.client_side
        if from_client:
            self.handle_client_packet(packet)
        else:
            self.handle_dc_packet(packet)

    def _out(self, pkt: Packet) -> None:
        self.net.send(self.id, pkt)

    def _rec(self, kind: str, flow: FlowEntry, detail: str = "", pkt: Optional[Packet] = None):
        if pkt is not None:
            self.sim.record_packet(self.id, kind, pkt, detail)
        else:
            self.sim.record(self.id, kind, flow.flow_id, detail=detail)

    # -- client side ------------------------------------------------------------
    def handle_client_packet(self, pkt: Packet) -> None:
        flow = self.flows.get(pkt.flow_id)
        if flow is None:
            svc = self.controller.services.get(pkt.dst)
            if svc is None:
                self._out(pkt)
                return
            if not pkt.flags & SYN or pkt.flags & ACK:
                # leftover from a retired flow: route it like a new one would be
                self._out(pkt.copy(dst=self.controller.target_for(svc)))
                return
            flow = self._new_flow(pkt, svc)
        flow.client_packets += 1

        if pkt.flags & ACK:
            if flow.client_ack is None or seq_gt(pkt.ack, flow.client_ack):
                flow.client_ack = pkt.ack
        end = seq_add(pkt.seq, len(pkt.payload) + (1 if pkt.flags & (SYN | FIN) else 0))
        if flow.last_client_seq_seen is None or seq_gt(end, flow.last_client_seq_seen):
            flow.last_client_seq_seen = end
        if pkt.flags & FIN and flow.client_fin_end is None:
            flow.client_fin_end = end
            flow.close_timer = self.sim.call_later(self.close_timeout_us, self._close_expired,
                                                   flow)

        if flow.observe_client(pkt):
            before = flow.mode
            self.controller.client_retransmission(self, flow)
            if flow.retired:
                return
            if flow.mode == PROMOTED and before != PROMOTED:
                return  # the buffer drain already carried this segment

        mode = flow.mode
        if mode in (PLAIN, REDIRECTED):
            self._out(pkt.copy(dst=flow.master_dc))
        elif mode == DUPLICATED:
            if pkt.flags & SYN:
                self._out(pkt.copy(dst=flow.master_dc or flow.service.primary_dc))
                if flow.slave_isn is None:
                    self._out(pkt.copy(dst=flow.slave_dc or flow.service.secondary_dc))
                    if flow.slave_syn_at is None:
                        flow.slave_syn_at = self.sim.now
            else:
                self._out(pkt.copy(dst=flow.master_dc or flow.service.primary_dc))
                self._to_slave(flow, pkt)
        else:  # PROMOTED
            self._to_slave(flow, pkt)

        if pkt.flags & RST:
            self._retire(flow, "client reset")
        else:
            self._check_closed(flow)

    def _new_flow(self, pkt: Packet, svc: ServiceConfig) -> FlowEntry:
        ctl = self.controller
        if svc.critical and ctl.duplication:
            flow = FlowEntry(pkt.flow_id, pkt.src, pkt.dst, svc, DUPLICATED,
                             client_isn=pkt.seq)
            flow.slave_syn_at = self.sim.now
        else:
            target = ctl.target_for(svc)
            mode = PLAIN if target == svc.primary_dc else REDIRECTED
            flow = FlowEntry(pkt.flow_id, pkt.src, pkt.dst, svc, mode, master_dc=target,
                             client_isn=pkt.seq)
        self.flows[pkt.flow_id] = flow
        self._rec("flow_created", flow, f"mode={flow.mode}")
        return flow

    def _to_slave(self, flow: FlowEntry, pkt: Packet) -> None:
        if pkt.payload or pkt.flags & FIN:
            self._buffer(flow, pkt)
        if flow.ack_offset is None:
            return  # slave handshake pending; the buffer is flushed once it completes
        out = translate_client_to_slave(pkt, flow.ack_offset, flow.slave_dc)
        if out.flags & ACK:
            self._note_slave_ack(flow, out.ack)
        self._out(out)

    def _buffer(self, flow: FlowEntry, pkt: Packet) -> None:
        buf = flow.unacked_buffer
        if buf:
            tail_end = buf[-1].end
        else:
            tail_end = flow.slave_acked if flow.slave_acked is not None else pkt.seq
        if seq_diff(pkt.seq, tail_end) < 0:
            return  # retransmission of something already buffered or acked
        entry = _Buffered(pkt.seq, pkt.payload, pkt.flags & FIN, self.sim.now)
        buf.append(entry)
        size = flow.buffered_bytes
        if size > flow.max_buffered:
            flow.max_buffered = size
        if flow.ack_offset is not None and flow.slave_deadline is None:
            self._arm_slave_timer(flow)

    def _note_slave_ack(self, flow: FlowEntry, ack: int) -> None:
        if flow.slave_ack_sent is None or seq_gt(ack, flow.slave_ack_sent):
            flow.slave_ack_sent = ack

    def _emit_buffered(self, flow: FlowEntry, entry: _Buffered) -> None:
        ack = to_slave_space(flow.client_ack, flow.ack_offset)
        self._note_slave_ack(flow, ack)
        self._out(Packet(flow.client_endpoint, flow.slave_dc, flow.flow_id, entry.seq, ack,
                         ACK | entry.flags, entry.payload))

    # -- slave retransmission timer -------------------------------------------------
    def _slave_period(self, flow: FlowEntry) -> int:
        if flow.slave_srtt is None:
            return self.slave_rto_default_us
        return 2 * flow.slave_srtt

    def _arm_slave_timer(self, flow: FlowEntry) -> None:
        flow.slave_deadline = deadline = self.sim.now + self._slave_period(flow)
        timer = flow.slave_timer
        if timer is not None and timer[2] is not None:
            if timer[0] <= deadline:
                return
            timer[2] = None
        flow.slave_timer = self.sim.call_at(deadline, self._slave_timer_fired, flow)

    def _slave_timer_fired(self, flow: FlowEntry) -> None:
        flow.slave_timer = None
        if flow.slave_isn is None and not flow.retired and flow.mode == DUPLICATED:
            self._resend_slave_syn(flow)
            return
        if flow.retired or flow.slave_deadline is None or not flow.unacked_buffer:
            flow.slave_deadline = None
            return
        if self.sim.now < flow.slave_deadline:
            flow.slave_timer = self.sim.call_at(flow.slave_deadline, self._slave_timer_fired,
                                                flow)
            return
        self.retransmit_to_slave(flow)

    def _resend_slave_syn(self, flow: FlowEntry) -> None:
        """The client only retries its SYN toward the master; retry the slave's copy here."""
        svc = flow.service
        dc = svc.secondary_dc if flow.master_dc == svc.primary_dc else svc.primary_dc
        flow.slave_syn_at = None  # an answer to a repeated SYN gives no clean rtt sample
        flow.slave_retransmissions += 1
        self._out(Packet(flow.client_endpoint, dc, flow.flow_id, flow.client_isn, 0, SYN))
        self._rec("slave_retransmit", flow, "syn")
        self._arm_slave_timer(flow)

    def retransmit_to_slave(self, flow: FlowEntry) -> None:
        """Re-emit the earliest segment the slave has not acknowledged."""
        if not flow.unacked_buffer or flow.ack_offset is None:
            flow.slave_deadline = None
            return
        entry = flow.unacked_buffer[0]
        entry.retransmitted = True
        flow.slave_retransmissions += 1
        self._emit_buffered(flow, entry)
        self._rec("slave_retransmit", flow, f"seq={entry.seq} len={entry.size}")
        self._arm_slave_timer(flow)

    # -- datacenter side -----------------------------------------------------------
    def handle_dc_packet(self, pkt: Packet) -> None:
        dc = pkt.src[0]
        self.controller.dc_packet(dc, pkt.flow_id)
        flow = self.flows.get(pkt.flow_id)
        if flow is None:
            if pkt.flags & SYN:
                self.sim.record_packet(self.id, "drop_unknown_synack", pkt)
                return
            self._out(pkt)
            return
        flow.dc_packets += 1
        mode = flow.mode
        if mode in (PLAIN, REDIRECTED):
            if pkt.flags & ACK and pkt.src == flow.master_dc:
                self._note_master_ack(flow, pkt)
            self._track_dc_fin(flow, pkt, master=True)
            self._out(pkt.copy(src=flow.service_address))
            if pkt.flags & RST:
                self._retire(flow, "datacenter reset")
            else:
                self._check_closed(flow)
            return
        if pkt.flags & SYN:
            self._on_synack(flow, pkt)
            return
        if mode == DUPLICATED:
            if pkt.src == flow.master_dc:
                self._from_master(flow, pkt)
            elif pkt.src == flow.slave_dc:
                self._from_slave(flow, pkt)
        elif mode == PROMOTED and pkt.src == flow.slave_dc:
            self._slave_acks(flow, pkt)
            self._track_dc_fin(flow, pkt, master=False)
            self._out(translate_slave_to_client(pkt, flow.ack_offset, flow.service_address))
            if pkt.flags & RST:
                self._retire(flow, "datacenter reset")
                return
        self._check_closed(flow)

    def _on_synack(self, flow: FlowEntry, pkt: Packet) -> None:
        if not pkt.flags & ACK:
            return
        if flow.master_dc is None:
            flow.master_dc = pkt.src
            flow.master_isn = pkt.seq
            flow.master_stream = _Reassembler(seq_add(pkt.seq, 1))
            self._rec("election", flow, f"master={pkt.src[0]} isn={pkt.seq}")
            self._out(pkt.copy(src=flow.service_address))
            if flow.slave_isn is None and flow.mode == DUPLICATED:
                self._arm_slave_timer(flow)
        elif pkt.src == flow.master_dc:
            if flow.mode == DUPLICATED:
                self._out(pkt.copy(src=flow.service_address))
        elif flow.slave_dc is None or pkt.src == flow.slave_dc:
            first = flow.slave_isn is None
            if first:
                flow.slave_dc = pkt.src
                flow.slave_isn = pkt.seq
                flow.ack_offset = offset_between(pkt.seq, flow.master_isn)
                flow.slave_acked = seq_add(flow.client_isn, 1)
                flow.slave_stream = _Reassembler(seq_add(pkt.seq, 1))
                if flow.slave_syn_at is not None:
                    flow.slave_srtt = self.sim.now - flow.slave_syn_at
                self.sim.cancel(flow.slave_timer)  # the syn retry is no longer needed
                flow.slave_timer = flow.slave_deadline = None
                self._rec("election", flow, f"slave={pkt.src[0]} isn={pkt.seq}")
                self._rec("offset", flow, f"ack_offset={flow.ack_offset}")
            # complete the slave's handshake on the client's behalf
            ack = seq_add(pkt.seq, 1)
            self._note_slave_ack(flow, ack)
            self._out(Packet(flow.client_endpoint, flow.slave_dc, flow.flow_id,
                             seq_add(flow.client_isn, 1), ack, ACK))
            if first and flow.unacked_buffer:
                for entry in flow.unacked_buffer:
                    self._emit_buffered(flow, entry)
                self._arm_slave_timer(flow)

    def _note_master_ack(self, flow: FlowEntry, pkt: Packet) -> None:
        if flow.master_acked is None or seq_gt(pkt.ack, flow.master_acked):
            flow.master_acked = pkt.ack
            flow.prune_seen(pkt.ack)

    def _from_master(self, flow: FlowEntry, pkt: Packet) -> None:
        if pkt.flags & ACK:
            self._note_master_ack(flow, pkt)
        self._track_dc_fin(flow, pkt, master=True)
        if pkt.payload:
            data = flow.master_stream.add(pkt.seq, pkt.payload)
            if data:
                flow.master_pending += data
                self._compare(flow)
        self._out(pkt.copy(src=flow.service_address))
        if pkt.flags & RST:
            if flow.ack_offset is not None:
                self._out(Packet(flow.client_endpoint, flow.slave_dc, flow.flow_id,
                                 flow.last_client_seq_seen, 0, RST))
            self._retire(flow, "master reset")

    def _from_slave(self, flow: FlowEntry, pkt: Packet) -> None:
        if flow.ack_offset is None:
            return
        self._slave_acks(flow, pkt)
        self._track_dc_fin(flow, pkt, master=False)
        if pkt.flags & RST:
            # the replica dropped out: keep serving the client from the master alone
            self._rec("slave_lost", flow, "slave reset")
            self._demote(flow)
            return
        if pkt.payload:
            data = flow.slave_stream.add(pkt.seq, pkt.payload)
            if data:
                flow.slave_pending += data
                flow.slave_held += data
                self._trim_held(flow)
                self._compare(flow)
        if pkt.payload or pkt.flags & FIN:
            # acknowledge what the client already acknowledged on the master leg
            if flow.client_ack is not None:
                covered = to_slave_space(flow.client_ack, flow.ack_offset)
                seg_end = seq_add(pkt.seq, len(pkt.payload) + (1 if pkt.flags & FIN else 0))
                ack = covered if seq_le(covered, seg_end) else seg_end
                if seq_gt(ack, pkt.seq) and (flow.slave_forged_ack is None
                                             or seq_gt(ack, flow.slave_forged_ack)):
                    flow.slave_forged_ack = ack
                    self._note_slave_ack(flow, ack)
                    self._out(Packet(flow.client_endpoint, flow.slave_dc, flow.flow_id,
                                     flow.last_client_seq_seen, ack, ACK))

    def _slave_acks(self, flow: FlowEntry, pkt: Packet) -> None:
        if not pkt.flags & ACK or flow.slave_acked is None:
            return
        if not seq_gt(pkt.ack, flow.slave_acked):
            return
        flow.slave_acked = pkt.ack
        buf = flow.unacked_buffer
        now = self.sim.now
        sample = None
        while buf and seq_le(buf[0].end, pkt.ack):
            entry = buf.popleft()
            if not entry.retransmitted:
                sample = now - entry.sent_at
        if sample is not None:
            flow.slave_srtt = (sample if flow.slave_srtt is None
                               else (7 * flow.slave_srtt + sample) // 8)
        if buf:
            self._arm_slave_timer(flow)
        else:
            flow.slave_deadline = None

    def _trim_held(self, flow: FlowEntry) -> None:
        held = flow.slave_held
        if flow.client_ack is None or not held:
            return
        start = seq_add(flow.slave_stream.next, -len(held))
        done = seq_diff(to_slave_space(flow.client_ack, flow.ack_offset), start)
        if done > 0:
            del held[:done]

    def _replay_held(self, flow: FlowEntry) -> int:
        """Send the client the slave bytes it is missing instead of waiting for the slave."""
        self._trim_held(flow)
        held = flow.slave_held
        seq = to_master_space(seq_add(flow.slave_stream.next, -len(held)), flow.ack_offset)
        ack = flow.slave_acked
        for i in range(0, len(held), self.mss):
            chunk = bytes(held[i:i + self.mss])
            self._out(Packet(flow.service_address, flow.client_endpoint, flow.flow_id,
                             seq_add(seq, i), ack, ACK, chunk))
        return len(held)

    def _compare(self, flow: FlowEntry) -> None:
        mp, sp = flow.master_pending, flow.slave_pending
        n = min(len(mp), len(sp))
        if not n:
            return
        if not flow.diverged and mp[:n] != sp[:n]:
            flow.diverged = True
            at = flow.compared_bytes + next(i for i in range(n) if mp[i] != sp[i])
            self._rec("divergence", flow, f"offset={at}")
        flow.compared_bytes += n
        del mp[:n]
        del sp[:n]

    def _track_dc_fin(self, flow: FlowEntry, pkt: Packet, master: bool) -> None:
        if not pkt.flags & FIN:
            return
        end = seq_add(pkt.seq, len(pkt.payload) + 1)
        if master and flow.master_fin_end is None:
            flow.master_fin_end = end
        elif not master and flow.slave_fin_end is None:
            flow.slave_fin_end = end

    # -- disaster handling ------------------------------------------------------------
    def on_disaster(self, dc: str) -> list[str]:
        affected = []
        for flow in list(self.flows.values()):
            if flow.retired:
                continue
            if flow.mode in (PLAIN, REDIRECTED):
                if flow.master_dc[0] == dc:
                    affected.append(flow.flow_id)
                    rst = Packet(flow.service_address, flow.client_endpoint, flow.flow_id,
                                 flow.master_acked or 0, 0, RST)
                    self._rec("rst", flow, f"dc={dc}", rst)
                    self._out(rst)
                    self._retire(flow, "disaster")
            elif flow.mode == DUPLICATED:
                master = flow.master_dc or flow.service.primary_dc
                slave = flow.slave_dc or flow.service.secondary_dc
                if master[0] == dc:
                    affected.append(flow.flow_id)
                    self.promote_slave(flow)
                elif slave[0] == dc:
                    affected.append(flow.flow_id)
                    self._rec("slave_lost", flow, f"dc={dc}")
                    self._demote(flow)
        return affected

    def promote_slave(self, flow: FlowEntry) -> FlowEntry:
        """Hand the client over to the slave datacenter without resetting it."""
        if flow.ack_offset is None:
            self._rec("promotion_failed", flow, "slave never completed its handshake")
            rst = Packet(flow.service_address, flow.client_endpoint, flow.flow_id, 0, 0, RST)
            self._out(rst)
            self._retire(flow, "double failure")
            return flow
        flow.mode = PROMOTED
        replayed = self._replay_held(flow)
        self._rec("promotion", flow, f"slave={flow.slave_dc[0]} buffered={len(flow.unacked_buffer)} "
                                     f"replayed={replayed}")
        for entry in flow.unacked_buffer:
            entry.retransmitted = True
            self._emit_buffered(flow, entry)
        if flow.unacked_buffer:
            self._arm_slave_timer(flow)
        return flow

    def _demote(self, flow: FlowEntry) -> None:
        flow.mode = PLAIN
        flow.master_dc = flow.master_dc or flow.service.primary_dc
        flow.slave_dc = flow.slave_isn = flow.ack_offset = flow.slave_acked = None
        flow.unacked_buffer.clear()
        flow.slave_held.clear()
        flow.slave_deadline = None

    # -- closing ------------------------------------------------------------------
    def _check_closed(self, flow: FlowEntry) -> None:
        if flow.retired or flow.client_fin_end is None:
            return
        if flow.mode in (PLAIN, REDIRECTED):
            legs = [(flow.master_acked, flow.client_fin_end),
                    (flow.client_ack, flow.master_fin_end)]
        elif flow.mode == PROMOTED:
            legs = [(flow.slave_acked, flow.client_fin_end),
                    (flow.client_ack and to_slave_space(flow.client_ack, flow.ack_offset),
                     flow.slave_fin_end)]
        else:
            legs = [(flow.master_acked, flow.client_fin_end),
                    (flow.client_ack, flow.master_fin_end)]
            if flow.ack_offset is not None:
                legs += [(flow.slave_acked, flow.client_fin_end),
                         (flow.slave_ack_sent, flow.slave_fin_end)]
        for acked, fin_end in legs:
            if acked is None or fin_end is None or not seq_ge(acked, fin_end):
                return
        self._retire(flow, "closed")

    def _close_expired(self, flow: FlowEntry) -> None:
        if not flow.retired:
            self._retire(flow, "close timeout")

    def _retire(self, flow: FlowEntry, reason: str) -> None:
        if flow.retired:
            return
        flow.retired = True
        flow.slave_deadline = None
        self.sim.cancel(flow.slave_timer)
        self.sim.cancel(flow.close_timer)
        if self.flows.get(flow.flow_id) is flow:
            del self.flows[flow.flow_id]
        self.retired_flows.append(flow)
        self._rec("flow_retired", flow, f"{reason} client_packets={flow.client_packets} "
                                         f"dc_packets={flow.dc_packets}")
