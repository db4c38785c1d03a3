import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdesim.seqnum import MOD
from sdesim.simnet import Link, Network, Simulator
from sdesim.transport import (CLOSED, ESTABLISHED, RESET, Host, TransportConfig,
                              TransportError)


def two_hosts(config=None, delay=10_000, capacity=100_000_000, seed=3):
    sim = Simulator(seed=seed)
    net = Network(sim)
    a = net.add_node(Host("a", config))
    b = net.add_node(Host("b", config))
    link = net.add_link(Link("a", "b", delay, capacity, 10_000))
    return sim, net, a, b, link


def serve_echo_sink(host, port=80):
    """Accept connections and collect what they receive."""
    received = {}

    def accept(conn):
        buf = received.setdefault(conn.flow_id, bytearray())
        conn.on_data = lambda c, d: buf.extend(d)

    host.stack.listen(port, accept)
    return received


def test_handshake_transfer_and_close():
    sim, net, a, b, _ = two_hosts()
    got = serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    data = bytes(range(256)) * 400
    conn.on_established = lambda c: (c.send(data), c.close())
    sim.run_until(5_000_000)
    assert bytes(got[conn.flow_id]) == data
    assert conn.state == CLOSED
    assert not a.stack.connections and not b.stack.connections


@given(size=st.integers(1, 40_000),
       drops_ab=st.sets(st.integers(1, 40), max_size=4),
       drops_ba=st.sets(st.integers(1, 40), max_size=4),
       mss=st.sampled_from([100, 536, 1460]))
@settings(max_examples=40, deadline=None)
def test_stream_survives_scripted_losses(size, drops_ab, drops_ba, mss):
    cfg = TransportConfig(window=8 * mss, mss=mss)
    sim, net, a, b, link = two_hosts(cfg, delay=2_000)
    for n in drops_ab:
        link.drop_nth("a", n)
    for n in drops_ba:
        link.drop_nth("b", n)
    got = serve_echo_sink(b)
    data = bytes((i * 7) % 251 for i in range(size))
    conn = a.stack.connect(("b", 80))
    conn.on_established = lambda c: (c.send(data), c.close())
    sim.run_until(600_000_000)
    assert bytes(got[conn.flow_id]) == data
    assert conn.state == CLOSED


def backoff_oracle(start_us, cfg, n):
    """Fire times of the first n timeouts with nothing ever acknowledged."""
    times, t = [], start_us
    for k in range(n):
        t += min(cfg.rto_initial_us * 2 ** k, cfg.rto_cap_us)
        times.append(t)
    return times


def test_retransmissions_follow_the_backoff_series():
    cfg = TransportConfig()
    sim, net, a, b, link = two_hosts(cfg)
    serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    sim.run_until(1_000_000)
    net.set_link_state("a", "b", up=False)
    sim.run_until(1_000_000)
    conn.send(b"hello")
    sim.run_until(60_000_000)
    got = [r.time_us for r in sim.trace if r.kind == "retransmit" and r.node == "a"]
    assert got == backoff_oracle(1_000_000, cfg, len(got))
    # +1, +3, +7, +15, +23 s: the fifth timeout lands 23 s after the send
    assert [t - 1_000_000 for t in got[:5]] == [1_000_000, 3_000_000, 7_000_000,
                                                15_000_000, 23_000_000]


@pytest.mark.parametrize("timeouts", [1, 3, 6])
def test_connect_fails_after_consecutive_syn_timeouts(timeouts):
    cfg = TransportConfig(syn_timeouts=timeouts)
    sim, net, a, b, link = two_hosts(cfg)
    link.up = False
    failed = []
    conn = a.stack.connect(("b", 80))
    conn.on_failed = lambda c: failed.append(sim.now)
    sim.run_until(120_000_000)
    assert failed == [backoff_oracle(0, cfg, timeouts)[-1]]
    assert conn.state == RESET


def test_rto_for_is_capped():
    cfg = TransportConfig(rto_initial_us=1_000_000, rto_cap_us=8_000_000)
    assert [cfg.rto_for(k) // 1_000_000 for k in range(6)] == [1, 2, 4, 8, 8, 8]


def test_window_is_never_exceeded():
    cfg = TransportConfig(window=10_000, mss=1000)
    sim, net, a, b, _ = two_hosts(cfg, delay=5_000, capacity=10_000_000)
    serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    conn.on_established = lambda c: c.send(b"x" * 300_000)
    peak = []

    def watch():
        peak.append(conn.bytes_in_flight)
        if sim.now < 2_000_000:
            sim.call_later(100, watch)

    sim.call_at(0, watch)
    sim.run_until(3_000_000)
    assert max(peak) == 10_000


def test_srtt_tracks_path_rtt():
    sim, net, a, b, _ = two_hosts(delay=10_000, capacity=1_000_000_000)
    serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    conn.on_established = lambda c: c.send(b"x" * 5000)
    sim.run_until(1_000_000)
    assert conn.srtt == pytest.approx(20_000, rel=0.01)


def test_karn_rule_skips_retransmitted_samples():
    sim, net, a, b, link = two_hosts(delay=1_000)
    serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    sim.run_until(100_000)
    samples = conn.rtt_samples
    srtt = conn.srtt
    link.drop_nth("a", link.directions["a"].accepted + 1)
    conn.send(b"lost once")
    sim.run_until(3_000_000)
    assert conn.retransmissions == 1 and conn.snd_una == conn.snd_nxt
    assert conn.rtt_samples == samples and conn.srtt == srtt


def test_sequence_numbers_wrap_around():
    sim, net, a, b, _ = two_hosts(TransportConfig(window=4000, mss=1000))
    got = serve_echo_sink(b)
    conn = a.stack.connect(("b", 80), isn=MOD - 2500)
    data = bytes(range(200)) * 50
    conn.on_established = lambda c: (c.send(data), c.close())
    sim.run_until(5_000_000)
    assert bytes(got[conn.flow_id]) == data and conn.state == CLOSED


def test_reset_notifies_the_application():
    sim, net, a, b, _ = two_hosts()
    serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    sim.run_until(100_000)
    resets = []
    conn.on_reset = resets.append
    next(iter(b.stack.connections.values())).abort()
    sim.run_until(200_000)
    assert resets == [conn] and conn.state == RESET


def test_lost_syn_is_retried_after_one_rto():
    sim, net, a, b, link = two_hosts(delay=1_000)
    link.drop_nth("a", 1)
    serve_echo_sink(b)
    conn = a.stack.connect(("b", 80))
    sim.run_until(3_000_000)
    est = [r.time_us for r in sim.trace if r.kind == "established" and r.node == "a"]
    assert conn.state == ESTABLISHED
    # rto + rtt + two 40-byte serializations at 100 Mbit/s (3.2 us, rounded up)
    assert est == [1_000_000 + 2_000 + 2 * 4]


def test_send_before_established_is_an_error():
    sim, net, a, b, _ = two_hosts()
    conn = a.stack.connect(("b", 80))
    with pytest.raises(TransportError):
        conn.send(b"too soon")


def test_unknown_segment_is_traced():
    sim, net, a, b, _ = two_hosts()
    conn = a.stack.connect(("b", 81))  # nobody listens
    sim.run_until(100_000)
    assert any(r.kind == "no_connection" and r.node == "b" for r in sim.trace)


@pytest.mark.parametrize("field,value", [("rto_initial_us", 0), ("window", 10), ("mss", -1),
                                         ("syn_timeouts", 0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        TransportConfig(**{field: value})


def test_distinct_isns_per_host_and_deterministic_per_seed():
    def isns(seed):
        sim, net, a, b, _ = two_hosts(seed=seed)
        return [a.stack.new_isn() for _ in range(3)] + [b.stack.new_isn()]

    assert isns(5) == isns(5)
    assert isns(5) != isns(6)
    assert len(set(isns(5))) == 4
    assert all(0 <= x < MOD for x in itertools.chain(isns(1), isns(2)))
