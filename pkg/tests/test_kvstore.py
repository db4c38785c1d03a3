import itertools
import random
from dataclasses import dataclass
from typing import Optional

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdesim.kvstore.client import KVClient
from sdesim.kvstore.datacenter import DatacenterConfig, Frontend, build_datacenter
from sdesim.kvstore.quorum import QuorumSystem
from sdesim.kvstore.server import KVServer
from sdesim.kvstore.tags import ZERO_TAG, Tag
from sdesim.kvstore.wire import (ERROR, GET, PUT, FrameDecoder, Message, Request, Response,
                                 WireError, decode_message, decode_request, decode_response,
                                 encode_message, encode_request, encode_response)
from sdesim.simnet import Link, Network, Simulator
from sdesim.transport import Host

keys = st.binary(max_size=40)
values = st.binary(max_size=300)
u64 = st.integers(0, 2**64 - 1)
u32 = st.integers(0, 2**32 - 1)


@given(keys, values, st.booleans(), u64)
def test_request_round_trip(key, value, critical, rid):
    req = Request(PUT, key, value, critical, rid)
    assert decode_request(encode_request(req)) == req
    get = Request(GET, key, request_id=rid)
    assert decode_request(encode_request(get)) == get


@given(st.sampled_from([GET, PUT, ERROR]), keys, values, st.booleans(), u64, u64, u32)
def test_response_round_trip(kind, key, value, critical, rid, counter, cid):
    resp = Response(kind, key, value, critical, rid, Tag(counter, cid))
    assert decode_response(encode_response(resp)) == resp


def test_encoding_layout():
    frame = encode_request(Request(PUT, b"k", b"vv", True, 7))
    assert frame == (b"\x00\x00\x00\x13" b"\x02\x01\x00\x01" b"k"
                     b"\x00\x00\x00\x02" b"vv" b"\x00\x00\x00\x00\x00\x00\x00\x07")


@pytest.mark.parametrize("req", [dict(kind=9, key=b"k"), dict(kind=GET, key=b"k", critical=True),
                                 dict(kind=GET, key=b"k", value=b"v")])
def test_invalid_requests(req):
    with pytest.raises(WireError):
        Request(**req)


def test_malformed_frames_are_rejected():
    frame = encode_request(Request(GET, b"k", request_id=1))
    with pytest.raises(WireError):
        decode_request(frame[:-1])
    with pytest.raises(WireError):
        decode_response(frame)
    with pytest.raises(WireError):
        decode_request(b"\x00")


@given(st.lists(st.tuples(keys, values), min_size=1, max_size=6), st.data())
def test_frame_decoder_reassembles_any_chunking(pairs, data):
    frames = [encode_request(Request(PUT, k, v, request_id=i)) for i, (k, v) in enumerate(pairs)]
    stream = b"".join(frames)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=10)))
    dec = FrameDecoder()
    got = []
    for a, b in zip([0] + cuts, cuts + [len(stream)]):
        got.extend(dec.feed(stream[a:b]))
    assert got == frames and dec.buffered == 0


@given(keys, values, u64, st.integers(0, 10), u32, u32)
def test_message_round_trip(key, value, counter, mtype, cid, op):
    msg = Message(mtype, op, key, value, Tag(counter, cid), cid)
    assert decode_message(encode_message(msg)) == msg


@given(st.tuples(u64, u32), st.tuples(u64, u32))
def test_tags_order_by_counter_then_client(a, b):
    ta, tb = Tag(*a), Tag(*b)
    assert (ta < tb) == ((a[0], a[1]) < (b[0], b[1]))
    assert Tag.parse(str(ta)) == ta
    assert ta.next_for(b[1]) > ta


@given(st.lists(st.tuples(u64, u32, values), max_size=12))
def test_server_store_keeps_the_newest_tag(writes):
    srv = KVServer("s")
    for counter, cid, value in writes:
        assert srv.server_store(b"k", value, Tag(counter, cid))
    if not writes:
        assert srv.server_query(b"k") == (b"", ZERO_TAG)
        return
    newest = max(Tag(c, i) for c, i, _ in writes)
    first = next(v for c, i, v in writes if Tag(c, i) == newest)
    assert srv.server_query(b"k") == (first, newest)


@pytest.mark.parametrize("rows,cols", [(r, c) for r in range(1, 5) for c in range(1, 5)])
@pytest.mark.parametrize("rows_read", [True, False])
def test_every_read_quorum_meets_every_write_quorum(rows, cols, rows_read):
    ids = [f"s{i}" for i in range(rows * cols)]
    qs = QuorumSystem.from_servers(ids, rows, cols, rows_read)
    for r, w in itertools.product(qs.read_quorums, qs.write_quorums):
        assert len(set(r) & set(w)) == 1
    assert sorted(qs.servers) == sorted(ids)
    for s in ids:
        assert s in qs.read_quorum_order(s)[0] and s in qs.write_quorum_order(s)[0]


def test_quorum_system_validation():
    with pytest.raises(ValueError):
        QuorumSystem.from_servers(["a", "b"], 3, 3)
    with pytest.raises(ValueError):
        QuorumSystem.from_servers(["a"] * 4, 2, 2)


# -- small simulated datacenter --------------------------------------------------------

def small_dc(n_clients=1, seed=0, client_delays=None, config=None):
    sim = Simulator(seed=seed)
    net = Network(sim)
    fe = net.add_node(Frontend("dc"))
    servers = build_datacenter(net, fe, config or DatacenterConfig())
    clients = []
    for i in range(n_clients):
        h = net.add_node(Host(f"c{i}"))
        delay = client_delays[i] if client_delays else 1000
        net.add_link(Link(h.id, "dc", delay, 1_000_000_000))
        clients.append(KVClient(h.stack.connect(("dc", 80))))
    return sim, net, fe, servers, clients


def test_put_then_get_through_a_client():
    sim, net, fe, servers, (c,) = small_dc()
    got = []
    c.put(b"k", b"hello", lambda q, r: got.append(r))
    c.get(b"k", lambda q, r: got.append(r))
    sim.run_until(1_000_000)
    put, get = got
    assert put.kind == PUT and put.tag.counter == 1
    assert get.kind == GET and get.value == b"hello" and get.tag == put.tag
    assert fe.stored_value(b"k") == (b"hello", put.tag)
    # a write quorum (one column) holds the value
    holders = {s.id for s in servers if s.server_query(b"k")[0] == b"hello"}
    assert any(set(col) <= holders for col in fe.quorums.write_quorums)


def test_responses_come_back_in_request_order():
    sim, net, fe, servers, (c,) = small_dc()
    order = []
    for i in range(10):
        key = b"a" if i % 3 else b"b"
        if i % 2:
            c.put(key, bytes([i]), lambda q, r: order.append(q.request_id))
        else:
            c.get(key, lambda q, r: order.append(q.request_id))
    sim.run_until(2_000_000)
    assert order == list(range(1, 11))


def test_per_key_operations_apply_in_order():
    sim, net, fe, servers, (c,) = small_dc()
    seen = []
    for i in range(6):
        c.put(b"k", bytes([i]), lambda q, r: None)
        c.get(b"k", lambda q, r: seen.append(r.value))
    sim.run_until(2_000_000)
    assert seen == [bytes([i]) for i in range(6)]


def test_dead_server_triggers_quorum_retry():
    sim, net, fe, servers, (c,) = small_dc()
    servers[4].alive = False  # centre of the grid: kills one row and one column
    got = []
    for i in range(9):
        c.put(b"k", bytes([i]), lambda q, r: got.append(r))
    sim.run_until(5_000_000)
    assert [r.kind for r in got] == [PUT] * 9
    assert [r.tag.counter for r in got] == list(range(1, 10))
    assert any(r.kind == "quorum_retry" for r in sim.trace)


def test_all_servers_dead_gives_error_or_drop():
    sim, net, fe, servers, (c,) = small_dc()
    for s in servers[1:]:
        s.alive = False
    got = []
    c.put(b"k", b"v", lambda q, r: got.append(r))
    sim.run_until(5_000_000)
    assert [r.kind for r in got] == [ERROR]


# -- linearizability ------------------------------------------------------------------

@dataclass
class Op:
    client: int
    kind: int
    key: bytes
    value: bytes
    invoked: int
    returned: Optional[int] = None
    result: Optional[bytes] = None
    failed: bool = False  # error reply: a put may or may not have taken effect


def linearizable(history: list[Op]) -> bool:
    """Brute force: search for a total order consistent with real time and register semantics."""
    ops = [o for o in history if not (o.failed and o.kind == GET)]
    n = len(ops)
    required = {i for i in range(n) if not ops[i].failed}

    def search(done: frozenset, state: dict) -> bool:
        if required <= done:
            return True
        remaining = [i for i in range(n) if i not in done]
        earliest_return = min(ops[i].returned for i in remaining if i in required)
        for i in remaining:
            op = ops[i]
            if op.invoked > earliest_return:
                continue  # some pending op finished before this one started
            if op.kind == GET:
                if state.get(op.key, b"") != op.result:
                    continue
                if search(done | {i}, state):
                    return True
            else:
                nxt = dict(state)
                nxt[op.key] = op.value
                if search(done | {i}, nxt):
                    return True
        return False

    return search(frozenset(), {})


def test_checker_accepts_and_rejects_known_histories():
    good = [Op(0, PUT, b"x", b"1", 0, 10), Op(1, GET, b"x", b"", 5, 20, b"")]
    assert linearizable(good)
    stale = [Op(0, PUT, b"x", b"1", 0, 10), Op(1, GET, b"x", b"", 11, 20, b"")]
    assert not linearizable(stale)
    reorder = [Op(0, PUT, b"x", b"1", 0, 10), Op(0, PUT, b"x", b"2", 11, 20),
               Op(1, GET, b"x", b"", 21, 30, b"1")]
    assert not linearizable(reorder)
    concurrent = [Op(0, PUT, b"x", b"1", 0, 50), Op(1, PUT, b"x", b"2", 0, 50),
                  Op(2, GET, b"x", b"", 60, 70, b"1"), Op(2, GET, b"x", b"", 71, 80, b"1")]
    assert linearizable(concurrent)
    flip = concurrent[:3] + [Op(3, GET, b"x", b"", 71, 80, b"2")]
    assert not linearizable(flip)
    maybe = [Op(0, PUT, b"x", b"1", 0, 10, failed=True), Op(1, GET, b"x", b"", 20, 30, b"")]
    assert linearizable(maybe)
    assert linearizable([maybe[0], Op(1, GET, b"x", b"", 20, 30, b"1")])


def random_history(seed: int) -> list[Op]:
    rng = random.Random(seed)
    n_clients = rng.randint(2, 4)
    delays = [rng.randint(10, 3000) for _ in range(n_clients)]
    sim, net, fe, servers, clients = small_dc(n_clients, seed, delays,
                                              DatacenterConfig(intra_delay_us=rng.randint(10, 500)))
    if rng.random() < 0.3:
        servers[rng.randrange(len(servers))].alive = False
    for srv in servers:
        if rng.random() < 0.2:
            net.link("dc", srv.id).drop_nth(srv.id, rng.randint(1, 4))
    history: list[Op] = []
    for j in range(rng.randint(1, 8)):
        ci = rng.randrange(n_clients)
        key = rng.choice([b"a", b"b"])
        kind = rng.choice([GET, PUT])
        op = Op(ci, kind, key, f"v{j}".encode() if kind == PUT else b"", rng.randint(0, 20_000))
        history.append(op)

        def issue(op=op):
            op.invoked = sim.now

            def done(req, resp, op=op):
                op.returned = sim.now
                op.result = resp.value if resp.kind == GET else None
                op.failed = resp.kind == ERROR

            c = clients[op.client]
            if op.kind == GET:
                c.get(op.key, done)
            else:
                c.put(op.key, op.value, done)

        sim.call_at(op.invoked, issue)
    sim.run_until(20_000_000)
    assert all(o.returned is not None for o in history), "operation never completed"
    return history


def test_generated_histories_are_linearizable():
    failures = 0
    for seed in range(1000):
        history = random_history(seed)
        failures += sum(o.failed for o in history)
        assert linearizable(history), f"seed {seed}: {history}"
    assert failures < 100  # errors need several scripted losses on one operation
