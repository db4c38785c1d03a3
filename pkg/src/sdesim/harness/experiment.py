"""Build a simulated world from a scenario, run it and write the outputs."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from ..kvstore.client import BulkReader, PutStream
from ..kvstore.datacenter import Frontend, build_datacenter
from ..kvstore.tags import Tag
from ..sde import EdgeController, EdgeSwitch, ServiceConfig
from ..simnet import Link, Network, Node, Simulator, TraceRecord, trace_to_csv
from ..transport import Host
from .metrics import Metrics, StatSample, compute_metrics, stats_to_csv
from .scenario import Scenario

logger = logging.getLogger(__name__)

PRELOAD_TAG = Tag(1, 0)


@dataclass
class World:
    scenario: Scenario
    sim: Simulator
    net: Network
    controller: EdgeController
    switches: dict[str, EdgeSwitch] = field(default_factory=dict)
    frontends: dict[str, Frontend] = field(default_factory=dict)
    hosts: dict[str, Host] = field(default_factory=dict)
    workloads: list = field(default_factory=list)
    samples: list[StatSample] = field(default_factory=list)


@dataclass
class RunResult:
    world: World
    metrics: Metrics
    trace: list[TraceRecord]
    samples: list[StatSample]


def effective_scenario(sc: Scenario, seed: Optional[int] = None,
                       duplication: Optional[bool] = None,
                       threshold: Optional[int] = None) -> Scenario:
    """Copy of ``sc`` with command-line overrides applied."""
    det = replace(sc.detector)
    if duplication is not None:
        det.duplication = duplication
    if threshold is not None:
        det.threshold = threshold
    return replace(sc, seed=sc.seed if seed is None else seed, detector=det)


def build_world(sc: Scenario) -> World:
    sim = Simulator(sc.seed, trace_packets=sc.trace_packets)
    net = Network(sim)
    services = [ServiceConfig(s.address, (s.primary, s.port), (s.secondary, s.port), s.critical)
                for s in sc.services]
    controller = EdgeController(services, sc.detector.threshold, sc.detector.duplication,
                                sc.detector.scope)
    world = World(sc, sim, net, controller)

    for n in sc.nodes:
        if n.kind == "client":
            node = world.hosts[n.id] = Host(n.id, sc.transport)
        elif n.kind == "edge":
            node = world.switches[n.id] = EdgeSwitch(n.id, n.clients, mss=sc.transport.mss)
            controller.attach(node)
        elif n.kind == "datacenter":
            node = world.frontends[n.id] = Frontend(n.id, sc.transport)
        else:
            node = Node(n.id)
        net.add_node(node)
    for l in sc.links:
        net.add_link(Link(l.a, l.b, l.delay_us, l.capacity_bps, l.queue_limit))
    for fe in world.frontends.values():
        build_datacenter(net, fe, sc.datacenter)
    for s in sc.services:
        for dc in (s.primary, s.secondary):
            world.frontends[dc].serve(s.port)
    for n in sc.nodes:
        if n.kind == "client":
            gw = n.gateway or next(o for o in _neighbours(sc, n.id) if o in world.switches)
            net.set_gateway(n.id, gw)

    for i, w in enumerate(sc.workloads):
        svc = sc.service(w.service)
        host = world.hosts[w.client]
        name = f"{w.kind}{i}"
        if w.kind == "bulk":
            value = random.Random(f"{sc.seed}:value:{w.key}").randbytes(w.value_size)
            for fe in (world.frontends[svc.primary], world.frontends[svc.secondary]):
                fe.preload(w.key.encode(), value, PRELOAD_TAG)
            wl = BulkReader(host, svc.address, w.key.encode(), w.depth, name)
        else:
            keys = [f"{w.key}{k}".encode() for k in range(w.keys)]
            wl = PutStream(host, svc.address, keys, w.count, w.interval_us, w.value_size,
                           svc.critical, random.Random(f"{sc.seed}:puts:{i}"), name)
        world.workloads.append(wl)
        sim.call_at(w.start_us, wl.start)

    event_rng = random.Random(f"{sc.seed}:events")
    for ev in sc.events:
        t = ev.time_us + (event_rng.randrange(ev.jitter_us + 1) if ev.jitter_us else 0)
        if ev.action == "drop":
            sim.call_at(t, _script_drop, net, ev.a, ev.b, ev.n)
        else:
            net.set_link_state(ev.a, ev.b, ev.action == "link_up", at=t)

    if sc.sample_interval_us > 0:
        sim.call_at(min(sc.sample_interval_us, sc.duration_us), _sample, world, 0,
                    [0] * len(world.workloads))
    return world


def _neighbours(sc: Scenario, node_id: str) -> list[str]:
    return [l.b if l.a == node_id else l.a for l in sc.links if node_id in (l.a, l.b)]


def _script_drop(net: Network, a: str, b: str, n: int) -> None:
    link = net.link(a, b)
    link.drop_nth(a, link.directions[a].accepted + n)


def _sample(world: World, last_t: int, last_bytes: list[int]) -> None:
    sim = world.sim
    now = sim.now
    elapsed = now - last_t
    for i, wl in enumerate(world.workloads):
        conn = wl.conn
        delta = wl.bytes_received - last_bytes[i]
        last_bytes[i] = wl.bytes_received
        world.samples.append(StatSample(now, conn.flow_id if conn else "",
                                        conn.srtt if conn else None,
                                        delta * 8 * 1_000_000 // elapsed))
    end = world.scenario.duration_us
    if now < end:
        sim.call_at(min(now + world.scenario.sample_interval_us, end), _sample, world, now,
                    last_bytes)


def _final_records(world: World) -> None:
    sim = world.sim
    for dc, fe in sorted(world.frontends.items()):
        for key in fe.keys():
            sim.record(dc, "store_final", detail=f"key={key.decode()} tag={fe.stored_tag(key)}")
    for sid, sw in sorted(world.switches.items()):
        for flow in sw.flows.values():
            sim.record(sid, "flow_stats", flow.flow_id,
                       detail=f"mode={flow.mode} client_packets={flow.client_packets} "
                              f"dc_packets={flow.dc_packets} max_buffered={flow.max_buffered}")
    for wl in world.workloads:
        sim.record(wl.host.id, "app_totals", detail=f"workload={wl.name} "
                                                    f"bytes_received={wl.bytes_received}")


def run_experiment(sc: Scenario, out_dir=None) -> RunResult:
    """Run ``sc`` to completion; write trace.csv, conn_stats.csv, metrics.json if asked."""
    world = build_world(sc)
    world.sim.run_until(sc.duration_us)
    _final_records(world)
    trace = world.sim.trace
    metrics = compute_metrics(trace, world.samples, sc)
    if out_dir is not None:
        write_outputs(Path(out_dir), trace, world.samples, metrics)
    return RunResult(world, metrics, trace, world.samples)


def write_outputs(out: Path, trace, samples, metrics: Metrics) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(trace_to_csv(trace))
    (out / "conn_stats.csv").write_text(stats_to_csv(samples))
    (out / "metrics.json").write_text(metrics.to_json())
