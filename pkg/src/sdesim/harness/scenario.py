"""Scenario files: a line-oriented, sectioned text format.

Example::

    [scenario]
    name = demo
    seed = 1
    duration = 60s

    [nodes]
    c1 = client
    s2 = edge clients=c1
    s3 = datacenter
    s4 = datacenter

    [links]
    c1 s2 delay=10us capacity=1Gbps
    s2 s3 delay=5ms capacity=100Mbps queue=1000
    s2 s4 delay=170ms capacity=100Mbps

    [services]
    kv port=80 primary=s3 secondary=s4 critical=false

    [workload]
    bulk client=c1 service=kv start=0s key=big value_size=256KB depth=8

    [events]
    30s link_down s2 s3

Blank lines and ``#`` comments are ignored. Every problem found is reported,
not just the first one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from ..kvstore.datacenter import DatacenterConfig
from ..transport import TransportConfig

NODE_KINDS = ("client", "edge", "datacenter", "router")
WORKLOAD_KINDS = ("bulk", "puts")
EVENT_ACTIONS = ("link_down", "link_up", "drop")

_TIME_UNITS = {"us": 1, "ms": 1_000, "s": 1_000_000}
_RATE_UNITS = {"bps": 1, "kbps": 10**3, "mbps": 10**6, "gbps": 10**9}
_SIZE_UNITS = {"": 1, "b": 1, "kb": 1024, "mb": 1024 * 1024}
_NUM = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:e[+-]?[0-9]+)?)\s*([a-zA-Z]*)\s*$")


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _quantity(text: str, units: dict[str, int], default_unit: Optional[str]) -> int:
    m = _NUM.match(text)
    if not m:
        raise ValueError(f"cannot parse {text!r}")
    unit = m.group(2).lower() or (default_unit or "")
    if unit not in units:
        raise ValueError(f"unknown unit {m.group(2)!r} in {text!r}")
    return round(float(m.group(1)) * units[unit])


def parse_time(text: str) -> int:
    """Duration in microseconds; bare numbers are seconds."""
    return _quantity(text, _TIME_UNITS, "s")


def parse_rate(text: str) -> int:
    return _quantity(text, _RATE_UNITS, "bps")


def parse_size(text: str) -> int:
    return _quantity(text, _SIZE_UNITS, None)


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class NodeSpec:
    id: str
    kind: str
    clients: list[str] = field(default_factory=list)
    gateway: Optional[str] = None


@dataclass
class LinkSpec:
    a: str
    b: str
    delay_us: int
    capacity_bps: int
    queue_limit: int = 1000


@dataclass
class ServiceSpec:
    name: str
    port: int
    primary: str
    secondary: str
    critical: bool = False

    @property
    def address(self) -> tuple:
        return (self.name, self.port)


@dataclass
class WorkloadSpec:
    kind: str
    client: str
    service: str
    start_us: int = 0
    key: str = "k"
    keys: int = 1
    value_size: int = 64
    depth: int = 8
    count: int = 0
    interval_us: int = 1000


@dataclass
class EventSpec:
    time_us: int
    action: str
    a: str
    b: str
    jitter_us: int = 0
    n: int = 0


@dataclass
class DetectorSpec:
    threshold: int = 5
    scope: str = "datacenter"
    duplication: bool = True


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    duration_us: int = 60_000_000
    trace_packets: bool = False
    sample_interval_us: int = 1_000_000
    nodes: list[NodeSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)
    services: list[ServiceSpec] = field(default_factory=list)
    workloads: list[WorkloadSpec] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)
    transport: TransportConfig = field(default_factory=TransportConfig)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    datacenter: DatacenterConfig = field(default_factory=DatacenterConfig)

    def node(self, node_id: str) -> Optional[NodeSpec]:
        return next((n for n in self.nodes if n.id == node_id), None)

    def service(self, name: str) -> Optional[ServiceSpec]:
        return next((s for s in self.services if s.name == name), None)

    def link_spec(self, a: str, b: str) -> Optional[LinkSpec]:
        return next((l for l in self.links if {l.a, l.b} == {a, b}), None)

    @property
    def failure_events(self) -> list[EventSpec]:
        return [e for e in self.events if e.action == "link_down"]


# -- parsing ----------------------------------------------------------------

def _split_attrs(tokens: list[str], where: str, errors: list[str]) -> dict[str, str]:
    attrs = {}
    for tok in tokens:
        if "=" not in tok:
            errors.append(f"{where}: expected key=value, got {tok!r}")
            continue
        k, v = tok.split("=", 1)
        attrs[k.strip()] = v.strip()
    return attrs


class _Reader:
    """Applies typed conversions and collects errors instead of raising."""

    def __init__(self, errors: list[str], where: str, attrs: dict[str, str]):
        self.errors = errors
        self.where = where
        self.attrs = dict(attrs)

    def take(self, key: str, conv, default=None, required: bool = False):
        raw = self.attrs.pop(key, None)
        if raw is None:
            if required:
                self.errors.append(f"{self.where}: missing {key}")
            return default
        try:
            return conv(raw)
        except ValueError as exc:
            self.errors.append(f"{self.where}: bad {key}: {exc}")
            return default

    def finish(self) -> None:
        for key in self.attrs:
            self.errors.append(f"{self.where}: unknown attribute {key!r}")


def _scenario_section(sc: Scenario, attrs: dict, errors: list[str]) -> None:
    r = _Reader(errors, "[scenario]", attrs)
    sc.name = r.take("name", str, sc.name)
    sc.seed = r.take("seed", int, sc.seed)
    sc.duration_us = r.take("duration", parse_time, sc.duration_us)
    sc.trace_packets = r.take("trace_packets", parse_bool, sc.trace_packets)
    sc.sample_interval_us = r.take("sample_interval", parse_time, sc.sample_interval_us)
    r.finish()


def _transport_section(sc: Scenario, attrs: dict, errors: list[str]) -> None:
    r = _Reader(errors, "[transport]", attrs)
    t = sc.transport
    values = dict(
        rto_initial_us=r.take("rto_initial", parse_time, t.rto_initial_us),
        rto_cap_us=r.take("rto_cap", parse_time, t.rto_cap_us),
        window=r.take("window", parse_size, t.window),
        mss=r.take("mss", parse_size, t.mss),
        syn_timeouts=r.take("syn_timeouts", int, t.syn_timeouts),
    )
    r.finish()
    try:
        sc.transport = TransportConfig(**values)
    except ValueError as exc:
        errors.append(f"[transport]: {exc}")


def _detector_section(sc: Scenario, attrs: dict, errors: list[str]) -> None:
    r = _Reader(errors, "[detector]", attrs)
    d = sc.detector
    d.threshold = r.take("threshold", int, d.threshold)
    d.scope = r.take("scope", str, d.scope)
    d.duplication = r.take("duplication", parse_bool, d.duplication)
    r.finish()
    if d.threshold < 1:
        errors.append("[detector]: threshold must be at least 1")
    if d.scope not in ("datacenter", "flow"):
        errors.append(f"[detector]: unknown scope {d.scope!r}")


def _datacenter_section(sc: Scenario, attrs: dict, errors: list[str]) -> None:
    r = _Reader(errors, "[datacenter]", attrs)
    d = sc.datacenter
    d.rows = r.take("rows", int, d.rows)
    d.cols = r.take("cols", int, d.cols)
    d.rows_read = r.take("rows_read", parse_bool, d.rows_read)
    d.intra_delay_us = r.take("intra_delay", parse_time, d.intra_delay_us)
    d.intra_capacity_bps = r.take("intra_capacity", parse_rate, d.intra_capacity_bps)
    d.intra_queue_limit = r.take("intra_queue", int, d.intra_queue_limit)
    d.timeout_floor_us = r.take("timeout_floor", parse_time, d.timeout_floor_us)
    r.finish()
    if d.rows < 1 or d.cols < 1:
        errors.append("[datacenter]: rows and cols must be positive")


_KV_SECTIONS = {"scenario": _scenario_section, "transport": _transport_section,
                "detector": _detector_section, "datacenter": _datacenter_section}


def _node_line(sc: Scenario, line: str, where: str, errors: list[str]) -> None:
    if "=" not in line:
        errors.append(f"{where}: expected '<id> = <kind> [attrs]'")
        return
    node_id, rest = (part.strip() for part in line.split("=", 1))
    tokens = rest.split()
    if not node_id or not tokens:
        errors.append(f"{where}: expected '<id> = <kind> [attrs]'")
        return
    kind = tokens[0]
    if kind not in NODE_KINDS:
        errors.append(f"{where}: unknown node kind {kind!r}")
    r = _Reader(errors, where, _split_attrs(tokens[1:], where, errors))
    clients = r.take("clients", lambda v: [c for c in v.split(",") if c], [])
    gateway = r.take("gateway", str)
    r.finish()
    sc.nodes.append(NodeSpec(node_id, kind, clients, gateway))


def _link_line(sc: Scenario, line: str, where: str, errors: list[str]) -> None:
    tokens = line.split()
    if len(tokens) < 2 or "=" in tokens[0] or "=" in tokens[1]:
        errors.append(f"{where}: expected '<a> <b> delay=.. capacity=..'")
        return
    r = _Reader(errors, where, _split_attrs(tokens[2:], where, errors))
    delay = r.take("delay", parse_time, required=True)
    cap = r.take("capacity", parse_rate, required=True)
    queue = r.take("queue", int, 1000)
    r.finish()
    if delay is not None and delay <= 0:
        errors.append(f"{where}: delay must be positive")
    if cap is not None and cap <= 0:
        errors.append(f"{where}: capacity must be positive")
    if queue <= 0:
        errors.append(f"{where}: queue must be positive")
    sc.links.append(LinkSpec(tokens[0], tokens[1], delay or 0, cap or 0, queue))


def _service_line(sc: Scenario, line: str, where: str, errors: list[str]) -> None:
    tokens = line.split()
    if not tokens or "=" in tokens[0]:
        errors.append(f"{where}: expected '<name> port=.. primary=.. secondary=..'")
        return
    r = _Reader(errors, where, _split_attrs(tokens[1:], where, errors))
    svc = ServiceSpec(tokens[0], r.take("port", int, 80),
                      r.take("primary", str, "", required=True),
                      r.take("secondary", str, "", required=True),
                      r.take("critical", parse_bool, False))
    r.finish()
    sc.services.append(svc)


def _workload_line(sc: Scenario, line: str, where: str, errors: list[str]) -> None:
    tokens = line.split()
    if not tokens or tokens[0] not in WORKLOAD_KINDS:
        errors.append(f"{where}: workload kind must be one of {', '.join(WORKLOAD_KINDS)}")
        return
    r = _Reader(errors, where, _split_attrs(tokens[1:], where, errors))
    w = WorkloadSpec(tokens[0], r.take("client", str, "", required=True),
                     r.take("service", str, "", required=True))
    w.start_us = r.take("start", parse_time, 0)
    w.key = r.take("key", str, w.key)
    w.keys = r.take("keys", int, w.keys)
    w.value_size = r.take("value_size", parse_size, w.value_size)
    w.depth = r.take("depth", int, w.depth)
    w.count = r.take("count", int, w.count)
    w.interval_us = r.take("interval", parse_time, w.interval_us)
    r.finish()
    if w.keys < 1 or w.depth < 1 or w.value_size < 0 or w.count < 0 or w.interval_us <= 0:
        errors.append(f"{where}: workload sizes and counts must be positive")
    sc.workloads.append(w)


def _event_line(sc: Scenario, line: str, where: str, errors: list[str]) -> None:
    tokens = line.split()
    if len(tokens) < 4:
        errors.append(f"{where}: expected '<time> <action> <a> <b> [attrs]'")
        return
    try:
        t = parse_time(tokens[0])
    except ValueError as exc:
        errors.append(f"{where}: bad time: {exc}")
        t = 0
    action = tokens[1]
    if action not in EVENT_ACTIONS:
        errors.append(f"{where}: unknown action {action!r}")
    r = _Reader(errors, where, _split_attrs(tokens[4:], where, errors))
    ev = EventSpec(t, action, tokens[2], tokens[3], r.take("jitter", parse_time, 0),
                   r.take("n", int, 0))
    r.finish()
    if action == "drop" and ev.n < 1:
        errors.append(f"{where}: drop needs n=<packet number>")
    sc.events.append(ev)


_LINE_SECTIONS = {"nodes": _node_line, "links": _link_line, "services": _service_line,
                  "workload": _workload_line, "events": _event_line}


def parse_scenario(text: str) -> Scenario:
    """Parse and validate. Raises :class:`ScenarioError` listing every problem."""
    sc = Scenario()
    errors: list[str] = []
    section = None
    kv: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _KV_SECTIONS and section not in _LINE_SECTIONS:
                errors.append(f"{where}: unknown section [{section}]")
                section = None
            continue
        if section is None:
            errors.append(f"{where}: content outside a known section")
        elif section in _KV_SECTIONS:
            if "=" not in line:
                errors.append(f"{where}: expected key = value")
                continue
            k, v = (part.strip() for part in line.split("=", 1))
            kv.setdefault(section, {})[k] = v
        else:
            _LINE_SECTIONS[section](sc, line, where, errors)
    for name, handler in _KV_SECTIONS.items():
        if name in kv:
            handler(sc, kv[name], errors)
    errors.extend(validate(sc))
    if errors:
        raise ScenarioError(errors)
    return sc


def validate(sc: Scenario) -> list[str]:
    """Cross-reference checks on a parsed scenario."""
    errors: list[str] = []
    ids: dict[str, NodeSpec] = {}
    for n in sc.nodes:
        if n.id in ids:
            errors.append(f"duplicate node {n.id!r}")
        ids[n.id] = n
    service_names = {s.name for s in sc.services}
    for name in service_names & set(ids):
        errors.append(f"service {name!r} clashes with a node id")

    def need(node_id: str, what: str, kind: Optional[str] = None) -> None:
        if node_id not in ids:
            errors.append(f"{what} references unknown node {node_id!r}")
        elif kind is not None and ids[node_id].kind != kind:
            errors.append(f"{what}: node {node_id!r} is not a {kind}")

    seen_links = set()
    for l in sc.links:
        need(l.a, f"link {l.a}-{l.b}")
        need(l.b, f"link {l.a}-{l.b}")
        if l.a == l.b:
            errors.append(f"link {l.a}-{l.b} connects a node to itself")
        key = frozenset((l.a, l.b))
        if key in seen_links:
            errors.append(f"duplicate link {l.a}-{l.b}")
        seen_links.add(key)

    for n in sc.nodes:
        for c in n.clients:
            need(c, f"edge {n.id} clients", "client")
        if n.kind == "client":
            gw = n.gateway or next((o for o in _neighbours(sc, n.id)
                                    if o in ids and ids[o].kind == "edge"), None)
            if gw is None:
                errors.append(f"client {n.id!r} has no edge switch neighbour")
            elif sc.link_spec(n.id, gw) is None:
                errors.append(f"client {n.id!r} gateway {gw!r} is not a neighbour")

    addresses = set()
    for s in sc.services:
        if s.address in addresses:
            errors.append(f"duplicate service address {s.name}:{s.port}")
        addresses.add(s.address)
        need(s.primary, f"service {s.name} primary", "datacenter")
        need(s.secondary, f"service {s.name} secondary", "datacenter")
        if s.primary == s.secondary:
            errors.append(f"service {s.name}: primary and secondary must differ")

    for w in sc.workloads:
        need(w.client, f"workload {w.kind}", "client")
        if w.service not in service_names:
            errors.append(f"workload {w.kind} references unknown service {w.service!r}")
        if w.start_us > sc.duration_us:
            errors.append(f"workload {w.kind} starts after the end of the run")

    for e in sc.events:
        need(e.a, f"event {e.action}")
        need(e.b, f"event {e.action}")
        if e.a in ids and e.b in ids and sc.link_spec(e.a, e.b) is None:
            errors.append(f"event {e.action}: no link between {e.a!r} and {e.b!r}")
        if e.time_us + e.jitter_us > sc.duration_us:
            errors.append(f"event {e.action} at {e.time_us}us is after the end of the run")
    if sc.duration_us <= 0:
        errors.append("duration must be positive")
    return errors


def _neighbours(sc: Scenario, node_id: str) -> list[str]:
    out = []
    for l in sc.links:
        if l.a == node_id:
            out.append(l.b)
        elif l.b == node_id:
            out.append(l.a)
    return out


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def bundled_scenarios() -> list[str]:
    root = resources.files("sdesim.scenarios")
    return sorted(p.name[:-len(".scn")] for p in root.iterdir() if p.name.endswith(".scn"))


def bundled_scenario_text(name: str) -> str:
    return resources.files("sdesim.scenarios").joinpath(f"{name}.scn").read_text()


def bundled_scenario(name: str) -> Scenario:
    return parse_scenario(bundled_scenario_text(name))


def resolve_scenario_text(ref: str) -> str:
    """Read a scenario from a path, or from the bundled set by name."""
    path = Path(ref)
    if path.exists():
        return path.read_text()
    if ref in bundled_scenarios():
        return bundled_scenario_text(ref)
    raise FileNotFoundError(f"no scenario file or bundled scenario named {ref!r}")
