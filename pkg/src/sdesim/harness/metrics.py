"""Recovery metrics computed from trace records and connection samples.

Everything here is a pure function of the records, so metrics recomputed from
the files written by a run match the values computed during the run.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Optional

from ..kvstore.tags import ZERO_TAG, Tag
from ..simnet import US_PER_S, TraceRecord
from .scenario import Scenario

STATS_COLUMNS = ("time_us", "flow_id", "srtt_us", "throughput_bps")


class MetricsError(ValueError):
    pass


class StatSample(NamedTuple):
    time_us: int
    flow_id: str
    srtt_us: Optional[int]
    throughput_bps: int


def stats_to_csv(rows: Iterable[StatSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    for r in rows:
        w.writerow((r.time_us, r.flow_id, "" if r.srtt_us is None else r.srtt_us,
                    r.throughput_bps))
    return buf.getvalue()


def stats_from_csv(text: str) -> list[StatSample]:
    reader = csv.reader(io.StringIO(text))
    next(reader, None)
    return [StatSample(int(r[0]), r[1], int(r[2]) if r[2] else None, int(r[3]))
            for r in reader]


def parse_detail(detail: str) -> dict[str, str]:
    out = {}
    for part in detail.split():
        if "=" in part:
            k, v = part.split("=", 1)
            out[k] = v
    return out


@dataclass
class RtoResult:
    seconds: float
    recovered: bool


@dataclass
class Metrics:
    failure_time_seconds: Optional[float] = None
    detection_time_seconds: Optional[float] = None
    rto_seconds: Optional[float] = None
    recovered: Optional[bool] = None
    rpo_lost_updates: int = 0
    critical_puts_acked: int = 0
    rtt_series: list = field(default_factory=list)
    throughput_series: list = field(default_factory=list)
    per_flow_packets: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


# -- individual measurements ------------------------------------------------------

def failure_time(trace: Iterable[TraceRecord]) -> Optional[int]:
    return next((r.time_us for r in trace if r.kind == "link_down"), None)


def measure_rpo(client_acked_log: Iterable[tuple[bytes, Tag]],
                surviving_store: dict[bytes, Tag]) -> int:
    """Acked critical puts whose tag is newer than what the survivor holds."""
    return sum(1 for key, tag in client_acked_log
               if tag > surviving_store.get(key, ZERO_TAG))


def measure_rto(failure_time_us: Optional[int], trace: list[TraceRecord], end_us: int,
                services: Optional[set[str]] = None) -> RtoResult:
    """Time from the failure to the first successful response served after it.

    Responses still in flight on a connection that predates the failure do
    not count unless that connection was handed over to another datacenter.
    """
    if failure_time_us is None:
        raise MetricsError("no disaster in this run: RTO is undefined")
    old_flows = {r.flow_id for r in trace
                 if r.kind == "connect" and r.time_us <= failure_time_us}
    promoted: dict[str, int] = {}
    for r in trace:
        if r.kind == "promotion" and r.flow_id not in promoted:
            promoted[r.flow_id] = r.time_us
    for r in trace:
        if r.kind != "app_response" or r.time_us <= failure_time_us:
            continue
        d = parse_detail(r.detail)
        if d.get("op") == "error":
            continue
        if services is not None and d.get("svc") not in services:
            continue
        if r.flow_id in old_flows:
            t = promoted.get(r.flow_id)
            if t is None or t > r.time_us:
                continue
        return RtoResult((r.time_us - failure_time_us) / US_PER_S, True)
    return RtoResult((end_us - failure_time_us) / US_PER_S, False)


def mean_between(samples: Iterable[StatSample], t0_us: int, t1_us: int, attr: str,
                 flow_prefix: str = "") -> Optional[float]:
    vals = [getattr(s, attr) for s in samples
            if t0_us <= s.time_us < t1_us and s.flow_id.startswith(flow_prefix)
            and getattr(s, attr) is not None]
    return sum(vals) / len(vals) if vals else None


# -- whole-run metrics --------------------------------------------------------------

def _failed_datacenters(scenario: Scenario, trace: list[TraceRecord]) -> set[str]:
    dcs = {n.id for n in scenario.nodes if n.kind == "datacenter"}
    rec = next((r for r in trace if r.kind == "link_down"), None)
    if rec is None:
        return set()
    ends = set(rec.detail.split("-"))
    return ends & dcs


def compute_metrics(trace: list[TraceRecord], samples: list[StatSample],
                    scenario: Scenario, end_us: Optional[int] = None) -> Metrics:
    end_us = scenario.duration_us if end_us is None else end_us
    m = Metrics()
    t_fail = failure_time(trace)
    failed = _failed_datacenters(scenario, trace)
    affected = {s.name for s in scenario.services if s.primary in failed}
    if t_fail is not None:
        m.failure_time_seconds = t_fail / US_PER_S
        rto = measure_rto(t_fail, trace, end_us, affected or None)
        m.rto_seconds = rto.seconds
        m.recovered = rto.recovered
        t_det = next((r.time_us for r in trace if r.kind == "disaster"), None)
        if t_det is not None:
            m.detection_time_seconds = (t_det - t_fail) / US_PER_S

    stores: dict[str, dict[bytes, Tag]] = {}
    for r in trace:
        if r.kind == "store_final":
            d = parse_detail(r.detail)
            stores.setdefault(r.node, {})[d["key"].encode()] = Tag.parse(d["tag"])
    acked: dict[str, list[tuple[bytes, Tag]]] = {}
    counts = {"responses": 0, "errors": 0}
    for r in trace:
        if r.kind != "app_response":
            continue
        d = parse_detail(r.detail)
        if d["op"] == "error":
            counts["errors"] += 1
            continue
        counts["responses"] += 1
        if d["op"] == "put" and d["critical"] == "1":
            acked.setdefault(d["svc"], []).append((d["key"].encode(), Tag.parse(d["tag"])))
    for svc in scenario.services:
        log = acked.get(svc.name, [])
        m.critical_puts_acked += len(log)
        survivor = svc.secondary if svc.primary in failed else svc.primary
        m.rpo_lost_updates += measure_rpo(log, stores.get(survivor, {}))

    m.rtt_series = [[s.time_us, s.flow_id, s.srtt_us] for s in samples]
    m.throughput_series = [[s.time_us, s.flow_id, s.throughput_bps] for s in samples]

    bytes_delivered = 0
    for r in trace:
        if r.kind in ("flow_retired", "flow_stats"):
            d = parse_detail(r.detail)
            m.per_flow_packets[r.flow_id] = {"client": int(d.get("client_packets", 0)),
                                             "dc": int(d.get("dc_packets", 0))}
        elif r.kind == "app_totals":
            bytes_delivered += int(parse_detail(r.detail)["bytes_received"])
    kinds = {}
    for r in trace:
        kinds[r.kind] = kinds.get(r.kind, 0) + 1
    m.totals = {
        "bytes_delivered": bytes_delivered,
        "responses": counts["responses"],
        "errors": counts["errors"],
        "reconnects": kinds.get("app_reconnect", 0),
        "drops": kinds.get("drop", 0),
        "resets_sent": kinds.get("rst", 0),
        "promotions": kinds.get("promotion", 0),
        "divergences": kinds.get("divergence", 0),
        "trace_records": sum(kinds.values()),
    }
    return m
