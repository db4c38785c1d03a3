import json
import random

import pytest

from sdesim.harness.cli import EXIT_INVALID, EXIT_OK, EXIT_UNRECOVERED, main
from sdesim.harness.experiment import effective_scenario, run_experiment
from sdesim.harness.metrics import (MetricsError, compute_metrics, measure_rpo, measure_rto,
                                    stats_from_csv)
from sdesim.harness.scenario import (ScenarioError, bundled_scenario, bundled_scenarios,
                                     parse_scenario)
from sdesim.kvstore.tags import Tag
from sdesim.simnet import trace_from_csv


def mini(duration="30s", workload="bulk", events="5s link_down s2 s3", threshold=5,
         remote_delay="170ms", critical=False, extra="", seed=1):
    """Small version of the bundled topology for fast runs."""
    if workload == "bulk":
        wl = "bulk client=c1 service=kv start=0s key=big value_size=64KB depth=4"
    else:
        wl = ("puts client=c1 service=kv start=0.5s key=acct keys=3 count=%d interval=5ms "
              "value_size=32" % workload)
    return f"""
[scenario]
name = mini
seed = {seed}
duration = {duration}
{extra}

[transport]
mss = 8960

[detector]
threshold = {threshold}

[nodes]
c1 = client
s2 = edge clients=c1
s3 = datacenter
s4 = datacenter

[links]
c1 s2 delay=10us capacity=1Gbps
s2 s3 delay=5ms capacity=100Mbps
s2 s4 delay={remote_delay} capacity=100Mbps

[services]
kv port=80 primary=s3 secondary=s4 critical={str(critical).lower()}

[workload]
{wl}

[events]
{events}
"""


# -- scenario parsing -----------------------------------------------------------------

def test_bundled_fig3_topology():
    sc = bundled_scenario("fig3")
    links = {(l.a, l.b): l for l in sc.links}
    assert links[("s2", "s3")].delay_us == 5_000
    assert links[("s2", "s4")].delay_us == 170_000
    assert links[("s2", "s3")].capacity_bps == links[("s2", "s4")].capacity_bps == 100_000_000
    assert [(e.time_us, e.action) for e in sc.events] == [(200_000_000, "link_down")]
    assert sc.duration_us == 400_000_000


def test_every_bundled_scenario_parses():
    assert {"fig3", "rpo"} <= set(bundled_scenarios())
    for name in bundled_scenarios():
        bundled_scenario(name)


def test_unknown_node_is_named():
    text = mini().replace("s2 s4 delay=170ms", "s2 s9 delay=170ms")
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    assert any("s9" in e for e in err.value.errors)


def test_all_errors_are_reported():
    text = (mini(events="500s link_down s2 s3")
            .replace("delay=5ms", "delay=0ms")
            .replace("capacity=1Gbps", "capacity=-1Gbps")
            + "\n[services]\nkv port=80 primary=s3 secondary=s4\n")
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    msgs = " | ".join(err.value.errors)
    assert len(err.value.errors) >= 4, msgs
    for word in ("delay", "capacity", "duplicate", "500"):
        assert word in msgs, msgs


def test_identical_primary_and_secondary_is_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario(mini().replace("secondary=s4", "secondary=s3"))


def test_empty_events_is_a_valid_no_disaster_run():
    sc = parse_scenario(mini(events=""))
    assert sc.events == []


@pytest.mark.parametrize("text,unit", [("1.5s", 1_500_000), ("250ms", 250_000), ("7us", 7),
                                        ("2", 2_000_000)])
def test_time_units(text, unit):
    sc = parse_scenario(mini(duration=text, events=""))
    assert sc.duration_us == unit


# -- metrics ------------------------------------------------------------------------

def test_rpo_of_an_empty_log_is_zero():
    assert measure_rpo([], {}) == 0


def test_rpo_counts_acked_tags_newer_than_the_survivor():
    log = [(b"a", Tag(1, 5)), (b"a", Tag(2, 5)), (b"b", Tag(1, 5)), (b"c", Tag(1, 5))]
    assert measure_rpo(log, {b"a": Tag(1, 5), b"b": Tag(3, 1)}) == 2


def test_rto_without_failure_is_refused():
    with pytest.raises(MetricsError):
        measure_rto(None, [], 10)


def test_run_without_disaster_has_no_rto():
    res = run_experiment(parse_scenario(mini(duration="3s", events="")))
    assert res.metrics.rto_seconds is None and res.metrics.failure_time_seconds is None
    assert res.metrics.totals["responses"] > 0


def test_threshold_one_recovers_within_two_seconds():
    res = run_experiment(parse_scenario(mini(duration="15s", threshold=1)))
    m = res.metrics
    # one client timeout (1 s) then a new connection to the remote site
    assert 1.0 <= m.detection_time_seconds < 1.1
    assert 1.0 < m.rto_seconds <= 2.0 and m.recovered


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(parse_scenario(mini(duration="40s")), out), out


def test_default_detector_recovers_in_about_23_seconds(default_run):
    m = default_run[0].metrics
    # 1 + 2 + 4 + 8 + 8 s of client backoff
    assert m.detection_time_seconds == pytest.approx(23, abs=0.05)
    assert 23 <= m.rto_seconds <= 24.5 and m.recovered
    assert m.rto_seconds >= m.detection_time_seconds


def test_metrics_recomputed_from_files_match(default_run):
    res, out = default_run
    trace = trace_from_csv((out / "trace.csv").read_text())
    samples = stats_from_csv((out / "conn_stats.csv").read_text())
    again = compute_metrics(trace, samples, res.world.scenario)
    assert again.to_json() == (out / "metrics.json").read_text()
    saved = json.loads((out / "metrics.json").read_text())
    for key in ("rto_seconds", "detection_time_seconds", "rpo_lost_updates", "totals"):
        assert key in saved


def test_throughput_series_integrates_to_delivered_bytes(default_run):
    res, _ = default_run
    sc = res.world.scenario
    m = res.metrics
    total, last = 0, 0
    for t, _, bps in m.throughput_series:
        total += bps * (t - last) / 8e6
        last = t
    assert total == pytest.approx(m.totals["bytes_delivered"], rel=0.01)
    assert last == sc.duration_us


def test_plain_flow_gets_reset_and_reconnects(default_run):
    m = default_run[0].metrics
    assert m.totals["resets_sent"] == 1 and m.totals["reconnects"] == 1
    assert m.totals["promotions"] == 0


# -- control versus treatment -----------------------------------------------------------

def rpo_pair(seed):
    base = parse_scenario(mini(duration="40s", workload=600, critical=True,
                               events="2s link_down s2 s3 jitter=500ms", seed=seed))
    on = run_experiment(effective_scenario(base, duplication=True)).metrics
    off = run_experiment(effective_scenario(base, duplication=False)).metrics
    return on, off


@pytest.mark.parametrize("seed", [1, 2])
def test_duplication_never_loses_more_than_the_baseline(seed):
    on, off = rpo_pair(seed)
    assert on.rpo_lost_updates == 0
    assert on.critical_puts_acked >= 300
    assert off.rpo_lost_updates > on.rpo_lost_updates
    assert on.totals["promotions"] == 1


# -- stream equivalence ------------------------------------------------------------------

def equivalence_run(seed: int):
    """One critical flow with one scripted loss on a random leg and direction."""
    rng = random.Random(seed)
    a, b = rng.choice([("s2", "s3"), ("s3", "s2"), ("s2", "s4"), ("s4", "s2")])
    at = rng.choice(["0s", "0.3s", "0.6s"])
    events = f"{at} drop {a} {b} n={rng.randint(1, 6)}"
    text = mini(duration="8s", workload=rng.randint(20, 80), critical=True, events=events,
                remote_delay=f"{rng.randint(5, 60)}ms", seed=seed)
    return run_experiment(parse_scenario(text))


def check_stream_equivalence(res) -> list[str]:
    """Problems found in one run (an empty list means the replicas stayed identical)."""
    problems = []
    fe = res.world.frontends
    streams = {dc: list(fe[dc].request_streams.values()) for dc in ("s3", "s4")}
    if len(streams["s3"]) != 1 or streams["s3"] != streams["s4"]:
        problems.append("request streams differ")
    wl = res.world.workloads[0]
    if len(wl.acked) != wl.count:
        problems.append(f"{len(wl.acked)} of {wl.count} puts acked")
    kinds = [r.kind for r in res.trace]
    for bad in ("unexpected_response", "divergence"):
        if bad in kinds:
            problems.append(bad)
    if "drop" not in kinds:
        problems.append("scripted loss did not happen")
    sw = res.world.switches["s2"]
    cfg = res.world.scenario.transport
    for flow in sw.flows.values():
        if flow.max_buffered > cfg.window + cfg.mss:
            problems.append(f"buffered {flow.max_buffered} bytes")
    return problems


@pytest.mark.parametrize("seed", range(8))
def test_replica_streams_are_identical_under_single_losses(seed):
    assert check_stream_equivalence(equivalence_run(seed)) == []


# -- determinism and CLI -------------------------------------------------------------------

def test_equal_seeds_give_identical_outputs(tmp_path):
    text = mini(duration="10s", threshold=2)
    for d in ("a", "b"):
        run_experiment(parse_scenario(text), tmp_path / d)
    for f in ("trace.csv", "metrics.json", "conn_stats.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_validate_and_list(tmp_path, capsys):
    assert main(["validate", "--scenario", "fig3"]) == EXIT_OK
    bad = tmp_path / "bad.scn"
    bad.write_text(mini().replace("s2 s4 delay", "s2 s9 delay"))
    assert main(["validate", "--scenario", str(bad)]) == EXIT_INVALID
    assert "s9" in capsys.readouterr().err
    assert main(["validate", "--scenario", str(tmp_path / "missing.scn")]) == EXIT_INVALID
    assert main(["list"]) == EXIT_OK
    assert "fig3" in capsys.readouterr().out


def test_cli_run_writes_outputs_and_reports_unrecovered(tmp_path):
    scn = tmp_path / "short.scn"
    scn.write_text(mini(duration="12s"))  # ends before the 23 s detection
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(scn), "--seed", "4", "--out", str(out)]) \
        == EXIT_UNRECOVERED
    saved = json.loads((out / "metrics.json").read_text())
    assert saved["recovered"] is False and saved["rto_seconds"] == pytest.approx(7.0)
    assert (out / "trace.csv").read_text().startswith("time_us,")
    assert (out / "conn_stats.csv").read_text().startswith("time_us,flow_id,srtt_us,")
    assert main(["run", "--scenario", str(scn), "--threshold", "1",
                 "--out", str(tmp_path / "o2")]) == EXIT_OK
    assert main(["run", "--scenario", str(scn), "--threshold", "0"]) == EXIT_INVALID
