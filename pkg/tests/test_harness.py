import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilenet.fabric import FabricParams
from tilenet.faults import FaultModel
from tilenet.harness import (
    PacketGen,
    Scenario,
    ScenarioError,
    analytic_latency,
    chain_hops,
    echo_throughput,
    goodput_bound_gbps,
    load_curve,
    load_scenario,
    packet_gen,
    predicted_chain_latency,
    preflight,
    run_scenario,
    scenario_digest,
)
from tilenet.layouts import deadlock_example, udp_echo_stack
from tilenet.packets import udp_frame

ROOT = Path(__file__).resolve().parents[1]


@pytest.mark.parametrize("kw", [{"workload": "nope"}, {"mode": "sideways"}, {"requests": 0},
                                {"clients": 0}])
def test_bad_scenarios_rejected(kw):
    with pytest.raises(ScenarioError):
        Scenario(**kw)


def test_scenario_json_roundtrip_and_unknown_fields():
    s = Scenario("echo", payload=10, fault={"p_loss": 0.1, "seed": 3})
    assert isinstance(s.fault, FaultModel)
    assert Scenario.from_json(json.loads(json.dumps(s.to_json()))) == s
    with pytest.raises(ScenarioError):
        Scenario.from_json({"workload": "echo", "colour": "blue"})


def test_load_scenario_resolves_relative_topology(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"workload": "echo", "topology": "t.xml"}))
    assert load_scenario(p).topology == str((tmp_path / "t.xml").resolve())


def test_bundled_scenarios_parse():
    for p in sorted((ROOT / "scenarios").glob("*.json")):
        load_scenario(p)


def test_open_loop_schedule():
    g = packet_gen("open", 64, count=5, interval=10, clients=2)
    assert g.start() == [(0, 0, 0), (10, 1, 1), (20, 2, 0), (30, 3, 1), (40, 4, 0)]
    assert g.done(0, 99) == []


@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 50), st.randoms())
def test_closed_loop_keeps_one_request_per_client(count, clients, think, rnd):
    g = PacketGen("closed", count, clients=clients, think=think)
    live = {req: cyc for cyc, req, _ in g.start()}
    now = 0
    while live:
        assert len(live) <= clients
        req = rnd.choice(sorted(live))
        now = max(now, live.pop(req)) + 1
        for cyc, r, _ in g.done(req, now):
            assert cyc == now + think
            live[r] = cyc
    assert g.issued == count and g.max_outstanding == min(clients, count)


def test_closed_echo_latency_has_no_variance():
    res = run_scenario(Scenario("echo", payload=1, requests=200, mode="closed"))
    m = res.metrics
    assert m.answered == 200
    assert m.latency_min == m.latency_max == 45


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["open", "closed"]))
def test_requests_are_conserved_under_faults(seed, mode):
    fault = FaultModel(p_loss=0.05, p_dup=0.05, p_reorder=0.1, seed=seed)
    scn = Scenario("echo", payload=100, requests=150, mode=mode, clients=3, interval=30,
                   timeout=3000, fault=fault, seed=seed)
    m = run_scenario(scn).metrics
    assert m.answered + m.dropped + m.in_flight == m.requests == 150
    assert m.extra["bad_replies"] == 0
    assert sum(m.drop_reasons.values()) == m.dropped


def test_same_scenario_same_digest():
    scn = Scenario("echo", payload=80, requests=120, mode="closed", clients=2, timeout=2000,
                   fault=FaultModel(p_loss=0.05, p_reorder=0.1, seed=4), seed=4, trace=True)
    a, b = run_scenario(scn), run_scenario(scn)
    assert scenario_digest(a) == scenario_digest(b)
    scn.fault = FaultModel(p_loss=0.05, p_reorder=0.1, seed=5)
    assert scenario_digest(run_scenario(scn)) != scenario_digest(a)


def test_duration_leaves_requests_in_flight():
    m = run_scenario(Scenario("echo", payload=64, requests=100, interval=50, duration=1000)).metrics
    assert 0 < m.answered < 100
    assert m.answered + m.dropped + m.in_flight == 100


def test_rs_and_vr_workloads():
    rs = run_scenario(Scenario("rs", requests=12, interval=100)).metrics
    assert rs.answered == 12
    vr = run_scenario(Scenario("vr", requests=40, mode="closed", clients=4)).metrics
    assert vr.answered == 40


def test_tcp_stream_workload():
    m = run_scenario(Scenario("tcp_stream", stream_bytes=30_000)).metrics
    assert m.answered == 1 and m.goodput_bps > 0


def test_preflight_rejects_deadlocking_topology():
    with pytest.raises(ScenarioError, match="dependency cycle"):
        preflight(deadlock_example(ordered=False))
    scn = Scenario("echo", topology=str(ROOT / "configs" / "rx_unordered.xml"))
    with pytest.raises(ScenarioError):
        run_scenario(scn)


def test_load_curve_is_monotone():
    rows = load_curve([64, 32, 16, 8, 4], requests=200)
    gbps = [r["gbps"] for r in rows]
    assert gbps == sorted(gbps)
    med = [r["median"] for r in rows]
    assert med == sorted(med)
    assert gbps[-1] <= 32.0 + 1e-9


def test_chain_hops_and_analytic_model():
    cfg = udp_echo_stack()
    assert chain_hops(cfg, "echo") == [1, 1, 1, 2, 1, 1]
    assert analytic_latency([2] * 7, [1, 1, 1, 2, 1, 1]) == 45
    frame = len(udp_frame(b"x"))
    assert predicted_chain_latency(cfg, "echo", FabricParams(), frame) == 45
    with pytest.raises(ValueError):
        analytic_latency([2, 2], [1, 1])


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 6), min_size=7, max_size=7), st.integers(1, 300))
def test_simulated_latency_equals_model(hop, lats, payload):
    cfg = udp_echo_stack()
    chain = cfg.chains[0].tiles
    for name, lat in zip(chain, lats):
        cfg.tile(name).latency = lat
    params = FabricParams(hop_latency=hop)
    res = run_scenario_on(cfg, params, payload)
    assert res == predicted_chain_latency(cfg, "echo", params, len(udp_frame(bytes(payload))))


def run_scenario_on(cfg, params, payload):
    from tilenet.fabric import Fabric
    from tilenet.layouts import ECHO_PORT

    fab = Fabric(cfg, {}, params)
    fab.wire_in("eth_rx").send(udp_frame(bytes(payload), dst_port=ECHO_PORT), 0)
    fab.run(until_idle=True)
    (rec,) = fab.egress
    return rec.last_cycle - rec.ingress_cycle


# cycles per packet of a saturated single stack, frozen from the flit count of each message
@pytest.mark.parametrize("payload,cpp", [(64, 4), (128, 5), (256, 7), (1024, 19)])
def test_saturated_cycles_per_packet(payload, cpp):
    r = echo_throughput(payload)
    assert r["cycles_per_packet"] == cpp
    assert goodput_bound_gbps(payload) == pytest.approx(payload * 8 * 0.25 / (-(-payload // 64) + 2))
