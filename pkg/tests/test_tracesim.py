import math

import pytest

from adlog.trace import EventKind, format_trace
from adlog.tracesim import (
    FlowSpec, ScenarioConfig, ScenarioError, SimulationError, build_topology, data_packet_counts,
    default_scenario, packets_per_flow, simulate,
)


def run(duration=0.5, seed=1, attack=True, jitter=0.01):
    return simulate(build_topology(default_scenario(duration, seed, attack, jitter)), seed, duration)


def test_default_topologies():
    clean = build_topology(default_scenario(1.0, attack=False))
    attack = build_topology(default_scenario(1.0, attack=True))
    assert clean.nodes == attack.nodes == 16
    assert len(clean.flows) == 8 and all(f.protocol == "udp" for f in clean.flows)
    assert clean.hidden is None
    assert attack.hidden.pair == (14, 15)
    assert attack.gateway_of[14] != attack.gateway_of[15]
    for f in clean.flows:
        assert clean.gateway_of[f.src] == clean.gateway_of[f.dst]


def test_two_nodes_no_flows_is_valid():
    topo = build_topology(ScenarioConfig(nodes=2))
    assert simulate(topo, 0, 1.0).events == []


@pytest.mark.parametrize("kw,match", [
    ({"flows": [FlowSpec(0, 9)]}, "unknown node"),
    ({"gateways": [[0, 1], [2, 3]], "hidden_pair": (0, 1)}, "single gateway"),
    ({"gateways": [[0, 1]]}, "without a gateway"),
    ({"nodes": 1}, "at least two"),
])
def test_topology_rejections(kw, match):
    cfg = ScenarioConfig(nodes=kw.pop("nodes", 4), **kw)
    with pytest.raises(ScenarioError, match=match):
        build_topology(cfg)


@pytest.mark.parametrize("kw", [
    {"protocol": "icmp"}, {"packet_size": 0}, {"rate": -1.0}, {"start": 2.0, "stop": 1.0},
])
def test_flowspec_invariants(kw):
    with pytest.raises(ScenarioError):
        FlowSpec(0, 1, **kw)
    with pytest.raises(ScenarioError):
        FlowSpec(3, 3)


def test_packets_per_flow_hand_count():
    # 1e6 * 0.12 / (1500 * 8) = 10
    assert packets_per_flow(FlowSpec(0, 1, rate=1.0e6, packet_size=1500), 0.12) == 10
    log = run(0.12, jitter=0.0)
    counts = data_packet_counts(log)
    assert sorted(counts) == [0, 1, 4, 5, 8, 9, 13, 14]
    assert all(c == 10 for c in counts.values())


def test_zero_packets_gives_empty_log():
    topo = build_topology(default_scenario(0.001))
    assert simulate(topo, 0, 0.001).events == []
    with pytest.raises(ScenarioError):
        simulate(topo, 0, 0.0)


def test_determinism_byte_identical():
    assert format_trace(run(seed=5).events) == format_trace(run(seed=5).events)
    assert format_trace(run(seed=5).events) != format_trace(run(seed=6).events)


def test_timestamps_monotone():
    times = [e.time for e in run(1.0).events]
    assert all(a <= b for a, b in zip(times, times[1:]))


def test_redirection_soundness():
    attack = run(1.0, attack=True)
    clean = run(1.0, attack=False)
    assert attack.attack_present and attack.ground_truth.pair == (14, 15)
    assert not clean.attack_present and clean.ground_truth is None
    rx14 = [e for e in attack.events if e.kind is EventKind.RECEIVE and e.src[0] == 14]
    assert rx14 and all(e.to_node == 15 for e in rx14)
    assert all(e.dst[0] == 2 for e in rx14 if e.ptype == "udp")
    flows = {(f.src, f.dst) for f in build_topology(default_scenario(1.0, attack=False)).flows}
    for e in clean.events:
        if e.kind is EventKind.RECEIVE and (e.src[0], e.dst[0]) in flows:
            assert e.to_node == e.dst[0]


def test_attack_fraction_exact():
    counts = data_packet_counts(run(1.2, jitter=0.0))
    assert counts[14] / sum(counts.values()) == 0.125


def test_packet_id_overflow_reported():
    topo = build_topology(default_scenario(0.5))
    with pytest.raises(SimulationError):
        simulate(topo, 0, 0.5, max_packet_id=10)


def test_scenario_config_dict_round_trip():
    cfg = default_scenario(2.0, seed=4)
    again = ScenarioConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert math.isinf(again.flows[0].stop)
