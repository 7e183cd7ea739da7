import pytest

from tilenet.apps.scheduler import scheduler_ceiling_gbps, scheduler_dispatch
from tilenet.fabric import Fabric, Packet
from tilenet.harness import echo_throughput
from tilenet.layouts import ECHO_PORT, multi_stack_echo
from tilenet.packets import PacketMeta, parse_udp_frame, udp_frame
from tilenet.tables import DROP


def test_dispatch_is_strict_round_robin():
    got = scheduler_dispatch(range(7), ["a", "b", "c"])
    assert [r for _, r in got] == ["a", "b", "c", "a", "b", "c", "a"]
    with pytest.raises(ValueError):
        scheduler_dispatch([1], [])


def test_ceiling_for_small_requests():
    # three flits plus one recovery cycle per 64-byte request
    assert scheduler_ceiling_gbps(64) == pytest.approx(32.0)
    assert scheduler_ceiling_gbps(64, recovery=0) == pytest.approx(64 * 8 * 250e6 / 3 / 1e9)


def test_fabric_scheduler_alternates_stacks_and_all_replies_return():
    fab = Fabric(multi_stack_echo(2), {})
    ing = fab.wire_in("lb")
    for i in range(10):
        ing.send(udp_frame(bytes([i]) * 64, dst_port=ECHO_PORT), i * 20, tag=i)
    fab.run(until_idle=True)
    assert fab.tiles["lb"].behavior.assignments == ["eth_rx_0", "eth_rx_1"] * 5
    assert sorted(r.tag for r in fab.egress) == list(range(10))
    assert {r.tile for r in fab.egress} == {"eth_tx_0", "eth_tx_1"}
    for r in fab.egress:
        assert parse_udp_frame(r.frame)[3] == bytes([r.tag]) * 64


def test_flow_hash_keeps_a_flow_on_one_replica():
    fab = Fabric(multi_stack_echo(3, policy="flow_hash"), {})
    beh = fab.tiles["lb"].behavior
    for port in range(40000, 40020):
        meta = PacketMeta(src_ip=1, dst_ip=2, src_port=port, dst_port=ECHO_PORT)
        dests = {beh.process(Packet(b"", meta=meta), 0).dest for _ in range(3)}
        assert len(dests) == 1
    assert set(beh.assignments) <= {"eth_rx_0", "eth_rx_1", "eth_rx_2"}


def test_empty_group_drops():
    fab = Fabric(multi_stack_echo(1), {})
    lb = fab.tiles["lb"]
    lb.table.remove("default")
    assert lb.behavior.process(Packet(b""), 0).dest == DROP


def test_scheduler_issues_one_small_request_every_four_cycles():
    r = echo_throughput(64, stacks=2, count=60)
    assert r["scheduler_cycles_per_packet"] == 4.0
    assert r["scheduler_gbps"] == pytest.approx(32.0)
