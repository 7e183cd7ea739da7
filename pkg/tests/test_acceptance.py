"""
Acceptance suite. Each test checks one numbered criterion, prints a PASS/FAIL
line (also collected in the pytest summary) and then asserts it.
"""

import itertools
import random
import time

import pytest

from tilenet.apps.rs import BLOCK_SIZE, K, M, rs_encode
from tilenet.apps.rs_oracle import reference_generator, rs_decode_oracle
from tilenet.apps.witness import prepare
from tilenet.deadlock import check_topology
from tilenet.deadlock_sim import deadlock_library, dynamic_deadlock, static_deadlock
from tilenet.fabric import Fabric, FabricParams
from tilenet.faults import FaultModel
from tilenet.harness import (
    Scenario,
    echo_throughput,
    goodput_sweep,
    predicted_chain_latency,
    run_scenario,
    run_witness_traffic,
)
from tilenet.layouts import ECHO_PORT, deadlock_example, udp_echo_stack
from tilenet.observability import (
    emission_log,
    export_jsonl,
    load_jsonl,
    record_tcp_log,
    replay_tcp_trace,
)
from tilenet.packets import udp_frame
from tilenet.tcpsim import run_stream, stream_data
from tests.oracles.witness_schedules import digest, explore

PAYLOADS = [64, 128, 256, 512, 1024, 2048, 4096, 8192]


def test_criterion_1_deadlock_checker_agrees_with_simulation(report):
    t0 = time.perf_counter()
    flagged = bool(check_topology(deadlock_example(ordered=False))["data"])
    clean = not check_topology(deadlock_example(ordered=True))["data"]
    lib = deadlock_library()
    mismatches, missed = [], []
    for name, cfg in lib:
        s, d = static_deadlock(cfg), dynamic_deadlock(cfg).deadlocked
        if s != d:
            mismatches.append(name)
        if d and not s:
            missed.append(name)
    elapsed = time.perf_counter() - t0
    ok = flagged and clean and len(lib) >= 20 and not mismatches and not missed and elapsed < 60
    report(1, ok, f"unordered flagged={flagged}, ordered clean={clean}, library={len(lib)}, "
                  f"mismatches={len(mismatches)}, acyclic-but-deadlocks={len(missed)}, {elapsed:.1f}s")
    assert ok, mismatches


def test_criterion_2_scheduler_bound(report):
    r = echo_throughput(64, stacks=2)
    cpp, gbps = r["scheduler_cycles_per_packet"], r["scheduler_gbps"]
    ok = cpp == 4 and gbps == pytest.approx(32.0, abs=1e-9)
    report(2, ok, f"scheduler {cpp} cycles/packet, {gbps:.3f} Gbps")
    assert ok


def test_criterion_3_goodput_curve(report):
    rows = goodput_sweep(PAYLOADS)
    off = [r for r in rows if abs(r["ratio"] - 1) > 0.02]
    at_1k = next(r["gbps"] for r in rows if r["payload"] == 1024)
    ok = not off and at_1k >= 100
    curve = ", ".join(f"{r['payload']}B {r['gbps']:.1f}/{r['bound_gbps']:.1f}" for r in rows)
    report(3, ok, f"1024B {at_1k:.1f} Gbps; simulated/bound: {curve}")
    assert ok


@pytest.mark.parametrize("app_recovery", [0, 5])
def test_criterion_4_two_stack_scaling(report, app_recovery):
    one = echo_throughput(64, stacks=1, scheduler=True, app_recovery=app_recovery)["gbps"]
    two = echo_throughput(64, stacks=2, app_recovery=app_recovery)["gbps"]
    need = min(1.9 * one, 32.0)
    ok = two >= need - 1e-9
    report(4, ok, f"app_recovery={app_recovery}: one stack {one:.2f} Gbps, two stacks {two:.2f} Gbps "
                  f"({two / one:.2f}x), required {need:.2f}")
    assert ok


def test_criterion_5_rs_erasure_decoding(report):
    rng = random.Random(2024)
    patterns = list(itertools.combinations(range(K + M), 2))
    failures = 0
    for _ in range(1000):
        data = [rng.randbytes(BLOCK_SIZE) for _ in range(K)]
        coded = data + rs_encode(data)
        for lost in patterns:
            keep = [i for i in range(K + M) if i not in lost]
            if rs_decode_oracle([coded[i] for i in keep], keep) != data:
                failures += 1
    zero = rs_encode([bytes(BLOCK_SIZE)] * K) == [bytes(BLOCK_SIZE)] * M
    gen = reference_generator(K, M)
    unit = True
    for i in range(K):
        blocks = [bytes(BLOCK_SIZE)] * K
        blocks[i] = b"\x01" * BLOCK_SIZE
        unit &= rs_encode(blocks) == [bytes([gen[K + j][i]]) * BLOCK_SIZE for j in range(M)]
    ok = len(patterns) == 45 and failures == 0 and zero and unit
    report(5, ok, f"1000 inputs x {len(patterns)} patterns, {failures} failures; "
                  f"all-zero={zero}, unit-vector={unit}")
    assert ok


def test_criterion_6_tcp_robustness(report):
    bad, fast_missing, with_isolated = [], [], 0
    for seed in range(100):
        loss = (seed % 6) * 0.01
        direction = "upload" if seed % 10 == 9 else "download"
        fault = FaultModel(p_loss=loss, p_reorder=0.05, seed=seed)
        r = run_stream(1_000_000, seed=seed, fault=fault, direction=direction)
        if not r.ok or r.delivered != stream_data(1_000_000, seed):
            bad.append(seed)
        if r.isolated_losses:
            with_isolated += 1
            if r.fast_retransmits < 1:
                fast_missing.append(seed)
    ok = not bad and not fast_missing and with_isolated > 0
    report(6, ok, f"100 seeds, loss 0-5% with reordering: {len(bad)} bad streams; "
                  f"{with_isolated} runs with isolated losses, {len(fast_missing)} without fast retransmit")
    assert ok, (bad, fast_missing)


def test_criterion_7_witness_safety(report):
    res = explore(5, losses=1, dups=1, retransmits=1)
    mine = [(12000, prepare(0, i, digest(0, i)).pack()) for i in range(1, 6)]
    rng = random.Random(7)
    noise = [(12000 + rng.randint(1, 3), prepare(0, rng.randint(1, 5), digest(1, i)).pack())
             for i in range(40)]
    noise += [(12002, b"junk"), (9, prepare(0, 1, digest(1, 1)).pack())]
    alone = run_witness_traffic(mine)
    mixed_msgs = mine + noise
    rng.shuffle(mixed_msgs)
    # keep this shard's own messages in their original order
    it = iter(mine)
    mixed_msgs = [next(it) if m[0] == 12000 else m for m in mixed_msgs]
    mixed = run_witness_traffic(mixed_msgs)
    isolated = alone[0] == mixed[0]
    others_moved = any(alone[s] != mixed[s] for s in (1, 2, 3))
    ok = not res.violations and res.max_last_op == 5 and isolated and others_moved
    report(7, ok, f"{res.states} states explored, {len(res.violations)} violations, "
                  f"max last_op {res.max_last_op}; shard 0 hash unchanged by cross-shard traffic={isolated}")
    assert ok, res.violations[:3]


@pytest.mark.parametrize("direction", ["download", "upload"])
def test_criterion_8_replay_determinism(report, tmp_path, direction):
    fault = FaultModel(p_loss=0.02, p_dup=0.01, p_reorder=0.05, seed=11)
    res = run_stream(200_000, seed=11, fault=fault, direction=direction, record=True)
    path = tmp_path / "trace.jsonl"
    export_jsonl(record_tcp_log(res.trace), path)
    replayed = replay_tcp_trace(load_jsonl(path), direction=direction,
                                data=stream_data(200_000, 11), seed=11)
    ok = res.ok and emission_log(replayed) == res.emitted
    report(8, ok, f"{direction}: {len(res.emitted)} recorded emissions, replay identical={ok}")
    assert ok


def _single_echo_latency(cfg, params, payload=1):
    fab = Fabric(cfg, {}, params)
    fab.wire_in("eth_rx").send(udp_frame(bytes(payload), dst_port=ECHO_PORT), 0)
    fab.run(until_idle=True)
    (rec,) = fab.egress
    return rec.last_cycle - rec.ingress_cycle


def test_criterion_9_latency_determinism(report):
    frame = len(udp_frame(b"x"))
    m = run_scenario(Scenario("echo", payload=1, requests=10_000, interval=200)).metrics
    want = predicted_chain_latency(udp_echo_stack(), "echo", FabricParams(), frame)
    base = m.answered == 10_000 and m.latency_min == m.latency_max == want

    # per-layer additivity: change one tile or the hop latency at a time
    rng = random.Random(9)
    perturbed = []
    for _ in range(20):
        cfg = udp_echo_stack()
        tile = rng.choice(cfg.chains[0].tiles)
        cfg.tile(tile).latency = rng.randint(1, 9)
        params = FabricParams(hop_latency=rng.randint(1, 4))
        got = _single_echo_latency(cfg, params)
        perturbed.append(got == predicted_chain_latency(cfg, "echo", params, frame))
    ok = base and all(perturbed)
    report(9, ok, f"10^4 requests: min {m.latency_min}, max {m.latency_max}, predicted {want}; "
                  f"{sum(perturbed)}/{len(perturbed)} perturbed layouts match the sum")
    assert ok
