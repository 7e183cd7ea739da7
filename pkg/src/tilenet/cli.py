"""Command line front end: ``tilenet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


def _load(path):
    from .topology import TopologyError, load_topology

    try:
        return load_topology(path)
    except (OSError, TopologyError) as exc:
        raise SystemExit(f"error: {exc}")


def cmd_validate(args) -> int:
    from .topology import validate_topology

    cfg = _load(args.config)
    diags = validate_topology(cfg)
    for d in diags:
        print(d)
    errors = [d for d in diags if d.severity == "error"]
    if not errors:
        print(f"{args.config}: ok ({cfg.width}x{cfg.height}, {len(cfg.tiles)} tiles)")
    return 1 if errors else 0


def cmd_deadlock_check(args) -> int:
    from .deadlock import check_topology

    cfg = _load(args.config)
    found = False
    for noc, cycles in check_topology(cfg).items():
        for cyc in cycles:
            found = True
            print(f"{noc}: cycle {cyc.describe()}")
    if not found:
        print(f"{args.config}: no channel dependency cycles")
    return 1 if found else 0


def cmd_plan(args) -> int:
    from .topology import generate_instantiation_plan

    plan = generate_instantiation_plan(_load(args.config))
    text = plan.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    from .harness import DeadlockError, ScenarioError, load_scenario, run_scenario
    from .metrics import write_outputs

    scn = load_scenario(args.scenario)
    if args.trace:
        scn.trace = True
    try:
        res = run_scenario(scn)
    except DeadlockError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = write_outputs(args.out, res.metrics, res.samples, traces=res.traces)
    m = res.metrics
    print(f"{m.workload}: {m.answered}/{m.requests} answered, {m.dropped} dropped, "
          f"{m.in_flight} in flight; goodput {m.goodput_gbps:.2f} Gbps; "
          f"latency median {m.latency_median} p99 {m.latency_p99} cycles")
    print(f"wrote {out}/metrics.json")
    return 0


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    from .harness import goodput_sweep
    from .metrics import write_curve_csv

    rows = goodput_sweep(_int_list(args.payloads), stacks=args.stacks)
    print("payload  cycles/pkt   Gbps  bound  ratio")
    for r in rows:
        print(f"{r['payload']:7d}  {r['cycles_per_packet']:10.2f}  {r['gbps']:6.2f} "
              f"{r['bound_gbps']:6.2f}  {r['ratio']:.3f}")
    if args.out:
        write_curve_csv(args.out, rows)
    return 0


def _bench(scn, args) -> int:
    from .harness import run_scenario
    from .metrics import write_outputs

    res = run_scenario(scn)
    m = res.metrics
    print(json.dumps({"workload": m.workload, "answered": m.answered, "dropped": m.dropped,
                      "goodput_gbps": round(m.goodput_gbps, 3),
                      "request_rate": round(m.request_rate, 1),
                      "latency_median": m.latency_median, "latency_p99": m.latency_p99}))
    if args.out:
        write_outputs(args.out, m, res.samples, traces=res.traces)
    return 0


def cmd_vr_bench(args) -> int:
    from .harness import Scenario

    return _bench(Scenario("vr", requests=args.requests, mode="closed", clients=args.clients,
                           shards=args.shards, think=args.think, seed=args.seed), args)


def cmd_rs_bench(args) -> int:
    from .harness import Scenario

    return _bench(Scenario("rs", requests=args.requests, replicas=args.replicas,
                           interval=args.interval, seed=args.seed), args)


def cmd_read_log(args) -> int:
    from .faults import FaultModel
    from .observability import LogPort, export_jsonl, read_log, record_tcp_log
    from .tcpsim import run_stream

    res = run_stream(args.bytes, seed=args.seed, direction=args.direction, record=True,
                     fault=FaultModel(p_loss=args.stream_loss, seed=args.seed))
    port = LogPort(record_tcp_log(res.trace, capacity=args.capacity), args.port)
    entries, stats = read_log(port, fault=FaultModel(p_loss=args.loss, seed=args.seed))
    export_jsonl(entries, args.out)
    print(f"read {len(entries)} entries from port {args.port} "
          f"({stats.requests} requests, {stats.retries} retries) -> {args.out}")
    return 0


def cmd_replay(args) -> int:
    from .observability import emission_log, load_jsonl, replay_tcp_trace
    from .tcpsim import stream_data

    entries = load_jsonl(args.trace)
    data = stream_data(args.bytes, args.seed)
    replayed = replay_tcp_trace(entries, direction=args.direction, data=data, seed=args.seed)
    want = emission_log(entries)
    got = emission_log(replayed)
    # a truncated log only constrains the emissions it still holds
    got = [e for e in got if not want or e[0] >= want[0][0]][:len(want)]
    for i, (a, b) in enumerate(zip(want, got)):
        if a != b:
            print(f"replay diverges at emission {i}: recorded cycle {a[0]}, replayed cycle {b[0]}")
            return 1
    if len(got) != len(want):
        print(f"replay emitted {len(got)} segments, log holds {len(want)}")
        return 1
    print(f"replay identical: {len(want)} emissions")
    return 0


def cmd_ctl(args) -> int:
    from .netfn import AckStatus, ControlUpdate, Op, VipMap, controller_session
    from .packets import int_to_ip, ip_to_int

    cfg = _load(args.config)
    targets = [t.name for t in cfg.tiles if t.kind == "nat"]
    if args.target:
        targets = [args.target]
    if not targets:
        raise SystemExit("error: design has no nat tile")
    state = Path(args.state) if args.state else None
    saved = json.loads(state.read_text()) if state and state.exists() else {}
    tables = {}
    for name in targets:
        s = saved.get(name, {})
        tables[name] = VipMap({int(k): v for k, v in s.get("entries", {}).items()},
                              s.get("generation", 0))
    target = targets[0]
    vip, pip = ip_to_int(args.vip), ip_to_int(args.pip)
    op = Op.REPLACE if tables[target].to_physical(vip) is not None else Op.INSERT
    upd = ControlUpdate(args.request_id, op, target, vip, pip)
    acks, _plane = controller_session(cfg, tables, [upd.encode()], seed=args.seed)
    ack = acks[0]
    print(f"{op.name} {args.vip} -> {args.pip} on {target}: {ack.status.name}, "
          f"generation {ack.generation}")
    for v, p in sorted(tables[target].entries.items()):
        print(f"  {int_to_ip(v)} -> {int_to_ip(p)}")
    if state:
        state.write_text(json.dumps({n: {"entries": t.entries, "generation": t.generation}
                                     for n, t in tables.items()}, indent=2))
    return 0 if ack.status == AckStatus.OK else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilenet", description="Tile-based network stack simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a topology file")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("deadlock-check", help="static channel dependency check; exit 0 iff acyclic")
    s.add_argument("config")
    s.set_defaults(func=cmd_deadlock_check)

    s = sub.add_parser("plan", help="emit the instantiation plan as JSON")
    s.add_argument("config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("run", help="run a scenario file")
    s.add_argument("scenario")
    s.add_argument("--out", default="results")
    s.add_argument("--trace", action="store_true", help="also write the NoC flit trace")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="echo goodput against payload size")
    s.add_argument("--payloads", default="64,128,256,512,1024,2048,4096,8192,9000")
    s.add_argument("--stacks", type=int, default=1)
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("vr-bench", help="closed-loop PREPAREs against sharded witnesses")
    s.add_argument("--shards", type=int, default=4)
    s.add_argument("--clients", type=int, default=4)
    s.add_argument("--requests", type=int, default=1000)
    s.add_argument("--think", type=int, default=0, help="client cycles between requests")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_vr_bench)

    s = sub.add_parser("rs-bench", help="erasure-coding requests through replicated encoders")
    s.add_argument("--replicas", type=int, default=4)
    s.add_argument("--requests", type=int, default=200)
    s.add_argument("--interval", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rs_bench)

    s = sub.add_parser("read-log", help="record a TCP stream's log and read it back over UDP")
    s.add_argument("--port", type=int, default=7000)
    s.add_argument("--out", required=True)
    s.add_argument("--bytes", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--direction", choices=["download", "upload"], default="download")
    s.add_argument("--loss", type=float, default=0.0, help="readback loss probability")
    s.add_argument("--stream-loss", type=float, default=0.0)
    s.add_argument("--capacity", type=int, default=1 << 20, help="log ring capacity")
    s.set_defaults(func=cmd_read_log)

    s = sub.add_parser("replay", help="replay a TCP log and compare emissions")
    s.add_argument("--trace", required=True)
    s.add_argument("--bytes", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--direction", choices=["download", "upload"], default="download")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("ctl", help="control-plane RPCs")
    ctl = s.add_subparsers(dest="ctl_command", required=True)
    c = ctl.add_parser("set-mapping", help="map a virtual IP to a physical IP")
    c.add_argument("config")
    c.add_argument("vip")
    c.add_argument("pip")
    c.add_argument("--target", help="nat tile (default: the first one)")
    c.add_argument("--state", help="JSON file holding the tables between invocations")
    c.add_argument("--request-id", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_ctl)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
