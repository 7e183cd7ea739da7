"""
Scenario runner: builds a fabric for a workload, drives open- or closed-loop
clients through a (possibly faulty) external wire, and collects metrics.

Latency of a request is measured from the cycle its first line enters the
ingress tile to the cycle the last line of its reply leaves the egress tile.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .apps.rs import REQUEST_DATA, encode_request, handle_request
from .apps.witness import Kind, WitnessMsg, WitnessState, WitnessTile, op_digest, prepare
from .deadlock import check_topology
from .fabric import LINE_BYTES, Behavior, Fabric, FabricParams, FunctionApp
from .faults import FaultModel, FaultyLink
from .layouts import ECHO_PORT, RS_PORT, multi_stack_echo, rs_stack, udp_echo_stack, witness_stack
from .metrics import Metrics, compute_metrics, goodput_bps
from .noc import DEFAULT_CLOCK_HZ
from .packets import parse_udp_frame, udp_frame
from .topology import TopologyConfig, load_topology, validate_topology

WORKLOADS = ("echo", "rs", "vr", "tcp_stream")


class ScenarioError(ValueError):
    pass


class ConservationError(RuntimeError):
    pass


class DeadlockError(RuntimeError):
    def __init__(self, cycle: int, blocked: list[dict]):
        self.cycle = cycle
        self.blocked = blocked
        lines = "\n".join(f"  {b}" for b in blocked)
        super().__init__(f"fabric deadlocked at cycle {cycle}; blocked worms:\n{lines}")


@dataclass
class Scenario:
    workload: str = "echo"
    payload: int = 64
    requests: int = 1000
    mode: str = "open"
    # open loop: cycles between injections (0 = back to back, limited by ingress backpressure)
    interval: int = 0
    clients: int = 1
    # closed loop: cycles between a reply and the client's next request
    think: int = 0
    timeout: int = 200_000
    # closed loop: resends of an unanswered request before giving up
    retries: int = 0
    topology: Optional[str] = None
    stacks: int = 1
    replicas: int = 4
    shards: int = 4
    app_recovery: int = 0
    hop_latency: int = 1
    tile_latency: int = 2
    stream_bytes: int = 1_000_000
    fault: FaultModel = field(default_factory=FaultModel)
    duration: Optional[int] = None
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        if isinstance(self.fault, dict):
            self.fault = FaultModel(**self.fault)
        if self.workload not in WORKLOADS:
            raise ScenarioError(f"unknown workload {self.workload!r}")
        if self.mode not in ("open", "closed"):
            raise ScenarioError(f"unknown mode {self.mode!r}")
        if self.requests < 1 or self.clients < 1 or self.payload < 0:
            raise ScenarioError("requests and clients must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


def load_scenario(path) -> Scenario:
    p = Path(path)
    scn = Scenario.from_json(json.loads(p.read_text()))
    if scn.topology and not Path(scn.topology).is_absolute():
        scn.topology = str((p.parent / scn.topology).resolve())
    return scn


# -- packet generation ----------------------------------------------------------------

class PacketGen:
    """Injection schedule for ``count`` requests.

    Open loop issues request ``i`` at ``i * interval``. Closed loop starts
    one request per client and issues the next one only when the previous
    one finished (answered or timed out).
    """

    def __init__(self, mode: str, count: int, *, interval: int = 0, clients: int = 1, think: int = 0):
        if mode not in ("open", "closed"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.count = count
        self.interval = interval
        self.clients = clients
        self.think = think
        self.issued = 0
        self.outstanding: dict[int, int] = {}  # request -> client
        self.max_outstanding = 0

    def _issue(self, cycle: int, client: int) -> tuple[int, int, int]:
        req = self.issued
        self.issued += 1
        self.outstanding[req] = client
        self.max_outstanding = max(self.max_outstanding, len(self.outstanding))
        return cycle, req, client

    def start(self) -> list[tuple[int, int, int]]:
        """(cycle, request, client) triples to inject now."""
        if self.mode == "open":
            return [self._issue(i * self.interval, i % self.clients) for i in range(self.count)]
        return [self._issue(0, c) for c in range(min(self.clients, self.count))]

    def done(self, req: int, cycle: int) -> list[tuple[int, int, int]]:
        client = self.outstanding.pop(req, None)
        if client is None or self.mode == "open" or self.issued >= self.count:
            return []
        return [self._issue(cycle + self.think, client)]


def packet_gen(mode: str, payload: int, *, count: int, interval: int = 0, clients: int = 1,
               think: int = 0) -> PacketGen:
    del payload  # frames are built by the workload; the schedule does not depend on size
    return PacketGen(mode, count, interval=interval, clients=clients, think=think)


# -- workloads --------------------------------------------------------------------------

@dataclass
class Workload:
    cfg: TopologyConfig
    behaviors: dict[str, Behavior]
    ingress: str
    make_request: Callable[[int, int], bytes]
    check_reply: Callable[[int, bytes], bool]
    goodput_bytes: int


def _payload_bytes(seed: int, i: int, n: int) -> bytes:
    return random.Random(f"{seed}:{i}").randbytes(n)


def _app_tiles(cfg: TopologyConfig) -> list[str]:
    return [t.name for t in cfg.tiles if t.kind == "app"]


def _ingress(cfg: TopologyConfig) -> str:
    if not cfg.chains:
        raise ScenarioError("topology has no chains")
    return cfg.chains[0].tiles[0]


def _echo_workload(scn: Scenario, cfg: Optional[TopologyConfig]) -> Workload:
    if cfg is None:
        cfg = (udp_echo_stack(app_recovery=scn.app_recovery) if scn.stacks == 1
               else multi_stack_echo(scn.stacks, app_recovery=scn.app_recovery))

    def make(i, client):
        return udp_frame(_payload_bytes(scn.seed, i, scn.payload), src_port=40000 + client,
                         dst_port=ECHO_PORT)

    def check(i, frame):
        return parse_udp_frame(frame)[3] == _payload_bytes(scn.seed, i, scn.payload)

    return Workload(cfg, {}, _ingress(cfg), make, check, scn.payload)


def _rs_workload(scn: Scenario, cfg: Optional[TopologyConfig]) -> Workload:
    cfg = cfg or rs_stack(scn.replicas)
    behaviors = {name: FunctionApp(lambda data, meta: handle_request(data), needs_full=True)
                 for name in _app_tiles(cfg)}

    def make(i, client):
        body = encode_request(i, _payload_bytes(scn.seed, i, REQUEST_DATA))
        return udp_frame(body, src_port=40000 + client, dst_port=RS_PORT)

    def check(i, frame):
        body = encode_request(i, _payload_bytes(scn.seed, i, REQUEST_DATA))
        return parse_udp_frame(frame)[3] == handle_request(body)

    return Workload(cfg, behaviors, _ingress(cfg), make, check, REQUEST_DATA)


def _vr_workload(scn: Scenario, cfg: Optional[TopologyConfig]) -> Workload:
    """Each client acts as the leader of shard ``client % shards`` and sends PREPAREs.

    Op numbers are assigned per shard in issue order, so a shard's witness
    sees a contiguous sequence unless the wire reorders or drops.
    """
    cfg = cfg or witness_stack(scn.shards)
    ports: dict[str, int] = {}
    for t in cfg.tiles:
        if t.kind == "udp_rx":
            for key, dest in t.routes:
                if isinstance(key, int) and isinstance(dest, str):
                    ports[dest] = key
    witnesses = sorted(ports, key=lambda n: ports[n])
    if not witnesses:
        raise ScenarioError("no witness tiles reachable by port")
    behaviors = {name: WitnessTile(WitnessState(ports[name], i)) for i, name in enumerate(witnesses)}
    next_op = Counter()
    sent: dict[int, WitnessMsg] = {}

    def make(i, client):
        shard = client % len(witnesses)
        next_op[shard] += 1
        msg = prepare(0, next_op[shard], op_digest(_payload_bytes(scn.seed, i, max(scn.payload, 1))))
        sent[i] = msg
        return udp_frame(msg.pack(), src_port=40000 + client, dst_port=ports[witnesses[shard]])

    def check(i, frame):
        reply = WitnessMsg.unpack(parse_udp_frame(frame)[3])
        req = sent[i]
        return reply.kind == Kind.PREPARE_OK and reply.op_num == req.op_num and reply.digest == req.digest

    return Workload(cfg, behaviors, _ingress(cfg), make, check, max(scn.payload, 1))


def build_workload(scn: Scenario) -> Workload:
    cfg = load_topology(scn.topology) if scn.topology else None
    return {"echo": _echo_workload, "rs": _rs_workload, "vr": _vr_workload}[scn.workload](scn, cfg)


def preflight(cfg: TopologyConfig) -> None:
    """Refuse topologies that fail validation or the static deadlock check."""
    errors = [d for d in validate_topology(cfg) if d.severity == "error"]
    if errors:
        raise ScenarioError("; ".join(str(d) for d in errors))
    cyc = check_topology(cfg)
    for noc, cycles in cyc.items():
        if cycles:
            raise ScenarioError(f"{noc} NoC dependency cycle: {cycles[0]}")


# -- run --------------------------------------------------------------------------------

@dataclass
class RunResult:
    metrics: Metrics
    samples: list[tuple[int, int, int, int]]  # (request, ingress, egress, latency)
    traces: dict[str, list[dict]] = field(default_factory=dict)
    fabric: Optional[Fabric] = None


def run_scenario(scn: Scenario) -> RunResult:
    if scn.workload == "tcp_stream":
        return _run_tcp(scn)
    wl = build_workload(scn)
    preflight(wl.cfg)
    params = FabricParams(hop_latency=scn.hop_latency, tile_latency=scn.tile_latency, trace=scn.trace)
    fab = Fabric(wl.cfg, wl.behaviors, params)
    ing = fab.wire_in(wl.ingress)
    up = FaultyLink(scn.fault, 0)
    down = FaultyLink(scn.fault, 1)
    gen = PacketGen(scn.mode, scn.requests, interval=scn.interval, clients=scn.clients, think=scn.think)
    limit = scn.duration

    copies: Counter = Counter()          # copies of a request inside the fabric or on the wire
    reason: dict[int, str] = {}
    answered: dict[int, tuple[int, int]] = {}  # request -> (ingress, egress)
    resolved: set[int] = set()           # answered or given up
    deadlines: list[tuple[int, int]] = []
    arrivals: list[tuple[int, int, int, int, int]] = []  # (cycle, seq, request, ingress, egress)
    frames: dict[int, bytes] = {}
    attempts: Counter = Counter()
    bad_replies = 0
    seq = 0

    def send(cycle, req):
        attempts[req] += 1
        outs = up.perturb(cycle, req)
        if not outs:
            reason[req] = "wire_loss"
        for t, _ in outs:
            copies[req] += 1
            ing.send(frames[req], t, tag=req)
        if scn.mode == "closed":
            heapq.heappush(deadlines, (cycle + scn.timeout, req))

    def inject(batch):
        for cycle, req, client in batch:
            frames[req] = wl.make_request(req, client)
            send(cycle, req)

    def finish(req, cycle):
        resolved.add(req)
        inject(gen.done(req, cycle))

    def on_egress(rec):
        nonlocal seq, bad_replies
        req = rec.tag
        copies[req] -= 1
        if not wl.check_reply(req, rec.frame):
            bad_replies += 1
            return
        outs = down.perturb(rec.last_cycle, req)
        if not outs:
            reason.setdefault(req, "reply_wire_loss")
        for t, _ in outs:
            seq += 1
            copies[req] += 1
            heapq.heappush(arrivals, (t, seq, req, rec.ingress_cycle, rec.last_cycle))

    fab.on_egress = on_egress
    n_drops = 0
    inject(gen.start())
    while True:
        while n_drops < len(fab.drops):
            d = fab.drops[n_drops]
            n_drops += 1
            copies[d.tag] -= 1
            reason[d.tag] = d.reason
        now = fab.cycle
        while arrivals and arrivals[0][0] <= now:
            t, _, req, ingress, egress = heapq.heappop(arrivals)
            copies[req] -= 1
            if req not in resolved:
                answered[req] = (ingress, egress)
                finish(req, t)
        while deadlines and (deadlines[0][0] <= now or deadlines[0][1] in resolved):
            _, req = heapq.heappop(deadlines)
            if req in resolved:
                continue
            if attempts[req] <= scn.retries:
                send(now, req)
            else:
                reason.setdefault(req, "timeout")
                finish(req, now)
        if limit is not None and now >= limit:
            break
        stops = [x[0] for x in arrivals[:1]] + [x[0] for x in deadlines[:1]]
        if not stops and not fab.busy() and fab._next_event() is None:
            break
        target = min(stops) if stops else None
        if limit is not None:
            target = limit if target is None else min(target, limit)
        before = len(fab.drops)
        if target is None:
            fab.run(until_idle=True, stop=lambda: len(fab.drops) > before or bool(arrivals))
        else:
            fab.run(until=max(target, now), stop=lambda: len(fab.drops) > before
                    or bool(arrivals and arrivals[0][0] <= fab.cycle))
        if fab.deadlocked:
            raise DeadlockError(fab.cycle, fab.mesh.blocked_worms())
        if fab.cycle == now and target is not None and target <= now:
            fab.step()

    return _summarize(scn, wl, fab, gen, answered, resolved, copies, reason, bad_replies)


def _summarize(scn, wl, fab, gen, answered, resolved, copies, reason, bad_replies) -> RunResult:
    issued = gen.issued
    in_flight = [r for r in range(issued) if r not in answered and copies[r] > 0]
    dropped = [r for r in range(issued) if r not in answered and copies[r] <= 0]
    if any(copies[r] < 0 for r in range(issued)):
        raise ConservationError("a request copy was accounted twice")
    if not fab.busy() and not in_flight and any(copies[r] for r in range(issued)):
        raise ConservationError("fabric idle but request copies unaccounted for")
    if len(answered) + len(dropped) + len(in_flight) != issued:
        raise ConservationError("answered + dropped + in-flight != injected")
    samples = sorted((r, i, e, e - i) for r, (i, e) in answered.items())
    if not samples:
        raise ScenarioError("no request was answered")
    start = min(s[1] for s in samples)
    end = max(s[2] for s in samples)
    span = end - start + 1
    util = {n: t.busy_cycles / max(1, fab.cycle) for n, t in sorted(fab.tiles.items())}
    reasons = Counter(reason.get(r, "unknown") for r in dropped)
    metrics = compute_metrics(
        [s[3] for s in samples], workload=scn.workload, payload_bytes=wl.goodput_bytes,
        cycles=span, requests=issued + (scn.requests - issued), dropped=len(dropped),
        in_flight=len(in_flight) + (scn.requests - issued), clock_hz=fab.params.clock_hz,
        utilization=util, drop_reasons=dict(reasons),
        extra={"bad_replies": bad_replies, "max_outstanding": gen.max_outstanding,
               "end_cycle": fab.cycle})
    traces = {"noc": list(fab.mesh.trace)} if scn.trace else {}
    return RunResult(metrics, samples, traces, fab)


def _run_tcp(scn: Scenario) -> RunResult:
    from .tcpsim import run_stream

    res = run_stream(scn.stream_bytes, seed=scn.seed, fault=scn.fault, record=scn.trace,
                     max_cycles=scn.duration or 50_000_000)
    if not res.ok:
        raise ScenarioError("TCP stream did not complete")
    m = compute_metrics([res.cycles], workload="tcp_stream", payload_bytes=len(res.delivered),
                        cycles=res.cycles, requests=1,
                        extra={"fast_retransmits": res.fast_retransmits, "timeouts": res.timeouts,
                               "wire_losses": res.lost})
    traces = {}
    if scn.trace:
        traces["tcp"] = [{"cycle": r.cycle, "direction": r.direction, "raw": r.raw.hex()}
                         for r in res.trace]
    return RunResult(m, [(0, 0, res.cycles, res.cycles)], traces)


def scenario_digest(result: RunResult) -> str:
    """Hash of metrics, samples and traces; equal for equal runs."""
    h = hashlib.sha256()
    h.update(json.dumps(result.metrics.to_json(), sort_keys=True).encode())
    h.update(json.dumps(result.samples).encode())
    h.update(json.dumps(result.traces, sort_keys=True).encode())
    return h.hexdigest()


# -- analytic models and sweeps -----------------------------------------------------------

def chain_hops(cfg: TopologyConfig, chain_name: str) -> list[int]:
    """Manhattan distance of every tile-to-tile message along a chain."""
    chain = next(c for c in cfg.chains if c.name == chain_name)
    pos = {t.name: t.coord for t in cfg.tiles}
    return [abs(pos[a].x - pos[b].x) + abs(pos[a].y - pos[b].y)
            for a, b in zip(chain.tiles, chain.tiles[1:])]


def analytic_latency(tile_latencies: list[int], hops: list[int], hop_latency: int = 1,
                     egress_lines: int = 1) -> int:
    """Uncontended latency of a short message through a chain of cut-through tiles.

    Each tile adds its pipeline latency. Each NoC message adds two units
    (header and metadata) ahead of the data, one injection register cycle,
    and one router traversal per hop plus the ejecting router. The egress
    tile then serializes the remaining lines of the frame.
    """
    if len(hops) != len(tile_latencies) - 1:
        raise ValueError("need one hop count per tile-to-tile message")
    per_msg = sum(2 + 1 + hop_latency * (h + 1) for h in hops)
    return sum(tile_latencies) + per_msg + (egress_lines - 1)


def predicted_chain_latency(cfg: TopologyConfig, chain_name: str, params: FabricParams,
                            frame_len: int) -> int:
    chain = next(c for c in cfg.chains if c.name == chain_name)
    decl = {t.name: t for t in cfg.tiles}
    lat = [decl[n].latency if decl[n].latency is not None else params.tile_latency
           for n in chain.tiles]
    lines = max(1, math.ceil(frame_len / LINE_BYTES))
    return analytic_latency(lat, chain_hops(cfg, chain_name), params.hop_latency, lines)


def goodput_bound_gbps(payload: int, clock_hz: float = DEFAULT_CLOCK_HZ) -> float:
    """Payload over payload-flits plus one header and one metadata flit, at one flit per cycle."""
    flits = math.ceil(payload / LINE_BYTES) + 2
    return goodput_bps(payload, flits, clock_hz) / 1e9


def steady_cycles_per_packet(egress_cycles: list[int], period: int = 1) -> float:
    """Mean spacing of the second half of a back-to-back run.

    With ``period`` > 1 (packets alternating over that many paths) the
    window spans whole rounds so per-path offsets cancel.
    """
    e = sorted(egress_cycles)
    h = len(e) // 2
    h += (len(e) - 1 - h) % period
    if len(e) - 1 - h < 1:
        raise ValueError("too few packets for a steady-state estimate")
    return (e[-1] - e[h]) / (len(e) - 1 - h)


def echo_throughput(payload: int, *, stacks: int = 1, count: Optional[int] = None,
                    app_recovery: int = 0, params: Optional[FabricParams] = None,
                    scheduler: Optional[bool] = None) -> dict:
    """Saturating back-to-back echo run; returns cycles/packet and Gbps.

    ``scheduler`` puts the stacks behind the load balancer; it defaults to
    true for more than one stack.
    """
    if scheduler is None:
        scheduler = stacks > 1
    cfg = (multi_stack_echo(stacks, app_recovery=app_recovery) if scheduler
           else udp_echo_stack(app_recovery=app_recovery))
    n = count or max(24, min(200, 40_000 // max(1, payload)))
    fab = Fabric(cfg, {}, params)
    ing = fab.wire_in(_ingress(cfg))
    sched = [t for t in fab.tiles.values() if t.decl.kind == "scheduler"]
    for t in sched:
        t.record_emits = True
    frame = udp_frame(bytes(payload))
    for i in range(n):
        ing.send(frame, 0, tag=i)
    fab.run(until_idle=True)
    if fab.deadlocked or fab.drops or len(fab.egress) != n:
        raise RuntimeError(f"echo run lost packets: {len(fab.egress)}/{n}, drops={fab.drops[:3]}")
    cpp = steady_cycles_per_packet([r.last_cycle for r in fab.egress], period=stacks)
    out = {"payload": payload, "stacks": stacks, "packets": n, "cycles_per_packet": cpp,
           "gbps": goodput_bps(payload, cpp, fab.params.clock_hz) / 1e9, "fabric": fab}
    if sched:
        # header units only: one per dispatched message
        t = sched[0]
        heads = t.emit_log[::len(t.emit_log) // n]
        out["scheduler_cycles_per_packet"] = steady_cycles_per_packet(heads)
        out["scheduler_gbps"] = goodput_bps(payload, out["scheduler_cycles_per_packet"],
                                            fab.params.clock_hz) / 1e9
    return out


def goodput_sweep(payloads: list[int], *, stacks: int = 1) -> list[dict]:
    rows = []
    for p in payloads:
        r = echo_throughput(p, stacks=stacks)
        bound = goodput_bound_gbps(p)
        rows.append({"payload": p, "cycles_per_packet": r["cycles_per_packet"],
                     "gbps": r["gbps"], "bound_gbps": bound, "ratio": r["gbps"] / bound})
    return rows


def load_curve(intervals: list[int], *, payload: int = 64, requests: int = 400) -> list[dict]:
    """Throughput and latency of open-loop echo at decreasing injection intervals."""
    rows = []
    for iv in intervals:
        res = run_scenario(Scenario("echo", payload=payload, requests=requests, interval=iv))
        m = res.metrics
        rows.append({"interval": iv, "offered_gbps": goodput_bps(payload, max(iv, 1)) / 1e9,
                     "gbps": m.goodput_gbps, "median": m.latency_median, "p99": m.latency_p99})
    return rows



def run_witness_traffic(messages: list[tuple[int, bytes]], *, shards: int = 4,
                        spacing: int = 0) -> dict[int, str]:
    """Push (destination port, UDP payload) pairs through a witness stack.

    Returns the final state hash of every shard's witness tile.
    """
    cfg = witness_stack(shards)
    wl = _vr_workload(Scenario("vr", shards=shards), cfg)
    fab = Fabric(cfg, wl.behaviors, None)
    ing = fab.wire_in(wl.ingress)
    for i, (port, payload) in enumerate(messages):
        ing.send(udp_frame(payload, dst_port=port), i * spacing, tag=i)
    fab.run(until_idle=True)
    if fab.deadlocked:
        raise DeadlockError(fab.cycle, fab.mesh.blocked_worms())
    return {beh.state.witness_id: beh.state.state_hash() for beh in wl.behaviors.values()}
