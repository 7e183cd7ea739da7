"""
Cycle-level composition of tiles over the data NoC.

A tile receives *units* (NoC flits, or 64-byte lines from the wire), makes its
routing decision once the first data unit is in (plus whatever its parser
needs), and then streams its output message one unit per cycle. Output unit
``j`` may leave no earlier than ``L`` cycles after the input unit it depends
on arrived, where ``L`` is the tile's cut-through latency. After finishing a
message a tile waits ``recovery`` cycles before starting the next one. A
streaming tile holds at most ``stage_depth + L`` input units: its input FIFO
plus one pipeline register per latency stage.

Message *content* rides along with the header flit as a simulator
side-channel; the flits themselves carry the real encoded words, and all
timing comes from the flits.
"""

from __future__ import annotations

import bisect
import itertools
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .noc import DEFAULT_CLOCK_HZ, FLIT_BITS, Coord, Flit, Mesh, encode_message
from .packets import (
    ETH_IPV4, ETH_VLAN, IPPROTO_UDP, Drop, EthHeader, Ipv4Header, PacketMeta,
    eth_build, eth_parse, ip_build, ip_parse, udp_build, udp_parse,
)
from .tables import DROP, NextHopTable, flow_hash
from .topology import STORE_AND_FORWARD, TileDecl, TopologyConfig

WIRE = "WIRE"
LINE_BYTES = FLIT_BITS // 8


@dataclass
class FabricParams:
    fifo_depth: int = 4
    hop_latency: int = 1
    tile_latency: int = 2
    stage_depth: int = 4
    clock_hz: float = DEFAULT_CLOCK_HZ
    stall_window: int = 256
    trace: bool = False


@dataclass
class Packet:
    """Content carried by one message (side-channel of its header unit)."""

    data: bytes
    meta: Optional[PacketMeta] = None
    tag: int = 0
    ingress_cycle: int = 0
    extra: dict = field(default_factory=dict)

    def meta_bytes(self) -> bytes:
        return self.meta.pack() if self.meta is not None else b""


@dataclass
class Output:
    dest: str  # tile name or WIRE
    packet: Packet
    # input data byte that output data byte 0 corresponds to (strip > 0, prepend < 0)
    shift: int = 0


class Behavior:
    """Processing logic of a tile. Subclasses override :meth:`process`."""

    # bytes of input data that must be present before deciding
    parse_need = 0
    # true when no output may leave before the whole input has arrived
    needs_full = False

    def bind(self, tile: "Tile") -> None:
        self.tile = tile

    def need(self, pkt: Packet) -> int:
        return self.parse_need

    def process(self, pkt: Packet, cycle: int) -> Output:
        raise NotImplementedError


class _InMsg:
    __slots__ = ("pkt", "u0", "n_units", "arrivals", "released", "decided", "out",
                 "deps", "emitted", "dropped", "dec_idx", "out_dest")

    def __init__(self, pkt: Packet, u0: int, n_units: int):
        self.pkt = pkt
        self.u0 = u0
        self.n_units = n_units
        self.arrivals: list[int] = []
        self.released = 0
        self.decided = False
        self.out: Optional[list[Flit]] = None
        self.deps: list[int] = []
        self.emitted = 0
        self.dropped = False
        self.dec_idx = 0
        self.out_dest = ""


@dataclass
class EgressRecord:
    tile: str
    first_cycle: int
    last_cycle: int
    frame: bytes
    tag: int
    ingress_cycle: int


@dataclass
class DropRecord:
    tile: str
    cycle: int
    reason: str
    tag: int


class Tile:
    def __init__(self, fabric: "Fabric", decl: TileDecl, behavior: Behavior):
        self.fabric = fabric
        self.decl = decl
        self.name = decl.name
        self.coord = decl.coord
        p = fabric.params
        self.latency = decl.latency if decl.latency is not None else p.tile_latency
        self.recovery = decl.recovery
        # input FIFO plus one pipeline register per latency stage
        self.capacity = (1 << 60 if decl.buffering == STORE_AND_FORWARD or behavior.needs_full
                         else p.stage_depth + self.latency)
        self.table = NextHopTable(hash_seed=fabric.cfg.hash_seed)
        for key, dest in decl.routes:
            self.table.set(key, dest)
        self.behavior = behavior
        behavior.bind(self)
        self.staged = 0
        self.in_source: Optional[str] = None
        self.msgs: deque[_InMsg] = deque()
        self.ready_at = 0
        self.messages_out = 0
        self.busy_cycles = 0
        self.emit_log: list[int] = []
        self.record_emits = False

    # -- endpoint protocol --
    def can_accept(self, source: str = "noc") -> bool:
        # one input port: a message in progress blocks the other source
        if self.in_source is not None and self.in_source != source:
            return False
        return self.staged < self.capacity

    def accept(self, flit: Flit, cycle: int, source: str = "noc") -> None:
        if flit.is_header:
            if flit.msg is None:
                raise RuntimeError(f"{self.name}: header flit without content")
            m = flit.msg
            if isinstance(m, tuple):  # (packet, u0, n_units) from the wire
                pkt, u0, n = m
            else:
                pkt = m
                n = 1 + flit.body_flit_count
                u0 = 1 + (-(-len(pkt.meta_bytes()) // LINE_BYTES))
            self.msgs.append(_InMsg(pkt, u0, n))
        cur = self.msgs[-1]
        cur.arrivals.append(cycle)
        self.in_source = None if len(cur.arrivals) == cur.n_units else source
        self.staged += 1
        self.fabric.progress += 1

    def idle(self) -> bool:
        return not self.msgs

    # -- per-cycle behaviour --
    def _decision_index(self, m: _InMsg) -> int:
        if self.behavior.needs_full or self.decl.buffering == STORE_AND_FORWARD:
            return m.n_units - 1
        data_len = len(m.pkt.data)
        if data_len == 0:
            return m.n_units - 1
        need = max(1, min(self.behavior.need(m.pkt), data_len))
        return min(m.n_units - 1, m.u0 + (need - 1) // LINE_BYTES)

    def _decide(self, m: _InMsg, cycle: int) -> None:
        m.decided = True
        try:
            out = self.behavior.process(m.pkt, cycle)
        except Drop as exc:
            out = None
            self.fabric.record_drop(self, cycle, exc.reason, m.pkt.tag)
        if out is not None and out.dest == DROP:
            self.fabric.record_drop(self, cycle, "no_next_hop", m.pkt.tag)
            out = None
        if out is None:
            m.dropped = True
            return
        full = self.behavior.needs_full or self.decl.buffering == STORE_AND_FORWARD
        d_in = len(m.pkt.data)
        opkt = out.packet
        if out.dest == WIRE:
            units = []
            n = max(1, -(-len(opkt.data) // LINE_BYTES))
            for i in range(n):
                units.append(Flit("header" if i == 0 else "body",
                                  opkt.data[i * LINE_BYTES:(i + 1) * LINE_BYTES],
                                  seq=i, is_tail=i == n - 1))
            u0_out = 0
        else:
            dst = self.fabric.tiles[out.dest].coord
            units = encode_message(dst, self.coord, opkt.meta_bytes(), opkt.data,
                                   msg_id=self.fabric.next_msg_id())
            units[0].msg = opkt
            u0_out = 1 + (-(-len(opkt.meta_bytes()) // LINE_BYTES))
        deps = []
        for j in range(len(units)):
            if full:
                deps.append(m.n_units - 1)
                continue
            dep = m.dec_idx
            if j >= u0_out:
                end = min((j - u0_out + 1) * LINE_BYTES, len(opkt.data)) + out.shift
                if end > 0:
                    end = min(end, d_in)
                    dep = max(dep, m.u0 + (end - 1) // LINE_BYTES if end > 0 else dep)
            deps.append(min(dep, m.n_units - 1))
        m.out = units
        m.deps = deps
        m.out_dest = out.dest

    def _release(self, m: _InMsg, upto: int) -> None:
        upto = min(upto, len(m.arrivals))
        if upto > m.released:
            self.staged -= upto - m.released
            m.released = upto

    def step(self, cycle: int) -> None:
        if not self.msgs:
            return
        m = self.msgs[0]
        if not m.decided:
            if cycle < self.ready_at:
                return
            m.dec_idx = self._decision_index(m)
            if len(m.arrivals) <= m.dec_idx:
                return
            self._decide(m, cycle)
        self.busy_cycles += 1
        if m.dropped:
            self._release(m, len(m.arrivals))
            if len(m.arrivals) == m.n_units:
                self.msgs.popleft()
                self.ready_at = cycle + 1 + self.recovery
            return
        if m.emitted < len(m.out):
            j = m.emitted
            dep = m.deps[j]
            if len(m.arrivals) > dep and cycle >= m.arrivals[dep] + self.latency:
                unit = m.out[j]
                if m.out_dest == WIRE:
                    self.fabric.wire_out(self, unit, cycle, m)
                    sent = True
                elif self.fabric.mesh.can_inject(self.coord):
                    self.fabric.mesh.inject(self.coord, unit)
                    sent = True
                else:
                    sent = False
                if sent:
                    if self.record_emits:
                        self.emit_log.append(cycle)
                    m.emitted += 1
                    self.fabric.progress += 1
                    if m.emitted < len(m.out):
                        self._release(m, max(0, m.deps[m.emitted] - 1))
        if m.emitted == len(m.out):
            self._release(m, len(m.arrivals))
            if len(m.arrivals) == m.n_units:
                self.msgs.popleft()
                self.messages_out += 1
                self.ready_at = cycle + 1 + self.recovery


class WireIngress:
    """Feeds frames from the external wire into a tile, one line per cycle."""

    def __init__(self, tile: Tile):
        self.tile = tile
        self.queue: deque = deque()  # (available_cycle, Packet)
        self.current: Optional[tuple[Packet, list[bytes]]] = None
        self.line = 0
        self.accepted = 0

    def send(self, frame: bytes, cycle: int, tag: int = 0, **extra) -> None:
        item = (cycle, Packet(frame, tag=tag, extra=extra))
        if self.queue and self.queue[-1][0] > cycle:
            # keep the queue ordered by availability; equal times stay FIFO
            i = bisect.bisect_right([t for t, _ in self.queue], cycle)
            self.queue.insert(i, item)
        else:
            self.queue.append(item)

    def pending(self) -> int:
        return len(self.queue) + (1 if self.current else 0)

    def next_time(self) -> Optional[int]:
        if self.current:
            return None
        return self.queue[0][0] if self.queue else None

    def step(self, cycle: int) -> None:
        if self.current is None:
            if not self.queue or self.queue[0][0] > cycle:
                return
            _, pkt = self.queue.popleft()
            data = pkt.data
            lines = [data[i:i + LINE_BYTES] for i in range(0, max(len(data), 1), LINE_BYTES)]
            self.current = (pkt, lines)
            self.line = 0
        if not self.tile.can_accept("wire"):
            return
        pkt, lines = self.current
        i = self.line
        if i == 0:
            pkt.ingress_cycle = cycle
        unit = Flit("header" if i == 0 else "body", lines[i], seq=i, is_tail=i == len(lines) - 1)
        if i == 0:
            unit.msg = (pkt, 0, len(lines))
        self.tile.accept(unit, cycle, "wire")
        self.line += 1
        if self.line == len(lines):
            self.current = None
            self.accepted += 1


class Fabric:
    def __init__(
        self,
        cfg: TopologyConfig,
        behaviors: dict[str, Behavior],
        params: Optional[FabricParams] = None,
    ):
        from .topology import fill_empty_tiles

        self.cfg = fill_empty_tiles(cfg)
        self.params = params or FabricParams()
        p = self.params
        self.mesh = Mesh(self.cfg.width, self.cfg.height, fifo_depth=p.fifo_depth,
                         hop_latency=p.hop_latency, trace=p.trace)
        self.tiles: dict[str, Tile] = {}
        for decl in self.cfg.tiles:
            if decl.kind == "empty":
                continue
            beh = behaviors.get(decl.name) or default_behavior(decl)
            tile = Tile(self, decl, beh)
            self.tiles[decl.name] = tile
            self.mesh.attach(decl.coord, tile)
        self._order = sorted(self.tiles.values(), key=lambda t: (t.coord.y, t.coord.x))
        self.ingress: dict[str, WireIngress] = {}
        self.egress: list[EgressRecord] = []
        self.drops: list[DropRecord] = []
        self.on_egress: Optional[Callable[[EgressRecord], None]] = None
        self._msg_ids = itertools.count(1)
        self.progress = 0
        self._stalled = 0
        self.deadlocked = False
        self._wire_partial: dict[str, tuple[int, list[bytes]]] = {}
        # side components stepped at each cycle boundary, e.g. a control plane;
        # each needs step(cycle) and busy()
        self.extras: list = []

    @property
    def cycle(self) -> int:
        return self.mesh.cycle

    def next_msg_id(self) -> int:
        return next(self._msg_ids)

    def wire_in(self, tile_name: str) -> WireIngress:
        if tile_name not in self.ingress:
            self.ingress[tile_name] = WireIngress(self.tiles[tile_name])
        return self.ingress[tile_name]

    def wire_out(self, tile: Tile, unit: Flit, cycle: int, m: _InMsg) -> None:
        first, lines = self._wire_partial.get(tile.name, (cycle, []))
        lines.append(unit.word)
        if unit.is_tail:
            self._wire_partial.pop(tile.name, None)
            frame = b"".join(lines)
            rec = EgressRecord(tile.name, first, cycle, frame, m.pkt.tag, m.pkt.ingress_cycle)
            self.egress.append(rec)
            if self.on_egress:
                self.on_egress(rec)
        else:
            self._wire_partial[tile.name] = (first, lines)

    def record_drop(self, tile: Tile, cycle: int, reason: str, tag: int) -> None:
        self.drops.append(DropRecord(tile.name, cycle, reason, tag))

    def busy(self) -> bool:
        if self.mesh.in_flight():
            return True
        if any(t.msgs for t in self._order):
            return True
        if any(x.busy() for x in self.extras):
            return True
        return any(i.current is not None for i in self.ingress.values())

    def step(self) -> None:
        cycle = self.mesh.cycle
        self.progress = 0
        for x in self.extras:
            if x.busy():
                x.step(cycle)
                self.progress += 1
        self.progress += self.mesh.step()
        for ing in self.ingress.values():
            ing.step(cycle)
        for t in self._order:
            t.step(cycle)
        if self.progress == 0 and self.busy():
            self._stalled += 1
            if self._stalled >= self.params.stall_window:
                self.deadlocked = True
        else:
            self._stalled = 0

    def _next_event(self) -> Optional[int]:
        times = [i.next_time() for i in self.ingress.values()]
        times = [t for t in times if t is not None]
        return min(times) if times else None

    def run(self, until: Optional[int] = None, *, until_idle: bool = False,
            stop: Optional[Callable[[], bool]] = None) -> None:
        """Advance the simulation.

        Stops at cycle ``until``, on deadlock, when ``stop()`` is true, or,
        with ``until_idle``, once nothing is in flight and no frame is queued.
        Idle stretches are skipped in one jump.
        """
        while not self.deadlocked:
            if until is not None and self.cycle >= until:
                return
            if stop is not None and stop():
                return
            if not self.busy():
                nxt = self._next_event()
                if nxt is None:
                    if until_idle or until is None:
                        return
                    self.mesh.cycle = until
                    return
                if nxt > self.cycle:
                    target = nxt if until is None else min(nxt, until)
                    self.mesh.cycle = target
                    continue
            self.step()


# --- protocol behaviours ------------------------------------------------------

class EthRx(Behavior):
    parse_need = 18

    def process(self, pkt, cycle):
        eth, rest = eth_parse(pkt.data)
        meta = PacketMeta(dst_mac=eth.dst_mac, src_mac=eth.src_mac, ethertype=eth.ethertype,
                          vlan_tci=eth.vlan[1] if eth.vlan else None, tag=pkt.tag,
                          ingress_cycle=pkt.ingress_cycle)
        dest = self.tile.table.lookup(eth.ethertype)
        return Output(dest, replace(pkt, data=rest, meta=meta), eth.length)


class IpRx(Behavior):
    def need(self, pkt):
        return (pkt.data[0] & 0x0F) * 4 if pkt.data else 20

    def process(self, pkt, cycle):
        ip, rest = ip_parse(pkt.data)
        meta = replace(pkt.meta or PacketMeta(), src_ip=ip.src_ip, dst_ip=ip.dst_ip,
                       protocol=ip.protocol, ttl=ip.ttl)
        dest = self.tile.table.lookup(ip.protocol)
        return Output(dest, replace(pkt, data=rest, meta=meta), ip.header_len)


class UdpRx(Behavior):
    parse_need = 8

    def process(self, pkt, cycle):
        meta = pkt.meta
        udp, payload = udp_parse(pkt.data, meta.src_ip, meta.dst_ip)
        meta = replace(meta, src_port=udp.src_port, dst_port=udp.dst_port, l4_len=udp.length)
        fh = flow_hash(meta.flow_key(), self.tile.table.hash_seed)
        meta = replace(meta, flow_hash=fh)
        dest = self.tile.table.lookup(udp.dst_port, meta.flow_key())
        return Output(dest, replace(pkt, data=payload, meta=meta), 8)


class UdpTx(Behavior):
    def process(self, pkt, cycle):
        m = pkt.meta
        dgram = udp_build(m.src_port, m.dst_port, pkt.data, m.src_ip, m.dst_ip)
        meta = replace(m, protocol=IPPROTO_UDP, l4_len=len(dgram))
        return Output(self.tile.table.lookup("default"), replace(pkt, data=dgram, meta=meta), -8)


class IpTx(Behavior):
    def process(self, pkt, cycle):
        m = pkt.meta
        hdr = Ipv4Header(m.src_ip, m.dst_ip, m.protocol, ttl=64)
        data = ip_build(hdr, pkt.data)
        return Output(self.tile.table.lookup("default"), replace(pkt, data=data), -20)


class EthTx(Behavior):
    def process(self, pkt, cycle):
        m = pkt.meta
        vlan = (ETH_VLAN, m.vlan_tci) if m.vlan_tci is not None else None
        hdr = EthHeader(m.dst_mac, m.src_mac, ETH_IPV4, vlan)
        frame = eth_build(hdr, pkt.data)
        return Output(WIRE, replace(pkt, data=frame), -hdr.length)


class Scheduler(Behavior):
    """Front-end distributor: round-robin (default) or flow-hash over a replica group."""

    def __init__(self, policy: str = "round_robin"):
        self.policy = policy
        self.counter = 0
        self.assignments: list[str] = []

    def group(self) -> tuple[str, ...]:
        dest = self.tile.table.entries.get("default")
        return (dest,) if isinstance(dest, str) else tuple(dest or ())

    def process(self, pkt, cycle):
        group = self.group()
        if not group:
            return Output(DROP, pkt)
        if self.policy == "flow_hash" and pkt.meta is not None:
            dest = self.tile.table.lookup("default", pkt.meta.flow_key())
        else:
            dest = group[self.counter % len(group)]
            self.counter += 1
        self.assignments.append(dest)
        return Output(dest, pkt)


class Echo(Behavior):
    def process(self, pkt, cycle):
        meta = pkt.meta.reply() if pkt.meta is not None else None
        return Output(self.tile.table.lookup("default"), replace(pkt, meta=meta))


class PassThrough(Behavior):
    """Forwards unchanged to the table's default next hop (buffers, loggers)."""

    def __init__(self, on_message: Optional[Callable] = None):
        self.on_message = on_message

    def process(self, pkt, cycle):
        if self.on_message:
            self.on_message(self.tile, pkt, cycle)
        dest = self.tile.table.lookup("default")
        return Output(dest, pkt)


class Sink(Behavior):
    def __init__(self):
        self.received: list[tuple[int, Packet]] = []

    def process(self, pkt, cycle):
        self.received.append((cycle, pkt))
        return None


class FunctionApp(Behavior):
    """UDP application tile wrapping a payload -> payload function.

    The function returns ``None`` when no reply should be sent.
    """

    def __init__(self, fn: Callable[[bytes, PacketMeta], Optional[bytes]], needs_full: bool = False):
        self.fn = fn
        self.needs_full = needs_full

    def process(self, pkt, cycle):
        reply = self.fn(pkt.data, pkt.meta)
        if reply is None:
            raise Drop("no_reply")
        meta = pkt.meta.reply() if pkt.meta is not None else None
        return Output(self.tile.table.lookup("default"), replace(pkt, data=reply, meta=meta))


_DEFAULTS = {
    "eth_rx": EthRx,
    "ip_rx": IpRx,
    "udp_rx": UdpRx,
    "udp_tx": UdpTx,
    "ip_tx": IpTx,
    "eth_tx": EthTx,
    "app": Echo,
    "buffer": PassThrough,
    "logger": PassThrough,
}


def default_behavior(decl: TileDecl) -> Behavior:
    if decl.kind == "scheduler":
        return Scheduler(decl.params.get("policy", "round_robin"))
    cls = _DEFAULTS.get(decl.kind)
    if cls is None:
        return Sink()
    return cls()
