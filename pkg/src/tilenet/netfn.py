"""
Network function tiles (NAT, IP-in-IP) and the control plane that updates them.

Control RPC records are length-prefixed, big endian::

    update:  len u16 | request_id u32 | op u8 | name_len u8 | target name | key u32 | value u32
    ack:     len u16 | request_id u32 | status u8 | generation u32

``len`` counts the bytes after itself. ``op`` is 1 insert, 2 delete,
3 replace; ``key`` is the virtual IP and ``value`` the physical IP (ignored
for delete). Status codes are listed in :class:`AckStatus`.

Updates travel from the controller tile to their target over the control
NoC, are applied at the next cycle boundary, and are confirmed back to the
controller before it acknowledges the RPC.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

from .fabric import Behavior, Output
from .noc import Coord, Flit, Mesh, decode_message, encode_message
from .packets import (
    IPPROTO_IPIP, IPPROTO_TCP, IPPROTO_UDP, Drop, Ipv4Header, PacketMeta, ip_build,
    ip_header_bytes, ip_parse,
)
from .tcp import NoteKind
from .topology import TopologyConfig

CONTROL_FLIT_BITS = 64


# -- virtual IP map ---------------------------------------------------------------

class MappingError(ValueError):
    pass


@dataclass
class VipMap:
    """Virtual to physical IP map, injective in both directions."""

    entries: dict[int, int] = field(default_factory=dict)
    generation: int = 0

    def __post_init__(self):
        if len(set(self.entries.values())) != len(self.entries):
            raise MappingError("physical addresses must be unique")
        self._rev = {p: v for v, p in self.entries.items()}

    def to_physical(self, vip: int) -> Optional[int]:
        return self.entries.get(vip)

    def to_virtual(self, pip: int) -> Optional[int]:
        return self._rev.get(pip)

    def insert(self, vip: int, pip: int) -> None:
        if vip in self.entries:
            raise MappingError(f"virtual address {vip:#x} already mapped")
        if pip in self._rev:
            raise MappingError(f"physical address {pip:#x} already in use")
        self.entries[vip] = pip
        self._rev[pip] = vip
        self.generation += 1

    def delete(self, vip: int) -> None:
        if vip not in self.entries:
            raise MappingError(f"virtual address {vip:#x} not mapped")
        del self._rev[self.entries.pop(vip)]
        self.generation += 1

    def replace(self, vip: int, pip: int) -> None:
        owner = self._rev.get(pip)
        if owner is not None and owner != vip:
            raise MappingError(f"physical address {pip:#x} already in use")
        old = self.entries.get(vip)
        if old is not None:
            del self._rev[old]
        self.entries[vip] = pip
        self._rev[pip] = vip
        self.generation += 1


# -- NAT --------------------------------------------------------------------------

V2P = "v2p"
P2V = "p2v"


@dataclass(frozen=True)
class NatPolicy:
    """Which address each direction translates, and which way.

    Each field is ``None`` (leave alone), ``"v2p"`` or ``"p2v"``.
    """

    rx_src: Optional[str] = None
    rx_dst: Optional[str] = P2V
    tx_src: Optional[str] = None
    tx_dst: Optional[str] = V2P

    def actions(self, direction: str) -> tuple[Optional[str], Optional[str]]:
        if direction == "rx":
            return self.rx_src, self.rx_dst
        if direction == "tx":
            return self.tx_src, self.tx_dst
        raise ValueError(f"unknown direction {direction!r}")

    def inverse(self) -> "NatPolicy":
        flip = {V2P: P2V, P2V: V2P, None: None}
        return NatPolicy(flip[self.tx_src], flip[self.tx_dst], flip[self.rx_src], flip[self.rx_dst])


def _fold(s: int) -> int:
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return s


def checksum_adjust(csum: int, old: bytes, new: bytes) -> int:
    """Incremental internet checksum update for replaced 16-bit-aligned bytes."""
    s = (~csum) & 0xFFFF
    for i in range(0, len(old), 2):
        s += (~int.from_bytes(old[i:i + 2], "big")) & 0xFFFF
        s += int.from_bytes(new[i:i + 2], "big")
    return (~_fold(s)) & 0xFFFF


def _translate(vmap: VipMap, addr: int, how: Optional[str]) -> int:
    if how is None:
        return addr
    out = vmap.to_physical(addr) if how == V2P else vmap.to_virtual(addr)
    if out is None:
        raise Drop("nat_unmapped", f"{addr:#010x}")
    return out


def nat_rewrite(direction: str, packet: bytes, vmap: VipMap,
                policy: NatPolicy = NatPolicy()) -> bytes:
    """Rewrite the addresses of an IPv4 packet; IP and TCP/UDP checksums are fixed up."""
    hdr, payload = ip_parse(packet)
    how_src, how_dst = policy.actions(direction)
    src = _translate(vmap, hdr.src_ip, how_src)
    dst = _translate(vmap, hdr.dst_ip, how_dst)
    new_hdr = replace(hdr, src_ip=src, dst_ip=dst)
    old_addrs = hdr.src_ip.to_bytes(4, "big") + hdr.dst_ip.to_bytes(4, "big")
    new_addrs = src.to_bytes(4, "big") + dst.to_bytes(4, "big")
    off = {IPPROTO_UDP: 6, IPPROTO_TCP: 16}.get(hdr.protocol)
    if off is not None and len(payload) >= off + 2:
        csum = int.from_bytes(payload[off:off + 2], "big")
        if not (hdr.protocol == IPPROTO_UDP and csum == 0):
            csum = checksum_adjust(csum, old_addrs, new_addrs)
            if hdr.protocol == IPPROTO_UDP and csum == 0:
                csum = 0xFFFF
            payload = payload[:off] + csum.to_bytes(2, "big") + payload[off + 2:]
    return ip_header_bytes(new_hdr, len(payload)) + payload


def nat_rewrite_meta(direction: str, meta: PacketMeta, vmap: VipMap,
                     policy: NatPolicy = NatPolicy()) -> PacketMeta:
    how_src, how_dst = policy.actions(direction)
    return replace(meta, src_ip=_translate(vmap, meta.src_ip, how_src),
                   dst_ip=_translate(vmap, meta.dst_ip, how_dst))


# -- IP-in-IP ---------------------------------------------------------------------

def ipinip_encap(inner: bytes, outer_src: int, outer_dst: int, ttl: int = 64) -> bytes:
    ip_parse(inner)  # must be a valid IPv4 packet
    return ip_build(Ipv4Header(outer_src, outer_dst, IPPROTO_IPIP, ttl), inner)


def ipinip_decap(packet: bytes) -> bytes:
    hdr, inner = ip_parse(packet)
    if hdr.protocol != IPPROTO_IPIP:
        raise Drop("not_ipinip", str(hdr.protocol))
    return inner


# -- tiles ------------------------------------------------------------------------

class NatTile(Behavior):
    """Rewrites the raw IP packet in flight (sits between Ethernet and IP tiles)."""

    def __init__(self, vmap: VipMap, direction: str = "rx", policy: NatPolicy = NatPolicy()):
        self.vmap = vmap
        self.direction = direction
        self.policy = policy
        self.decisions: list[tuple[int, int, int]] = []  # (cycle, tag, table generation)

    def need(self, pkt):
        ihl = (pkt.data[0] & 0x0F) * 4 if pkt.data else 20
        return ihl + 18  # through the TCP checksum field

    def process(self, pkt, cycle):
        self.decisions.append((cycle, pkt.tag, self.vmap.generation))
        data = nat_rewrite(self.direction, pkt.data, self.vmap, self.policy)
        return Output(self.tile.table.lookup("default"), replace(pkt, data=data))


class IpInIpTile(Behavior):
    def __init__(self, mode: str = "decap", outer_src: int = 0, outer_dst: int = 0):
        if mode not in ("encap", "decap"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.outer_src = outer_src
        self.outer_dst = outer_dst

    def need(self, pkt):
        return 20

    def process(self, pkt, cycle):
        dest = self.tile.table.lookup("default")
        if self.mode == "decap":
            hlen = (pkt.data[0] & 0x0F) * 4 if pkt.data else 20
            return Output(dest, replace(pkt, data=ipinip_decap(pkt.data)), hlen)
        return Output(dest, replace(pkt, data=ipinip_encap(pkt.data, self.outer_src, self.outer_dst)),
                      -20)


# -- control RPC ------------------------------------------------------------------

class Op(IntEnum):
    INSERT = 1
    DELETE = 2
    REPLACE = 3


class AckStatus(IntEnum):
    OK = 0
    UNKNOWN_TARGET = 1
    MALFORMED = 2
    REJECTED = 3  # the table refused the update (e.g. it would break injectivity)


class MalformedRpc(ValueError):
    def __init__(self, msg: str, request_id: int = 0):
        super().__init__(msg)
        self.request_id = request_id


@dataclass(frozen=True)
class ControlUpdate:
    request_id: int
    op: Op
    target: str
    key: int
    value: int = 0
    noc_class = "control"

    def body(self) -> bytes:
        name = self.target.encode()
        if len(name) > 255:
            raise ValueError("target name too long")
        return (struct.pack(">IBB", self.request_id, self.op, len(name)) + name
                + struct.pack(">II", self.key, self.value))

    def encode(self) -> bytes:
        b = self.body()
        return struct.pack(">H", len(b)) + b

    @classmethod
    def from_body(cls, b: bytes) -> "ControlUpdate":
        rid = struct.unpack_from(">I", b)[0] if len(b) >= 4 else 0
        if len(b) < 6:
            raise MalformedRpc("short update", rid)
        _, op, n = struct.unpack_from(">IBB", b)
        if len(b) != 6 + n + 8:
            raise MalformedRpc("bad update length", rid)
        try:
            op = Op(op)
            name = b[6:6 + n].decode()
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedRpc(str(exc), rid) from exc
        key, value = struct.unpack_from(">II", b, 6 + n)
        return cls(rid, op, name, key, value)


@dataclass(frozen=True)
class ControlAck:
    request_id: int
    status: AckStatus
    generation: int = 0
    noc_class = "control"

    def encode(self) -> bytes:
        return struct.pack(">HIBI", 9, self.request_id, self.status, self.generation)

    @classmethod
    def decode(cls, data: bytes) -> "ControlAck":
        n, rid, st, gen = struct.unpack(">HIBI", data)
        if n != 9:
            raise ValueError("bad ack length")
        return cls(rid, AckStatus(st), gen)


def split_records(buf: bytearray) -> list[bytes]:
    """Pop every complete length-prefixed record off the front of ``buf``."""
    out = []
    while len(buf) >= 2:
        n = struct.unpack_from(">H", buf)[0]
        if len(buf) < 2 + n:
            break
        out.append(bytes(buf[2:2 + n]))
        del buf[:2 + n]
    return out


def apply_update(vmap: VipMap, upd: ControlUpdate) -> AckStatus:
    try:
        if upd.op == Op.INSERT:
            vmap.insert(upd.key, upd.value)
        elif upd.op == Op.DELETE:
            vmap.delete(upd.key)
        else:
            vmap.replace(upd.key, upd.value)
    except MappingError:
        return AckStatus.REJECTED
    return AckStatus.OK


# -- control NoC ------------------------------------------------------------------

class _CtlEndpoint:
    def __init__(self, plane: "ControlPlane", name: str, coord: Coord):
        self.plane = plane
        self.name = name
        self.coord = coord
        self.partial: list[Flit] = []
        self.outq: list[Flit] = []
        self.inbox: list[tuple[int, bytes, object]] = []

    def can_accept(self) -> bool:
        return True

    def accept(self, flit: Flit, cycle: int) -> None:
        if flit.is_header:
            self.partial = [flit]
        else:
            self.partial.append(flit)
        if flit.is_tail:
            msg = decode_message(self.partial, flit_bits=self.plane.flit_bits)
            self.inbox.append((cycle, msg.payload, self.partial[0].msg))
            self.partial = []

    def send(self, dst: Coord, payload: bytes, tag) -> None:
        flits = encode_message(dst, self.coord, b"", payload, msg_id=self.plane.next_id(),
                               flit_bits=self.plane.flit_bits)
        flits[0].msg = tag
        self.outq.extend(flits)


class ControlPlane:
    """Controller tile plus network-function tables connected by the control NoC."""

    def __init__(self, cfg: TopologyConfig, tables: dict[str, VipMap], *,
                 controller: str = "controller", hop_latency: int = 1):
        if not cfg.control_noc:
            raise ValueError("design has no control NoC")
        self.cfg = cfg
        self.flit_bits = CONTROL_FLIT_BITS
        self.mesh = Mesh(cfg.width, cfg.height, flit_bits=CONTROL_FLIT_BITS,
                         hop_latency=hop_latency, name="control")
        coords = {t.name: t.coord for t in cfg.tiles}
        if controller not in coords:
            raise ValueError(f"no controller tile {controller!r}")
        self._ids = 0
        self.tables = tables
        self.ctl = _CtlEndpoint(self, controller, coords[controller])
        self.mesh.attach(self.ctl.coord, self.ctl)
        self.eps: dict[str, _CtlEndpoint] = {}
        for name in tables:
            if name not in coords:
                raise ValueError(f"table for unknown tile {name!r}")
            ep = _CtlEndpoint(self, name, coords[name])
            self.eps[name] = ep
            self.mesh.attach(ep.coord, ep)
        self.cache: dict[int, ControlAck] = {}
        self.pending: dict[int, ControlUpdate] = {}
        self.acks: list[tuple[int, ControlAck]] = []
        self.applied: list[tuple[int, str, ControlUpdate]] = []

    def next_id(self) -> int:
        self._ids += 1
        return self._ids

    def submit(self, record: bytes, cycle: int) -> Optional[ControlAck]:
        """Hand one RPC body to the controller; returns an immediate ack, if any."""
        try:
            upd = ControlUpdate.from_body(record)
        except MalformedRpc as exc:
            ack = ControlAck(exc.request_id, AckStatus.MALFORMED)
            self.acks.append((cycle, ack))
            return ack
        if upd.request_id in self.cache:
            ack = self.cache[upd.request_id]
            self.acks.append((cycle, ack))
            return ack
        if upd.request_id in self.pending:
            return None
        if upd.target not in self.eps:
            ack = ControlAck(upd.request_id, AckStatus.UNKNOWN_TARGET)
            self.cache[upd.request_id] = ack
            self.acks.append((cycle, ack))
            return ack
        self.pending[upd.request_id] = upd
        self.ctl.send(self.eps[upd.target].coord, upd.body(), upd)
        return None

    def busy(self) -> bool:
        return bool(self.pending or self.mesh.in_flight()
                    or any(e.outq or e.inbox for e in [self.ctl, *self.eps.values()]))

    def step(self, cycle: int) -> None:
        """One control-plane cycle; updates received earlier are applied first (cycle boundary)."""
        self.mesh.cycle = cycle
        for name, ep in self.eps.items():
            msgs, ep.inbox = ep.inbox, []
            for _, body, _tag in msgs:
                upd = ControlUpdate.from_body(body)
                status = apply_update(self.tables[name], upd)
                self.applied.append((cycle, name, upd))
                ack = ControlAck(upd.request_id, status, self.tables[name].generation)
                ep.send(self.ctl.coord, ack.encode()[2:], ack)
        msgs, self.ctl.inbox = self.ctl.inbox, []
        for _, body, _tag in msgs:
            ack = ControlAck.decode(struct.pack(">H", len(body)) + body)
            self.pending.pop(ack.request_id, None)
            self.cache[ack.request_id] = ack
            self.acks.append((cycle, ack))
        self.mesh.step()
        for ep in [self.ctl, *self.eps.values()]:
            if ep.outq and self.mesh.can_inject(ep.coord):
                self.mesh.inject(ep.coord, ep.outq.pop(0))

    def run_until_idle(self, start: int, limit: int = 100_000) -> int:
        cycle = start
        while self.busy() and cycle < start + limit:
            self.step(cycle)
            cycle += 1
        return cycle


def control_messages_on(mesh: Mesh) -> int:
    """Number of control-class messages ever injected into ``mesh``."""
    return mesh.injected_classes.get("control", 0)


# -- controller application over TCP ----------------------------------------------

class ControllerApp:
    """TCP application on the controller tile: reads RPC records, drives the
    control plane, and writes each ack back once the target has confirmed."""

    def __init__(self, engine, plane: ControlPlane):
        self.engine = engine
        self.plane = plane
        self.want_header = True
        self.out = bytearray()
        self.reserved = 0
        self.flow_id: Optional[int] = None
        self.cycle = 0

    def _queue_ack(self, ack: ControlAck) -> None:
        self.out += ack.encode()
        if not self.reserved:
            self.reserved = len(self.out)
            self.engine.app_tx_reserve(self.flow_id, self.reserved)

    def on_notify(self, cycle: int, note) -> None:
        K = NoteKind
        eng = self.engine
        if note.kind == K.CONN_ESTABLISHED:
            self.flow_id = note.flow_id
            eng.app_rx_request(note.flow_id, 2)
        elif note.kind == K.RX_READY:
            flow = eng.by_id[note.flow_id]
            data = flow.rx_ring.read(note.address, note.length)
            eng.app_rx_done(note.flow_id, note.length)
            if self.want_header:
                n = struct.unpack(">H", data)[0]
                if n == 0:
                    self._queue_ack(ControlAck(0, AckStatus.MALFORMED))
                    eng.app_rx_request(note.flow_id, 2)
                    return
                self.want_header = False
                eng.app_rx_request(note.flow_id, n)
                return
            self.want_header = True
            eng.app_rx_request(note.flow_id, 2)
            start = max(cycle, self.cycle)
            ack = self.plane.submit(data, start)
            if ack is None:
                self.cycle = self.plane.run_until_idle(start)
                ack = self.plane.acks[-1][1]
            self._queue_ack(ack)
        elif note.kind == K.TX_SPACE:
            flow = eng.by_id[note.flow_id]
            piece = bytes(self.out[:self.reserved])
            del self.out[:self.reserved]
            flow.tx_ring.write(note.address, piece)
            eng.app_tx_commit(note.flow_id, len(piece))
            self.reserved = 0
            if self.out:
                self.reserved = len(self.out)
                eng.app_tx_reserve(note.flow_id, self.reserved)


CONTROLLER_PORT = 6000


def controller_session(cfg: TopologyConfig, tables: dict[str, VipMap], records: list[bytes], *,
                       seed: int = 0, fault=None, controller: str = "controller"
                       ) -> tuple[list[ControlAck], ControlPlane]:
    """Scripted external controller: send RPC records over TCP, collect the acks."""
    from .tcp import TcpEngine
    from .tcpsim import SERVER_IP, TcpClient, simulate

    plane = ControlPlane(cfg, tables, controller=controller)
    engine = TcpEngine(SERVER_IP, seed=seed)
    engine.listen(CONTROLLER_PORT)
    app = ControllerApp(engine, plane)
    engine.on_notify = app.on_notify
    expect = 11 * len(records)
    client = TcpClient(upload=b"".join(records), server_port=CONTROLLER_PORT)
    client.close_when = lambda c: len(c.received) >= expect
    simulate(engine, client, fault=fault)
    buf = bytearray(client.received)
    acks = [ControlAck.decode(struct.pack(">H", len(r)) + r) for r in split_records(buf)]
    return acks, plane
