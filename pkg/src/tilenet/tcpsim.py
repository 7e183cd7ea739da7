"""
End-to-end TCP stream simulation: a client host talking over a faulty wire to
the tile TCP engine and an application tile.

Segments cross the wire as real IPv4/TCP bytes, so every delivery is parsed
and checksum-verified. Everything is driven by cycle-stamped events and all
randomness comes from the fault model's seed.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .faults import FaultModel, FaultyLink
from .packets import (
    TCP_ACK, TCP_FIN, TCP_SYN, Drop, Segment, ip_to_int, segment_from_ip, segment_to_ip,
)
from .tcp import MSS, RING_SIZE, RTO_CYCLES, SEQ_MOD, AppNotification, NoteKind, TcpEngine, unwrap

LINE_BYTES = 64
SERVER_IP = ip_to_int("10.0.0.1")
CLIENT_IP = ip_to_int("10.0.0.2")
SERVER_PORT = 5001
CLIENT_PORT = 40001


class TcpClient:
    """Host-side peer: active open, cumulative ACKs, go-back-N on timeout and
    a single-segment retransmit on the third duplicate ACK.

    Out-of-order data is buffered and every data segment is acknowledged at
    once, so a hole in the stream produces duplicate ACKs. The receive window
    is fixed because the host application drains data immediately.
    """

    def __init__(self, *, isn: int = 7, mss: int = MSS, rwnd: int = 0xFFFF,
                 rto: int = RTO_CYCLES, upload: bytes = b"",
                 ip: int = CLIENT_IP, port: int = CLIENT_PORT,
                 server_ip: int = SERVER_IP, server_port: int = SERVER_PORT):
        self.ip, self.port = ip, port
        self.server_ip, self.server_port = server_ip, server_port
        self.iss = isn
        self.mss = mss
        self.rwnd = rwnd
        self.rto = rto
        self.upload = upload
        self.state = "CLOSED"
        self.irs = 0
        self.rcv_abs = 0
        self.ooo: dict[int, bytes] = {}
        self.received = bytearray()
        self.peer_fin = False
        self.snd_una = 0
        self.snd_nxt = 0
        self.peer_wnd = 0
        self.fin_abs: Optional[int] = None
        self.close_when: Optional[Callable[["TcpClient"], bool]] = None
        self.deadline: Optional[int] = None
        self.out: list[Segment] = []
        self.timeouts = 0
        self.dup_acks = 0
        self.fast_retransmits = 0

    def _seg(self, seq_off: int, flags: int, payload: bytes = b"") -> Segment:
        ack = (self.irs + self.rcv_abs + (1 if self.peer_fin else 0)) % SEQ_MOD
        flags |= TCP_ACK if self.state != "SYN_SENT" else 0
        return Segment(self.ip, self.server_ip, self.port, self.server_port,
                       (self.iss + seq_off) % SEQ_MOD, ack if flags & TCP_ACK else 0,
                       flags, self.rwnd, payload)

    def connect(self, cycle: int) -> None:
        self.state = "SYN_SENT"
        self.out.append(self._seg(0, TCP_SYN))
        self.snd_nxt = 1
        self.deadline = cycle + self.rto

    @property
    def done(self) -> bool:
        return self.state == "CLOSED_DONE"

    def on_segment(self, cycle: int, seg: Segment) -> None:
        if self.state == "SYN_SENT":
            if seg.flags & TCP_SYN and seg.flags & TCP_ACK and seg.ack == (self.iss + 1) % SEQ_MOD:
                self.irs = seg.seq
                self.rcv_abs = 1
                self.snd_una = 1
                self.peer_wnd = seg.window
                self.state = "ESTABLISHED"
                self.deadline = None
                self.out.append(self._seg(self.snd_nxt, 0))
            return
        if seg.flags & TCP_SYN:
            # our handshake ACK was lost and the server retransmitted its SYN-ACK
            self.out.append(self._seg(self.snd_nxt, 0))
            return
        if seg.flags & TCP_ACK:
            a = unwrap((seg.ack - self.iss) % SEQ_MOD, self.snd_una)
            if self.snd_una < a <= self.snd_nxt:
                self.snd_una = a
                self.dup_acks = 0
                self.deadline = cycle + self.rto if self.snd_una < self.snd_nxt else None
            elif a == self.snd_una < self.snd_nxt and not seg.payload and not seg.flags & TCP_FIN:
                self.dup_acks += 1
                if self.dup_acks == 3 and self.snd_una <= len(self.upload):
                    self.fast_retransmits += 1
                    end = min(self.snd_una + self.mss, 1 + len(self.upload))
                    self.out.append(self._seg(self.snd_una, 0, self.upload[self.snd_una - 1:end - 1]))
                    self.deadline = cycle + self.rto
            if a >= self.snd_una:
                self.peer_wnd = seg.window
        if seg.payload or seg.flags & TCP_FIN:
            start = unwrap((seg.seq - self.irs) % SEQ_MOD, self.rcv_abs)
            if seg.payload and start >= self.rcv_abs:
                self.ooo.setdefault(start, seg.payload)
            elif seg.payload and start + len(seg.payload) > self.rcv_abs:
                self.ooo.setdefault(self.rcv_abs, seg.payload[self.rcv_abs - start:])
            while self.rcv_abs in self.ooo:
                data = self.ooo.pop(self.rcv_abs)
                self.received += data
                self.rcv_abs += len(data)
            if seg.flags & TCP_FIN and start + len(seg.payload) == self.rcv_abs:
                self.peer_fin = True
            self.out.append(self._seg(self.snd_nxt, 0))
        if self.fin_abs is not None and self.snd_una > self.fin_abs and self.peer_fin:
            self.state = "CLOSED_DONE"
            self.deadline = None

    def step(self, cycle: int) -> list[Segment]:
        if self.state in ("ESTABLISHED",) and not self.done:
            if self.deadline is not None and cycle >= self.deadline:
                self.timeouts += 1
                self.snd_nxt = self.snd_una
                self.deadline = None
                if self.fin_abs is not None and self.snd_una <= self.fin_abs:
                    self.fin_abs = None
            limit = self.snd_una + max(self.peer_wnd, 1 if self.deadline is None else 0)
            end_data = 1 + len(self.upload)
            while self.snd_nxt < min(end_data, limit):
                end = min(self.snd_nxt + self.mss, end_data, limit)
                self.out.append(self._seg(self.snd_nxt, 0, self.upload[self.snd_nxt - 1:end - 1]))
                self.snd_nxt = end
            if (self.fin_abs is None and self.snd_nxt == end_data and self.close_when
                    and self.close_when(self)):
                self.fin_abs = end_data
                self.out.append(self._seg(self.fin_abs, TCP_FIN))
                self.snd_nxt = self.fin_abs + 1
            if self.snd_una < self.snd_nxt and self.deadline is None:
                self.deadline = cycle + self.rto
        elif self.state == "SYN_SENT" and self.deadline is not None and cycle >= self.deadline:
            self.timeouts += 1
            self.out.append(self._seg(0, TCP_SYN))
            self.deadline = cycle + self.rto
        out, self.out = self.out, []
        return out

    def next_event(self, now: int) -> Optional[int]:
        if self.out:
            return now + 1
        if self.state == "ESTABLISHED":
            end_data = 1 + len(self.upload)
            if self.snd_nxt < min(end_data, self.snd_una + self.peer_wnd):
                return now + 1
            if self.fin_abs is None and self.snd_nxt == end_data and self.close_when \
                    and self.close_when(self):
                return now + 1
        return self.deadline


class StreamSenderApp:
    """Application tile that streams a byte string to the client once connected."""

    def __init__(self, engine: TcpEngine, data: bytes, chunk: int = 16384):
        self.engine = engine
        self.data = data
        self.chunk = chunk
        self.pos = 0
        self.flow_id: Optional[int] = None
        self.notes: list[tuple[int, AppNotification]] = []

    def _reserve(self) -> None:
        n = min(self.chunk, len(self.data) - self.pos)
        if n > 0:
            self.engine.app_tx_reserve(self.flow_id, n)

    def on_notify(self, cycle: int, note: AppNotification) -> None:
        self.notes.append((cycle, note))
        if note.kind == NoteKind.CONN_ESTABLISHED:
            self.flow_id = note.flow_id
            self._reserve()
        elif note.kind == NoteKind.TX_SPACE:
            flow = self.engine.by_id[note.flow_id]
            piece = self.data[self.pos:self.pos + note.length]
            flow.tx_ring.write(note.address, piece)
            self.pos += len(piece)
            self.engine.app_tx_commit(note.flow_id, len(piece))
            self._reserve()


class StreamSinkApp:
    """Application tile that consumes an expected number of bytes in chunks."""

    def __init__(self, engine: TcpEngine, expect: int, chunk: int = 4096):
        self.engine = engine
        self.expect = expect
        self.chunk = chunk
        self.data = bytearray()
        self.notes: list[tuple[int, AppNotification]] = []

    def _request(self, flow_id: int) -> None:
        n = min(self.chunk, self.expect - len(self.data))
        if n > 0:
            self.engine.app_rx_request(flow_id, n)

    def on_notify(self, cycle: int, note: AppNotification) -> None:
        self.notes.append((cycle, note))
        if note.kind == NoteKind.CONN_ESTABLISHED:
            self._request(note.flow_id)
        elif note.kind == NoteKind.RX_READY:
            flow = self.engine.by_id[note.flow_id]
            self.data += flow.rx_ring.read(note.address, note.length)
            self.engine.app_rx_done(note.flow_id, note.length)
            self._request(note.flow_id)


@dataclass
class WireRecord:
    cycle: int
    direction: str  # "to-engine" or "from-engine"
    raw: bytes


@dataclass
class StreamResult:
    ok: bool
    delivered: bytes
    cycles: int
    fast_retransmits: int  # at the sending side: the engine for download, the client for upload
    timeouts: int
    client_timeouts: int
    isolated_losses: int
    lost: int
    emitted: list[tuple[int, bytes]] = field(default_factory=list)
    trace: list[WireRecord] = field(default_factory=list)
    ownership_writes: dict = field(default_factory=dict)


class _Wire:
    """One direction of the external link: serialisation, propagation delay, faults."""

    def __init__(self, delay: int, link: FaultyLink):
        self.delay = delay
        self.link = link
        self.free_at = 0
        self.log: list[tuple[bool, Segment]] = []  # (delivered?, segment) per send

    def send(self, cycle: int, raw: bytes, seg: Segment) -> list[tuple[int, bytes]]:
        start = max(cycle, self.free_at)
        self.free_at = start + -(-len(raw) // LINE_BYTES)
        out = self.link.perturb(self.free_at + self.delay, raw)
        self.log.append((bool(out), seg))
        return out


def count_isolated_losses(log: list[tuple[bool, Segment]], follow: int = 3) -> int:
    """Lost data segments whose next ``follow`` data sends were all delivered."""
    data = [(ok, s) for ok, s in log if s.payload]
    n = 0
    for i, (ok, _s) in enumerate(data):
        if ok:
            continue
        nxt = data[i + 1:i + 1 + follow]
        if len(nxt) == follow and all(o for o, _ in nxt):
            n += 1
    return n


def stream_data(nbytes: int, seed: int) -> bytes:
    return random.Random(f"data:{seed}").randbytes(nbytes)


def make_server(direction: str, data: bytes, *, seed: int = 0, mss: int = MSS,
                ring_size: int = RING_SIZE, rto: int = RTO_CYCLES):
    """Engine listening on SERVER_PORT plus its application tile, wired together."""
    engine = TcpEngine(SERVER_IP, seed=seed, mss=mss, ring_size=ring_size, rto=rto)
    engine.listen(SERVER_PORT)
    if direction == "download":
        app = StreamSenderApp(engine, data)
    elif direction == "upload":
        app = StreamSinkApp(engine, len(data))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    engine.on_notify = app.on_notify
    return engine, app


@dataclass
class Session:
    """Outcome of driving one engine and one client to completion."""

    cycles: int
    up: _Wire
    down: _Wire
    emitted: list[tuple[int, bytes]]
    trace: list[WireRecord]


def simulate(engine: TcpEngine, client: TcpClient, *, fault: Optional[FaultModel] = None,
             wire_delay: int = 100, stack_latency: int = 20, max_cycles: int = 50_000_000,
             record: bool = False) -> Session:
    """Run the client against the engine until the connection has closed and gone quiet."""
    fault = fault or FaultModel()
    up = _Wire(wire_delay, FaultyLink(fault, 1))
    down = _Wire(wire_delay, FaultyLink(fault, 2))
    events: list = []
    order = itertools.count()
    trace: list[WireRecord] = []
    emitted: list[tuple[int, bytes]] = []

    def on_emit(cycle, seg):
        raw = segment_to_ip(seg)
        emitted.append((cycle, raw))
        if record:
            trace.append(WireRecord(cycle, "from-engine", raw))
        for t, r in down.send(cycle + stack_latency, raw, seg):
            heapq.heappush(events, (t, next(order), "client", r))

    engine.on_emit = on_emit
    now = 0
    client.connect(now)

    def flush_client(cycle):
        for seg in client.step(cycle):
            raw = segment_to_ip(seg)
            for t, r in up.send(cycle, raw, seg):
                heapq.heappush(events, (t + stack_latency, next(order), "engine", r))

    flush_client(now)
    while now < max_cycles:
        cands = [e for e in (engine.next_event(), client.next_event(now)) if e is not None]
        if events:
            cands.append(events[0][0])
        if not cands:
            break
        now = max(now + 1, min(cands))
        while events and events[0][0] <= now:
            _, _, dest, raw = heapq.heappop(events)
            try:
                seg = segment_from_ip(raw)
            except Drop:
                continue
            if dest == "engine":
                if record:
                    trace.append(WireRecord(now, "to-engine", raw))
                engine.deliver(now, seg)
            else:
                client.on_segment(now, seg)
        ev = engine.next_event()
        if ev is not None and ev <= now:
            engine.step(now)
        flush_client(now)
        if client.done and not events and engine.next_event() is None:
            break
    return Session(now, up, down, emitted, trace)


def run_stream(nbytes: int = 1_000_000, *, seed: int = 0, fault: Optional[FaultModel] = None,
               direction: str = "download", wire_delay: int = 100, stack_latency: int = 20,
               mss: int = MSS, ring_size: int = RING_SIZE, rto: int = RTO_CYCLES,
               max_cycles: int = 50_000_000, record: bool = False,
               data: Optional[bytes] = None, logger_latency: int = 0) -> StreamResult:
    """Stream ``nbytes`` through the engine and close the connection.

    ``download`` has the engine send (exercising its transmit path and fast
    retransmit); ``upload`` has the client send. ``logger_latency`` is the
    cut-through latency of the logging tile in front of the engine, added in
    both directions.
    """
    if data is None:
        data = stream_data(nbytes, seed)
    engine, app = make_server(direction, data, seed=seed, mss=mss, ring_size=ring_size, rto=rto)
    client = TcpClient(isn=random.Random(f"isn:{seed}").getrandbits(32), mss=mss, rto=rto,
                       upload=data if direction == "upload" else b"")
    if direction == "download":
        client.close_when = lambda c: len(c.received) >= len(data)
    else:
        client.close_when = lambda c: c.snd_una >= 1 + len(data)
    sess = simulate(engine, client, fault=fault or FaultModel(seed=seed), wire_delay=wire_delay,
                    stack_latency=stack_latency + logger_latency, max_cycles=max_cycles,
                    record=record)
    if direction == "download":
        delivered = bytes(client.received)
    else:
        delivered = bytes(app.data)
    flows = list(engine.by_id.values())
    tx = flows[0].tx if flows else None
    return StreamResult(
        ok=delivered == data,
        delivered=delivered,
        cycles=sess.cycles,
        fast_retransmits=(tx.fast_retransmits if tx else 0) if direction == "download"
        else client.fast_retransmits,
        timeouts=tx.timeouts if tx else 0,
        client_timeouts=client.timeouts,
        isolated_losses=count_isolated_losses(sess.down.log if direction == "download"
                                              else sess.up.log),
        lost=sess.up.link.lost + sess.down.link.lost,
        emitted=sess.emitted,
        trace=sess.trace,
        ownership_writes=dict(engine.guard.writes),
    )
