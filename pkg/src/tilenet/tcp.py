"""
Server-side TCP split into a receive engine and a transmit engine.

Flow state is partitioned by writer: the receive engine owns ``RxOwned`` and
the transmit engine owns ``TxOwned``. Each engine sees the other half only
through a snapshot published at the end of the previous cycle, so every
decision uses a consistent but possibly one-cycle-stale view. Within a cycle
the receive engine runs before the transmit engine.

Applications talk to the engine with messages: they ask to be told when
``n`` received bytes are ready or ``n`` bytes of transmit space are free,
read or write the ring buffer tiles directly, and then report completion.

Sequence numbers are tracked internally as unbounded offsets from the initial
sequence numbers and wrapped to 32 bits only on the wire.

Not supported: active open, SACK, congestion control, TCP options.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .packets import TCP_ACK, TCP_FIN, TCP_RST, TCP_SYN, Segment

MSS = 1460
RING_SIZE = 64 * 1024
RTO_CYCLES = 5000
DUP_ACK_THRESHOLD = 3
SYNACK_RETRIES = 5
MAX_WINDOW = 0xFFFF
SEQ_MOD = 1 << 32


class TcpState(Enum):
    LISTEN = "LISTEN"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    CLOSING = "CLOSING"
    CLOSED = "CLOSED"


class OwnershipError(RuntimeError):
    """An engine wrote to the half of the flow state it does not own."""


def unwrap(seq32: int, ref: int) -> int:
    """Offset closest to ``ref`` whose low 32 bits equal ``seq32``."""
    d = (seq32 - ref) % SEQ_MOD
    if d >= SEQ_MOD // 2:
        d -= SEQ_MOD
    return ref + d


class _Guard:
    def __init__(self):
        self.active: Optional[str] = None
        self.writes = {"rx": 0, "tx": 0}


class _Owned:
    _owner = ""

    def __setattr__(self, name, value):
        g = self.__dict__.get("_guard")
        if g is not None and g.active is not None:
            if g.active != self._owner:
                raise OwnershipError(f"{g.active} engine wrote {self._owner}.{name}")
            g.writes[g.active] += 1
        object.__setattr__(self, name, value)

    def snapshot(self):
        snap = copy.copy(self)
        object.__setattr__(snap, "_guard", None)
        return snap


class RxOwned(_Owned):
    _owner = "rx"

    def __init__(self, guard: _Guard):
        self.state = TcpState.LISTEN
        self.irs = 0
        self.rcv_abs = 0  # next expected receive offset (1 = first data byte)
        self.fin_received = False
        self.rx_head = 1  # first offset not yet released by the application
        self.ack_recv_for_tx = 0  # highest cumulative ACK of our data (offset)
        self.dup_ack_count = 0
        self.fast_retx_epoch = 0
        self.peer_window = 0
        self.rx_request = 0
        self.closed_reason = ""
        self.synack_deadline: Optional[int] = None  # SYN-ACK retransmission while in SYN_RCVD
        self.synack_sent = 0
        object.__setattr__(self, "_guard", guard)

    @property
    def rx_tail(self) -> int:
        return self.rcv_abs

    def buffered(self) -> int:
        return self.rcv_abs - self.rx_head if self.rcv_abs else 0


class TxOwned(_Owned):
    _owner = "tx"

    def __init__(self, guard: _Guard):
        self.snd_una = 0
        self.snd_nxt = 1  # the SYN-ACK (offset 0) is sent by the receive engine
        self.snd_max = 1
        self.tx_tail = 1  # offset after the last byte committed by the application
        self.retransmit_pending = False
        self.seen_epoch = 0
        self.last_ack_sent = -1
        self.last_wnd_sent = -1
        self.rto_deadline: Optional[int] = None
        self.fin_abs: Optional[int] = None
        self.tx_reserve = 0
        self.fast_retransmits = 0
        self.timeouts = 0
        object.__setattr__(self, "_guard", guard)


class BufferTile:
    """Byte store addressed by (address, length); accesses wrap modulo capacity.

    Requests are served strictly in arrival order; ``ops`` keeps that order.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.mem = bytearray(capacity)
        self.ops: list[tuple[str, int, int]] = []

    def write(self, addr: int, data: bytes) -> None:
        self.ops.append(("write", addr, len(data)))
        a = addr % self.capacity
        first = min(len(data), self.capacity - a)
        self.mem[a:a + first] = data[:first]
        if first < len(data):
            self.mem[:len(data) - first] = data[first:]

    def read(self, addr: int, length: int) -> bytes:
        self.ops.append(("read", addr, length))
        a = addr % self.capacity
        first = min(length, self.capacity - a)
        out = bytes(self.mem[a:a + first])
        if first < length:
            out += bytes(self.mem[:length - first])
        return out


class NoteKind(Enum):
    CONN_ESTABLISHED = "CONN_ESTABLISHED"
    RX_READY = "RX_READY"
    TX_SPACE = "TX_SPACE"
    REJECTED = "REJECTED"
    CLOSED = "CLOSED"


@dataclass(frozen=True)
class AppNotification:
    kind: NoteKind
    flow_id: int
    address: int = 0
    length: int = 0


@dataclass
class TcpFlow:
    flow_id: int
    local_ip: int
    local_port: int
    remote_ip: int
    remote_port: int
    iss: int
    rx: RxOwned
    tx: TxOwned
    rx_ring: BufferTile
    tx_ring: BufferTile
    rx_snap: RxOwned = None
    tx_snap: TxOwned = None

    def __post_init__(self):
        self.rx_snap = self.rx.snapshot()
        self.tx_snap = self.tx.snapshot()

    def read_peer_snapshot(self, reader: str):
        """The other engine's half as published at the end of the last stepped cycle."""
        return self.tx_snap if reader == "rx" else self.rx_snap

    def publish(self) -> None:
        self.rx_snap = self.rx.snapshot()
        self.tx_snap = self.tx.snapshot()

    def wire_seq(self, off: int) -> int:
        return (self.iss + off) % SEQ_MOD

    def rcv_nxt(self, rx: RxOwned) -> int:
        return (rx.irs + rx.rcv_abs + (1 if rx.fin_received else 0)) % SEQ_MOD

    def make(self, seq_off: int, ack: Optional[int], flags: int, window: int,
             payload: bytes = b"") -> Segment:
        return Segment(self.local_ip, self.remote_ip, self.local_port, self.remote_port,
                       self.wire_seq(seq_off), ack if ack is not None else 0,
                       flags | (TCP_ACK if ack is not None else 0), window, payload)


@dataclass
class _AppMsg:
    op: str
    flow_id: int
    n: int


class TcpEngine:
    """Receive and transmit engines plus their shared (partitioned) flow table.

    ``on_emit(cycle, segment)`` is called for every segment leaving the engine
    and ``on_notify(cycle, note)`` for every application notification.
    """

    def __init__(self, local_ip: int, *, seed: int = 0, mss: int = MSS, ring_size: int = RING_SIZE,
                 rto: int = RTO_CYCLES, dup_ack_threshold: int = DUP_ACK_THRESHOLD):
        self.local_ip = local_ip
        self.seed = seed
        self.mss = mss
        self.ring_size = ring_size
        self.rto = rto
        self.dup_ack_threshold = dup_ack_threshold
        self.guard = _Guard()
        self.listening: set[int] = set()
        self.flows: dict[tuple[int, int, int], TcpFlow] = {}
        self.by_id: dict[int, TcpFlow] = {}
        self._next_id = 0
        self.inbox: deque[tuple[int, Segment]] = deque()
        self.app_rx_msgs: deque[_AppMsg] = deque()
        self.app_tx_msgs: deque[_AppMsg] = deque()
        self.on_emit: Optional[Callable[[int, Segment], None]] = None
        self.on_notify: Optional[Callable[[int, AppNotification], None]] = None
        self.emitted: list[tuple[int, Segment]] = []
        self.drops: list[tuple[int, str]] = []
        self._dirty = False
        self.last_cycle = -1

    # -- setup and application messages --
    def listen(self, port: int) -> None:
        self.listening.add(port)

    def isn(self, remote_ip: int, remote_port: int, local_port: int) -> int:
        h = hashlib.blake2b(struct.pack(">QIHIH", self.seed, remote_ip, remote_port,
                                        self.local_ip, local_port), digest_size=4)
        return int.from_bytes(h.digest(), "big")

    def deliver(self, cycle: int, seg: Segment) -> None:
        """Queue a segment arriving from the IP layer at ``cycle``."""
        self.inbox.append((cycle, seg))

    def app_rx_request(self, flow_id: int, nbytes: int) -> None:
        self.app_rx_msgs.append(_AppMsg("request", flow_id, nbytes))
        self._dirty = True

    def app_rx_done(self, flow_id: int, nbytes: int) -> None:
        self.app_rx_msgs.append(_AppMsg("done", flow_id, nbytes))
        self._dirty = True

    def app_tx_reserve(self, flow_id: int, nbytes: int) -> None:
        self.app_tx_msgs.append(_AppMsg("reserve", flow_id, nbytes))
        self._dirty = True

    def app_tx_commit(self, flow_id: int, nbytes: int) -> None:
        self.app_tx_msgs.append(_AppMsg("commit", flow_id, nbytes))
        self._dirty = True

    # -- helpers --
    def _emit(self, cycle: int, seg: Segment) -> None:
        self.emitted.append((cycle, seg))
        if self.on_emit:
            self.on_emit(cycle, seg)

    def _notify(self, cycle: int, note: AppNotification) -> None:
        if self.on_notify:
            self.on_notify(cycle, note)

    def _window(self, rx: RxOwned) -> int:
        return min(MAX_WINDOW, self.ring_size - rx.buffered())

    def _check_rx_ready(self, flow: TcpFlow, cycle: int) -> None:
        rx = flow.rx
        if rx.rx_request and rx.buffered() >= rx.rx_request:
            n = rx.rx_request
            rx.rx_request = 0
            self._notify(cycle, AppNotification(NoteKind.RX_READY, flow.flow_id,
                                                (rx.rx_head - 1) % self.ring_size, n))

    def _teardown(self, flow: TcpFlow, cycle: int, reason: str) -> None:
        flow.rx.state = TcpState.CLOSED
        flow.rx.closed_reason = reason
        self._notify(cycle, AppNotification(NoteKind.CLOSED, flow.flow_id))

    # -- receive engine --
    def on_segment_rx(self, flow: Optional[TcpFlow], seg: Segment, cycle: int) -> None:
        if flow is None:
            if seg.flags & TCP_SYN and not seg.flags & TCP_ACK and seg.dst_port in self.listening:
                flow = self._new_flow(seg)
            else:
                self.drops.append((cycle, "unknown_flow"))
                return
        rx = flow.rx
        txs = flow.read_peer_snapshot("rx")
        if rx.state == TcpState.CLOSED:
            self.drops.append((cycle, "closed_flow"))
            return
        if seg.flags & TCP_RST:
            self._teardown(flow, cycle, "rst")
            return
        if rx.state == TcpState.LISTEN:
            if not seg.flags & TCP_SYN:
                self.drops.append((cycle, "no_syn"))
                return
            rx.irs = seg.seq
            rx.rcv_abs = 1
            rx.peer_window = seg.window
            rx.state = TcpState.SYN_RCVD
            self._send_synack(flow, cycle)
            return
        if rx.state == TcpState.SYN_RCVD:
            if seg.flags & TCP_SYN:
                # retransmitted SYN: our SYN-ACK was lost
                self._send_synack(flow, cycle)
                return
            if not seg.flags & TCP_ACK or unwrap((seg.ack - flow.iss) % SEQ_MOD, 1) != 1:
                self.drops.append((cycle, "bad_handshake_ack"))
                return
            rx.ack_recv_for_tx = 1
            rx.peer_window = seg.window
            rx.state = TcpState.ESTABLISHED
            rx.synack_deadline = None
            self._notify(cycle, AppNotification(NoteKind.CONN_ESTABLISHED, flow.flow_id))
        if seg.flags & TCP_SYN:
            self.drops.append((cycle, "stray_syn"))
            return
        self._rx_ack(flow, seg, txs)
        self._rx_data(flow, seg, cycle)
        if (rx.state == TcpState.CLOSING and txs.fin_abs is not None
                and rx.ack_recv_for_tx > txs.fin_abs):
            self._teardown(flow, cycle, "closed")

    def _send_synack(self, flow: TcpFlow, cycle: int) -> None:
        rx = flow.rx
        self._emit(cycle, flow.make(0, flow.rcv_nxt(rx), TCP_SYN, self._window(rx)))
        rx.synack_sent += 1
        rx.synack_deadline = cycle + self.rto

    def _rx_ack(self, flow: TcpFlow, seg: Segment, txs: TxOwned) -> None:
        if not seg.flags & TCP_ACK:
            return
        rx = flow.rx
        a = unwrap((seg.ack - flow.iss) % SEQ_MOD, rx.ack_recv_for_tx)
        if a > txs.snd_max:
            # acknowledges data we never sent (or not yet visible to us); ignore the ACK
            return
        if a > rx.ack_recv_for_tx:
            rx.ack_recv_for_tx = a
            rx.dup_ack_count = 0
            rx.peer_window = seg.window
        elif a == rx.ack_recv_for_tx:
            pure = not seg.payload and not seg.flags & (TCP_SYN | TCP_FIN)
            if pure and seg.window == rx.peer_window and txs.snd_max > a:
                rx.dup_ack_count += 1
                if rx.dup_ack_count == self.dup_ack_threshold:
                    rx.fast_retx_epoch += 1
            else:
                rx.peer_window = seg.window

    def _rx_data(self, flow: TcpFlow, seg: Segment, cycle: int) -> None:
        rx = flow.rx
        has_fin = bool(seg.flags & TCP_FIN)
        if not seg.payload and not has_fin:
            return
        start = unwrap((seg.seq - rx.irs) % SEQ_MOD, rx.rcv_abs)
        data = seg.payload
        off = rx.rcv_abs - start
        if rx.fin_received or off < 0 or off > len(data) or (off == len(data) and not has_fin):
            # out of order, or an old duplicate: re-ACK what we have
            self._emit(cycle, flow.make(flow.tx_snap.snd_nxt, flow.rcv_nxt(rx), 0, self._window(rx)))
            return
        new = data[off:]
        free = self.ring_size - rx.buffered()
        take = new[:free]
        if take:
            flow.rx_ring.write(rx.rcv_abs - 1, take)
            rx.rcv_abs += len(take)
        if has_fin and len(take) == len(new):
            rx.fin_received = True
            rx.state = TcpState.CLOSING
        self._check_rx_ready(flow, cycle)

    def _new_flow(self, seg: Segment) -> TcpFlow:
        fid = self._next_id
        self._next_id += 1
        flow = TcpFlow(fid, self.local_ip, seg.dst_port, seg.src_ip, seg.src_port,
                       self.isn(seg.src_ip, seg.src_port, seg.dst_port),
                       RxOwned(self.guard), TxOwned(self.guard),
                       BufferTile(self.ring_size), BufferTile(self.ring_size))
        self.flows[(seg.src_ip, seg.src_port, seg.dst_port)] = flow
        self.by_id[fid] = flow
        return flow

    def _app_rx(self, msg: _AppMsg, cycle: int) -> None:
        flow = self.by_id.get(msg.flow_id)
        if flow is None:
            return
        rx = flow.rx
        if msg.op == "request":
            if msg.n > self.ring_size or msg.n <= 0:
                self._notify(cycle, AppNotification(NoteKind.REJECTED, flow.flow_id, 0, msg.n))
                return
            rx.rx_request = msg.n
            self._check_rx_ready(flow, cycle)
        elif msg.op == "done":
            rx.rx_head = min(rx.rx_head + msg.n, rx.rcv_abs)

    # -- transmit engine --
    def _app_tx(self, msg: _AppMsg, cycle: int) -> None:
        flow = self.by_id.get(msg.flow_id)
        if flow is None:
            return
        tx = flow.tx
        if msg.op == "reserve":
            if msg.n > self.ring_size or msg.n <= 0:
                self._notify(cycle, AppNotification(NoteKind.REJECTED, flow.flow_id, 0, msg.n))
                return
            tx.tx_reserve = msg.n
        elif msg.op == "commit":
            tx.tx_tail += msg.n

    def _tx_space(self, flow: TcpFlow, cycle: int) -> None:
        tx = flow.tx
        if not tx.tx_reserve:
            return
        free = self.ring_size - (tx.tx_tail - max(tx.snd_una, 1))
        if free >= tx.tx_reserve:
            n = tx.tx_reserve
            tx.tx_reserve = 0
            self._notify(cycle, AppNotification(NoteKind.TX_SPACE, flow.flow_id,
                                                (tx.tx_tail - 1) % self.ring_size, n))

    def _data_segment(self, flow: TcpFlow, start: int, end: int, ack: int, wnd: int) -> Segment:
        payload = flow.tx_ring.read(start - 1, end - start)
        return flow.make(start, ack, 0, wnd, payload)

    def tx_generate(self, flow: TcpFlow, rs: RxOwned, cycle: int) -> list[Segment]:
        """Segments the transmit engine sends this cycle, decided from snapshot ``rs``."""
        tx = flow.tx
        if rs.state not in (TcpState.ESTABLISHED, TcpState.CLOSING):
            return []
        if rs.ack_recv_for_tx > tx.snd_una:
            tx.snd_una = rs.ack_recv_for_tx
            tx.rto_deadline = cycle + self.rto if tx.snd_una < tx.snd_max else None
        if tx.snd_nxt < tx.snd_una:
            tx.snd_nxt = tx.snd_una
        if rs.fast_retx_epoch != tx.seen_epoch:
            tx.seen_epoch = rs.fast_retx_epoch
            if tx.snd_una < tx.snd_max:
                tx.retransmit_pending = True
        self._tx_space(flow, cycle)

        ack = flow.rcv_nxt(rs)
        wnd = self._window(rs)
        data_end = tx.tx_tail
        limit = rs.ack_recv_for_tx + rs.peer_window
        out: list[Segment] = []

        if tx.rto_deadline is not None and cycle >= tx.rto_deadline:
            tx.timeouts += 1
            tx.snd_nxt = tx.snd_una  # go back to the oldest unacknowledged byte
            tx.retransmit_pending = False
            if rs.peer_window == 0 and tx.snd_una < data_end:
                limit = tx.snd_una + 1  # zero-window probe
            tx.rto_deadline = cycle + self.rto
        elif rs.peer_window == 0 and tx.snd_una == tx.snd_max and tx.snd_una < data_end:
            if tx.rto_deadline is None:
                tx.rto_deadline = cycle + self.rto

        if tx.retransmit_pending:
            tx.retransmit_pending = False
            end = min(tx.snd_una + self.mss, tx.snd_max, data_end)
            if end > tx.snd_una:
                out.append(self._data_segment(flow, tx.snd_una, end, ack, wnd))
                tx.fast_retransmits += 1
            elif tx.fin_abs is not None and tx.snd_una == tx.fin_abs:
                out.append(flow.make(tx.fin_abs, ack, TCP_FIN, wnd))

        while tx.snd_nxt < min(data_end, limit):
            end = min(tx.snd_nxt + self.mss, data_end, limit)
            out.append(self._data_segment(flow, tx.snd_nxt, end, ack, wnd))
            tx.snd_nxt = end

        if rs.fin_received and tx.snd_nxt == data_end:
            if tx.fin_abs is None:
                tx.fin_abs = data_end
            if tx.snd_nxt == tx.fin_abs:
                out.append(flow.make(tx.fin_abs, ack, TCP_FIN, wnd))
                tx.snd_nxt = tx.fin_abs + 1

        tx.snd_max = max(tx.snd_max, tx.snd_nxt)
        if out and tx.rto_deadline is None and tx.snd_una < tx.snd_max:
            tx.rto_deadline = cycle + self.rto
        if tx.snd_una >= tx.snd_max and not (rs.peer_window == 0 and tx.snd_una < data_end):
            tx.rto_deadline = None
        if not out:
            grew = tx.last_wnd_sent >= 0 and (
                (tx.last_wnd_sent == 0 and wnd > 0) or wnd >= tx.last_wnd_sent + self.mss)
            if ack != tx.last_ack_sent or grew:
                out.append(flow.make(tx.snd_nxt, ack, 0, wnd))
        if out:
            tx.last_ack_sent = ack
            tx.last_wnd_sent = wnd
        return out

    # -- scheduling --
    def step(self, cycle: int) -> None:
        """Advance both engines by one cycle: receive engine first, then transmit."""
        if cycle <= self.last_cycle:
            raise ValueError(f"cycle {cycle} is not after {self.last_cycle}")
        self.last_cycle = cycle
        self._dirty = False
        g = self.guard
        g.active = "rx"
        try:
            while self.inbox and self.inbox[0][0] <= cycle:
                _, seg = self.inbox.popleft()
                key = (seg.src_ip, seg.src_port, seg.dst_port)
                self.on_segment_rx(self.flows.get(key), seg, cycle)
                self._dirty = True
            while self.app_rx_msgs:
                self._app_rx(self.app_rx_msgs.popleft(), cycle)
            for flow in self.by_id.values():
                rx = flow.rx
                if rx.state == TcpState.SYN_RCVD and rx.synack_deadline is not None \
                        and cycle >= rx.synack_deadline:
                    # the handshake ACK never arrived
                    if rx.synack_sent > SYNACK_RETRIES:
                        rx.synack_deadline = None
                        self._teardown(flow, cycle, "handshake_timeout")
                    else:
                        self._send_synack(flow, cycle)
                    self._dirty = True
        finally:
            g.active = None
        g.active = "tx"
        try:
            while self.app_tx_msgs:
                self._app_tx(self.app_tx_msgs.popleft(), cycle)
            for flow in self.by_id.values():
                for seg in self.tx_generate(flow, flow.rx_snap, cycle):
                    self._emit(cycle, seg)
                    self._dirty = True
        finally:
            g.active = None
        for flow in self.by_id.values():
            if flow.rx.state == TcpState.CLOSED:
                continue
            before = (flow.rx_snap.__dict__, flow.tx_snap.__dict__)
            flow.publish()
            if (flow.rx_snap.__dict__, flow.tx_snap.__dict__) != before:
                self._dirty = True

    def next_event(self) -> Optional[int]:
        """Earliest cycle at which stepping the engine could do anything."""
        times = []
        if self._dirty or self.app_rx_msgs or self.app_tx_msgs:
            times.append(self.last_cycle + 1)
        if self.inbox:
            times.append(max(self.inbox[0][0], self.last_cycle + 1))
        for f in self.by_id.values():
            if f.rx.state != TcpState.CLOSED and f.tx.rto_deadline is not None:
                times.append(max(f.tx.rto_deadline, self.last_cycle + 1))
            if f.rx.state == TcpState.SYN_RCVD and f.rx.synack_deadline is not None:
                times.append(max(f.rx.synack_deadline, self.last_cycle + 1))
        return min(times) if times else None
