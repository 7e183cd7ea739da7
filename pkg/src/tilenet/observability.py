"""
Logging tiles, log readback over UDP, and cycle-accurate trace replay.

Readback wire format (big endian). Request: ``index u32``. Response::

    status u8 | index u32 | seq u64 | cycle u64 | direction u8 | raw_len u16 | raw

``status`` is 1 for an entry and 0 for the empty marker (index past the tail
or already evicted), in which case the remaining fields are zero. ``seq`` is
the entry's position in the whole log history, ``direction`` is 0 for
to-engine and 1 for from-engine, and ``raw`` holds the packet bytes as logged
(at most 65535).
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .fabric import PassThrough
from .faults import FaultModel, FaultyLink
from .packets import Drop, segment_from_ip, segment_to_ip

DEFAULT_LOG_CAPACITY = 4096
TO_ENGINE = "to-engine"
FROM_ENGINE = "from-engine"
_DIRS = {TO_ENGINE: 0, FROM_ENGINE: 1}
_REQ = struct.Struct(">I")
_RESP = struct.Struct(">BIQQBH")


class TraceError(ValueError):
    pass


def summarize(raw: bytes) -> dict:
    """Decoded header fields of an IPv4/TCP packet; empty if it does not parse."""
    try:
        seg = segment_from_ip(raw)
    except Drop:
        return {}
    return {"src_port": seg.src_port, "dst_port": seg.dst_port, "seq": seg.seq, "ack": seg.ack,
            "flags": seg.flag_names(), "window": seg.window, "len": len(seg.payload)}


@dataclass(frozen=True)
class LogEntry:
    index: int
    cycle: int
    direction: str
    raw: bytes = b""
    summary: dict = field(default_factory=dict, compare=False, hash=False)

    def to_json(self) -> dict:
        return {"index": self.index, "cycle": self.cycle, "direction": self.direction,
                "fields": self.summary, "raw": self.raw.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "LogEntry":
        raw = bytes.fromhex(d.get("raw", ""))
        return cls(int(d["index"]), int(d["cycle"]), d["direction"], raw, d.get("fields") or {})


class RingLog:
    """Bounded log; the oldest entries are evicted once capacity is reached."""

    def __init__(self, capacity: int = DEFAULT_LOG_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[LogEntry] = deque()
        self.next_index = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def first_index(self) -> int:
        return self.entries[0].index if self.entries else self.next_index

    def get(self, index: int) -> Optional[LogEntry]:
        i = index - self.first_index
        if 0 <= i < len(self.entries):
            return self.entries[i]
        return None

    def __iter__(self):
        return iter(self.entries)


def log_append(log: RingLog, cycle: int, direction: str, raw: bytes = b"",
               summary: Optional[dict] = None) -> LogEntry:
    if direction not in _DIRS:
        raise ValueError(f"unknown direction {direction!r}")
    if log.entries and cycle < log.entries[-1].cycle:
        raise ValueError("log cycles must be non-decreasing")
    e = LogEntry(log.next_index, cycle, direction, bytes(raw),
                 summary if summary is not None else summarize(raw))
    log.next_index += 1
    log.entries.append(e)
    while len(log.entries) > log.capacity:
        log.entries.popleft()
    return e


# -- readback --

def encode_read_request(index: int) -> bytes:
    return _REQ.pack(index)


def encode_entry(entry: Optional[LogEntry], index: int) -> bytes:
    if entry is None:
        return _RESP.pack(0, index, 0, 0, 0, 0)
    raw = entry.raw[:0xFFFF]
    return _RESP.pack(1, index, entry.index, entry.cycle, _DIRS[entry.direction], len(raw)) + raw


def decode_entry(data: bytes) -> Optional[LogEntry]:
    """Parse a readback response; ``None`` for the empty marker."""
    if len(data) < _RESP.size:
        raise ValueError("short readback response")
    status, _index, seq, cycle, d, n = _RESP.unpack_from(data)
    if status == 0:
        return None
    raw = data[_RESP.size:_RESP.size + n]
    if len(raw) != n:
        raise ValueError("truncated readback response")
    direction = TO_ENGINE if d == 0 else FROM_ENGINE
    return LogEntry(seq, cycle, direction, raw, summarize(raw))


def response_index(data: bytes) -> int:
    return _RESP.unpack_from(data)[1]


class LogPort:
    """UDP readback endpoint of one log.

    Requests wait in a bounded queue and are answered one every
    ``service_cycles``; a request arriving at a full queue is dropped silently.
    """

    def __init__(self, log: RingLog, udp_port: int, *, queue_depth: int = 8, service_cycles: int = 4):
        self.log = log
        self.udp_port = udp_port
        self.queue_depth = queue_depth
        self.service_cycles = service_cycles
        self.queue: deque[bytes] = deque()
        self.busy_until = 0
        self.dropped = 0
        self.served = 0

    def offer(self, cycle: int, request: bytes) -> bool:
        if len(self.queue) >= self.queue_depth:
            self.dropped += 1
            return False
        self.queue.append(request)
        return True

    def step(self, cycle: int) -> Optional[bytes]:
        if not self.queue or cycle < self.busy_until:
            return None
        req = self.queue.popleft()
        self.busy_until = cycle + self.service_cycles
        self.served += 1
        return log_read_handle(self.log, req)


def log_read_handle(log: RingLog, request: bytes) -> Optional[bytes]:
    """Answer one readback request; malformed requests get no answer."""
    if len(request) != _REQ.size:
        return None
    (index,) = _REQ.unpack(request)
    return encode_entry(log.get(index), index)


@dataclass
class ReadStats:
    requests: int = 0
    retries: int = 0
    cycles: int = 0


def read_log(port: LogPort, *, window: int = 32, timeout: int = 400, rtt: int = 40,
             fault: Optional[FaultModel] = None, start: Optional[int] = None,
             max_cycles: int = 10_000_000) -> tuple[list[LogEntry], ReadStats]:
    """Retrying readback client.

    Keeps up to ``window`` requests outstanding, resends any request without
    a reply after ``timeout`` cycles, and stops at the first empty marker.
    """
    up = FaultyLink(fault or FaultModel(), 11)
    down = FaultyLink(fault or FaultModel(), 12)
    first = port.log.first_index if start is None else start
    got: dict[int, Optional[LogEntry]] = {}
    sent_at: dict[int, int] = {}
    in_net: list[tuple[int, str, bytes]] = []
    stats = ReadStats()
    end: Optional[int] = None
    nxt = first
    cycle = 0
    while cycle < max_cycles:
        # issue new requests and retries
        for idx in sorted(sent_at):
            if cycle - sent_at[idx] >= timeout:
                sent_at[idx] = cycle
                stats.retries += 1
                stats.requests += 1
                in_net += [(t + rtt // 2, "req", encode_read_request(idx))
                           for t, _ in up.perturb(cycle, idx)]
        while (end is None or nxt < end) and len(sent_at) < window:
            sent_at[nxt] = cycle
            stats.requests += 1
            in_net += [(t + rtt // 2, "req", encode_read_request(nxt))
                       for t, _ in up.perturb(cycle, nxt)]
            nxt += 1
        arriving = [m for m in in_net if m[0] <= cycle]
        in_net = [m for m in in_net if m[0] > cycle]
        for _, kind, data in sorted(arriving, key=lambda m: m[0]):
            if kind == "req":
                port.offer(cycle, data)
            else:
                idx = response_index(data)
                sent_at.pop(idx, None)
                if idx not in got:
                    entry = decode_entry(data)
                    got[idx] = entry
                    if entry is None and (end is None or idx < end):
                        end = idx
                        for i in [i for i in sent_at if i > end]:
                            del sent_at[i]
        resp = port.step(cycle)
        if resp is not None:
            in_net += [(t + rtt // 2, "resp", resp) for t, _ in down.perturb(cycle, resp)]
        if end is not None and all(i in got for i in range(first, end)):
            break
        cycle += 1
    stats.cycles = cycle
    if end is None:
        raise TimeoutError("log readback did not finish")
    return [got[i] for i in range(first, end)], stats


# -- export / import --

def export_jsonl(entries: Iterable[LogEntry], path) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def load_jsonl(path) -> list[LogEntry]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(LogEntry.from_json(json.loads(line)))
    return out


def check_trace(entries: list[LogEntry]) -> None:
    last = None
    for e in entries:
        if last is not None and e.cycle < last:
            raise TraceError(f"timestamp {e.cycle} at index {e.index} goes backwards from {last}")
        last = e.cycle


# -- logging tiles --

class LoggerTile(PassThrough):
    """Fabric tile that logs every message it forwards, stamped with its header arrival cycle."""

    def __init__(self, log: Optional[RingLog] = None, direction: str = TO_ENGINE,
                 encode: Optional[Callable] = None):
        super().__init__()
        self.log = log or RingLog()
        self.direction = direction
        self.encode = encode or (lambda pkt: pkt.data)

    def process(self, pkt, cycle):
        arrived = self.tile.msgs[0].arrivals[0]
        log_append(self.log, arrived, self.direction, self.encode(pkt), summary={})
        return super().process(pkt, cycle)


def record_tcp_log(trace, capacity: int = 1 << 30) -> RingLog:
    """Turn a TCP simulation's wire records into a log."""
    log = RingLog(capacity)
    for rec in trace:
        log_append(log, rec.cycle, rec.direction, rec.raw)
    return log


# -- replay --

def trace_replay(entries: list[LogEntry], engine, *, until: Optional[int] = None) -> list[LogEntry]:
    """Drive ``engine`` with the to-engine entries at exactly their recorded cycles.

    ``engine`` is a fresh :class:`tilenet.tcp.TcpEngine` with its application
    attached. Returns the engine's emissions in log form.
    """
    check_trace(entries)
    inputs = [e for e in entries if e.direction == TO_ENGINE]
    out = RingLog(1 << 30)
    engine.on_emit = lambda cycle, seg: log_append(out, cycle, FROM_ENGINE, segment_to_ip(seg))
    i = 0
    while True:
        cands = []
        if i < len(inputs):
            cands.append(inputs[i].cycle)
        ev = engine.next_event()
        if ev is not None:
            cands.append(ev)
        if not cands:
            break
        now = max(min(cands), engine.last_cycle + 1)
        if until is not None and now > until:
            break
        while i < len(inputs) and inputs[i].cycle <= now:
            engine.deliver(inputs[i].cycle, segment_from_ip(inputs[i].raw))
            i += 1
        engine.step(now)
    return list(out)


def replay_tcp_trace(entries: list[LogEntry], *, direction: str, data: bytes, seed: int = 0,
                     **server_kw) -> list[LogEntry]:
    """Rebuild the TCP server of a recorded stream run and replay its inputs."""
    from .tcpsim import make_server

    engine, _app = make_server(direction, data, seed=seed, **server_kw)
    return trace_replay(entries, engine)


def emission_log(entries: Iterable[LogEntry]) -> list[tuple[int, bytes]]:
    return [(e.cycle, e.raw) for e in entries if e.direction == FROM_ENGINE]
