"""
Flit-level model of a 2D-mesh wormhole NoC.

Routers have one bounded input FIFO per port and forward at most one flit per
output per cycle. A header flit claims an idle output chosen by XY routing and
the worm owns that output until its tail flit leaves. Competing headers are
arbitrated by fixed port priority N > E > S > W > LOCAL.

Coordinates: x grows eastward, y grows southward.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Protocol


FLIT_BITS = 512
MAX_PAYLOAD = 256 * 1024 * 1024
DEFAULT_CLOCK_HZ = 250_000_000

# routing word: dst.x, dst.y, src.x, src.y (8 bits each), body_flit_count (32)
_ROUTE = struct.Struct(">BBBBI")
# rest of the header flit: payload_len, metadata byte length, message id
_HDR_EXTRA = struct.Struct(">IHQ")
# narrow NoCs carry the lengths in a dedicated first body flit instead
_HDR_NARROW = struct.Struct(">IHH")


class Direction(Enum):
    N = "N"
    E = "E"
    S = "S"
    W = "W"
    LOCAL = "L"

    @property
    def opposite(self) -> "Direction":
        return _OPPOSITE[self]


_OPPOSITE = {
    Direction.N: Direction.S,
    Direction.S: Direction.N,
    Direction.E: Direction.W,
    Direction.W: Direction.E,
    Direction.LOCAL: Direction.LOCAL,
}
_STEP = {
    Direction.N: (0, -1),
    Direction.S: (0, 1),
    Direction.E: (1, 0),
    Direction.W: (-1, 0),
}

# arbitration order, highest priority first
PORT_PRIORITY = (Direction.N, Direction.E, Direction.S, Direction.W, Direction.LOCAL)


@dataclass(frozen=True, order=True)
class Coord:
    x: int
    y: int

    def step(self, d: Direction) -> "Coord":
        dx, dy = _STEP[d]
        return Coord(self.x + dx, self.y + dy)

    def __str__(self) -> str:
        return f"{self.x},{self.y}"


@dataclass(frozen=True, order=True)
class Link:
    """Unidirectional link between two mesh-adjacent routers.

    A link with src == dst is the router's local ejection port into its tile.
    """

    src: Coord
    dst: Coord

    @property
    def direction(self) -> Direction:
        if self.src == self.dst:
            return Direction.LOCAL
        dx, dy = self.dst.x - self.src.x, self.dst.y - self.src.y
        for d, step in _STEP.items():
            if step == (dx, dy):
                return d
        raise ValueError(f"{self.src} and {self.dst} are not adjacent")

    def __str__(self) -> str:
        if self.src == self.dst:
            return f"L({self.src})"
        return f"{self.direction.value}({self.src}->{self.dst})"


def xy_route_next(cur: Coord, dst: Coord) -> Direction:
    if cur.x < dst.x:
        return Direction.E
    if cur.x > dst.x:
        return Direction.W
    if cur.y < dst.y:
        return Direction.S
    if cur.y > dst.y:
        return Direction.N
    return Direction.LOCAL


def link_sequence(src: Coord, dst: Coord) -> list[Link]:
    """Links acquired, in order, by a worm travelling from src to dst."""
    links = []
    x, y = src.x, src.y
    step = 1 if dst.x > x else -1
    while x != dst.x:
        links.append(Link(Coord(x, y), Coord(x + step, y)))
        x += step
    step = 1 if dst.y > y else -1
    while y != dst.y:
        links.append(Link(Coord(x, y), Coord(x, y + step)))
        y += step
    return links


class MessageError(ValueError):
    pass


@dataclass
class Flit:
    kind: str  # "header" | "body"
    word: bytes
    msg_id: int = 0
    seq: int = 0
    is_tail: bool = False
    dst: Optional[Coord] = None
    src: Optional[Coord] = None
    body_flit_count: int = 0
    # simulator side-channel: the message this flit belongs to
    msg: Any = field(default=None, repr=False, compare=False)

    @property
    def is_header(self) -> bool:
        return self.kind == "header"


@dataclass
class NocMessage:
    dst: Coord
    src: Coord
    metadata: bytes = b""
    payload: bytes = b""
    msg_id: int = 0

    def meta_flits(self, flit_bytes: int = FLIT_BITS // 8) -> int:
        return -(-len(self.metadata) // flit_bytes)

    def data_flits(self, flit_bytes: int = FLIT_BITS // 8) -> int:
        return -(-len(self.payload) // flit_bytes)

    def body_flit_count(self, flit_bytes: int = FLIT_BITS // 8) -> int:
        return self.meta_flits(flit_bytes) + self.data_flits(flit_bytes)


def _chunks(data: bytes, size: int) -> list[bytes]:
    return [data[i:i + size].ljust(size, b"\x00") for i in range(0, len(data), size)]


def encode_message(
    dst: Coord,
    src: Coord,
    metadata: bytes = b"",
    payload: bytes = b"",
    *,
    msg_id: int = 0,
    flit_bits: int = FLIT_BITS,
) -> list[Flit]:
    if len(payload) > MAX_PAYLOAD:
        raise MessageError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    fb = flit_bits // 8
    meta = _chunks(metadata, fb)
    data = _chunks(payload, fb)
    body = len(meta) + len(data)
    head = _ROUTE.pack(dst.x, dst.y, src.x, src.y, body)
    if fb >= _ROUTE.size + _HDR_EXTRA.size:
        head += _HDR_EXTRA.pack(len(payload), len(metadata), msg_id & (2**64 - 1))
        extra_flit = []
    else:
        # narrow NoC: the lengths travel in one extra body flit right after the header
        if _HDR_NARROW.size > fb:
            raise MessageError("flit too narrow for the message header")
        extra_flit = [_HDR_NARROW.pack(len(payload), len(metadata), msg_id & 0xFFFF).ljust(fb, b"\x00")]
        body += 1
        head = _ROUTE.pack(dst.x, dst.y, src.x, src.y, body)
    flits = [Flit("header", head.ljust(fb, b"\x00"), msg_id, 0, body == 0, dst, src, body)]
    for i, word in enumerate(extra_flit + meta + data, start=1):
        flits.append(Flit("body", word, msg_id, i, i == body))
    return flits


def decode_message(flits: list[Flit], *, flit_bits: int = FLIT_BITS) -> NocMessage:
    fb = flit_bits // 8
    if not flits or not flits[0].is_header:
        raise MessageError("worm does not start with a header flit")
    dx, dy, sx, sy, body = _ROUTE.unpack_from(flits[0].word)
    rest = flits[1:]
    if len(rest) != body:
        raise MessageError(f"header claims {body} body flits, got {len(rest)}")
    if any(f.is_header for f in rest):
        raise MessageError("header flit inside worm body")
    if fb >= _ROUTE.size + _HDR_EXTRA.size:
        plen, mlen, mid = _HDR_EXTRA.unpack_from(flits[0].word, _ROUTE.size)
    else:
        if not rest:
            raise MessageError("missing length flit")
        plen, mlen, mid = _HDR_NARROW.unpack_from(rest[0].word)
        rest = rest[1:]
    n_meta = -(-mlen // fb)
    n_data = -(-plen // fb)
    if n_meta + n_data != len(rest):
        raise MessageError("body flit count does not match encoded lengths")
    meta = b"".join(f.word for f in rest[:n_meta])[:mlen]
    data = b"".join(f.word for f in rest[n_meta:])[:plen]
    return NocMessage(Coord(dx, dy), Coord(sx, sy), meta, data, mid)


class Endpoint(Protocol):
    """What a router's LOCAL output port delivers into."""

    def can_accept(self) -> bool: ...

    def accept(self, flit: Flit, cycle: int) -> None: ...


class Router:
    def __init__(self, coord: Coord, depth: int):
        self.coord = coord
        self.depth = depth
        # entries are (ready_cycle, flit)
        self.inputs: dict[Direction, deque] = {d: deque() for d in Direction}
        self.owner: dict[Direction, Optional[Direction]] = {d: None for d in Direction}
        # output port held by the worm currently at the head of each input
        self.bound: dict[Direction, Optional[Direction]] = {d: None for d in Direction}

    def occupancy(self) -> int:
        return sum(len(q) for q in self.inputs.values())


class Mesh:
    """A rectangular mesh of routers advanced one cycle at a time."""

    def __init__(
        self,
        width: int,
        height: int,
        *,
        fifo_depth: int = 4,
        hop_latency: int = 1,
        flit_bits: int = FLIT_BITS,
        trace: bool = False,
        name: str = "data",
    ):
        if fifo_depth < 1 or hop_latency < 1:
            raise ValueError("fifo_depth and hop_latency must be >= 1")
        self.width = width
        self.height = height
        self.fifo_depth = fifo_depth
        self.hop_latency = hop_latency
        self.flit_bits = flit_bits
        self.name = name
        self.routers = {
            Coord(x, y): Router(Coord(x, y), fifo_depth)
            for y in range(height)
            for x in range(width)
        }
        self.endpoints: dict[Coord, Endpoint] = {}
        self.cycle = 0
        self.moves_last_cycle = 0
        self.link_flits: dict[Link, int] = {}
        self.trace_enabled = trace
        self.trace: list[dict] = []
        # injected messages by the ``noc_class`` of their content ("data" if unset)
        self.injected_classes: dict[str, int] = {}
        self._active: set[Coord] = set()

    def contains(self, c: Coord) -> bool:
        return 0 <= c.x < self.width and 0 <= c.y < self.height

    def attach(self, coord: Coord, endpoint: Endpoint) -> None:
        self.endpoints[coord] = endpoint

    def can_inject(self, coord: Coord) -> bool:
        return len(self.routers[coord].inputs[Direction.LOCAL]) < self.fifo_depth

    def inject(self, coord: Coord, flit: Flit) -> None:
        q = self.routers[coord].inputs[Direction.LOCAL]
        if len(q) >= self.fifo_depth:
            raise RuntimeError(f"LOCAL input of {coord} is full")
        q.append((self.cycle + self.hop_latency, flit))
        self._active.add(coord)
        if flit.is_header:
            cls = getattr(flit.msg, "noc_class", "data")
            self.injected_classes[cls] = self.injected_classes.get(cls, 0) + 1

    def in_flight(self) -> int:
        return sum(self.routers[c].occupancy() for c in self._active)

    def step(self) -> int:
        """Advance one cycle; returns the number of flits moved."""
        cycle = self.cycle
        moves = []
        for coord in sorted(self._active):
            r = self.routers[coord]
            busy_inputs = set()
            for out in PORT_PRIORITY:
                src_port = r.owner[out]
                if src_port is None:
                    for inp in PORT_PRIORITY:
                        if inp in busy_inputs or r.bound[inp] is not None:
                            continue
                        q = r.inputs[inp]
                        if not q:
                            continue
                        ready, flit = q[0]
                        if ready > cycle or not flit.is_header:
                            continue
                        if xy_route_next(coord, flit.dst) is out:
                            src_port = inp
                            break
                    if src_port is None:
                        continue
                q = r.inputs[src_port]
                if not q or q[0][0] > cycle:
                    continue
                if out is Direction.LOCAL:
                    ep = self.endpoints.get(coord)
                    if ep is None:
                        raise RuntimeError(f"no endpoint attached at {coord}")
                    if not ep.can_accept():
                        continue
                else:
                    nxt = coord.step(out)
                    if len(self.routers[nxt].inputs[out.opposite]) >= self.fifo_depth:
                        continue
                busy_inputs.add(src_port)
                moves.append((coord, src_port, out))
        for coord, inp, out in moves:
            r = self.routers[coord]
            _, flit = r.inputs[inp].popleft()
            if flit.is_header:
                r.owner[out] = inp
                r.bound[inp] = out
            if flit.is_tail:
                r.owner[out] = None
                r.bound[inp] = None
            if out is Direction.LOCAL:
                self.endpoints[coord].accept(flit, cycle)
                if self.trace_enabled:
                    self.trace.append({
                        "cycle": cycle,
                        "eject": str(coord),
                        "kind": flit.kind,
                        "msg_id": flit.msg_id,
                        "seq": flit.seq,
                    })
            else:
                nxt = coord.step(out)
                self.routers[nxt].inputs[out.opposite].append((cycle + self.hop_latency, flit))
                self._active.add(nxt)
                link = Link(coord, nxt)
                self.link_flits[link] = self.link_flits.get(link, 0) + 1
                if self.trace_enabled:
                    self.trace.append({
                        "cycle": cycle,
                        "link": str(link),
                        "kind": flit.kind,
                        "msg_id": flit.msg_id,
                        "seq": flit.seq,
                    })
        self._active = {c for c in self._active if self.routers[c].occupancy()}
        self.cycle += 1
        self.moves_last_cycle = len(moves)
        return len(moves)

    def blocked_worms(self) -> list[dict]:
        """Diagnostic dump of every flit still sitting in a router."""
        out = []
        for coord in sorted(self._active):
            r = self.routers[coord]
            for d, q in r.inputs.items():
                if q:
                    _, f = q[0]
                    out.append({
                        "router": str(coord),
                        "input": d.value,
                        "queued": len(q),
                        "head_msg": f.msg_id,
                        "head_kind": f.kind,
                        "bound_to": r.bound[d].value if r.bound[d] else None,
                    })
        return out

    def export_trace(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")


def mesh_link_count(width: int, height: int) -> int:
    return 2 * (width * (height - 1) + height * (width - 1))


def goodput_gbps(payload_bytes: int, cycles: float, clock_hz: float = DEFAULT_CLOCK_HZ) -> float:
    return payload_bytes * 8 * clock_hz / cycles / 1e9
