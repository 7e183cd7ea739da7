"""Viewstamped Replication witness for one shard.

The witness checks that prepares come from the current view and records the
order of operations by digest; it never executes client operations.

Wire format (big endian, 47 bytes, unused fields zero)::

    kind u8 | view u32 | op_num u64 | node u16 | digest 32 bytes

``node`` is the witness id in PREPARE_OK and the leader id in NEW_VIEW.
PREPARE_OK echoes the digest it acknowledges.
``op_num`` carries ``last_op`` in NEW_VIEW.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

from ..fabric import Behavior, Output
from ..packets import Drop
from ..tables import DROP, NextHopTable

_FMT = struct.Struct(">BIQH32s")
MSG_SIZE = _FMT.size
DIGEST_SIZE = 32
DEFAULT_LOG_CAPACITY = 1024


class Kind(IntEnum):
    PREPARE = 1
    PREPARE_OK = 2
    NEW_VIEW = 3
    REJECT = 4


class MalformedMessage(ValueError):
    pass


@dataclass(frozen=True)
class WitnessMsg:
    kind: Kind
    view: int
    op_num: int = 0
    node: int = 0
    digest: bytes = bytes(DIGEST_SIZE)

    def pack(self) -> bytes:
        return _FMT.pack(self.kind, self.view, self.op_num, self.node, self.digest)

    @classmethod
    def unpack(cls, data: bytes) -> "WitnessMsg":
        if len(data) != MSG_SIZE:
            raise MalformedMessage(f"expected {MSG_SIZE} bytes, got {len(data)}")
        kind, view, op, node, digest = _FMT.unpack(data)
        try:
            kind = Kind(kind)
        except ValueError as exc:
            raise MalformedMessage(f"unknown kind {kind}") from exc
        return cls(kind, view, op, node, digest)

    @property
    def last_op(self) -> int:
        return self.op_num


def prepare(view: int, op_num: int, digest: bytes) -> WitnessMsg:
    return WitnessMsg(Kind.PREPARE, view, op_num, 0, digest)


def prepare_ok(view: int, op_num: int, witness_id: int, digest: bytes = bytes(DIGEST_SIZE)) -> WitnessMsg:
    return WitnessMsg(Kind.PREPARE_OK, view, op_num, witness_id, digest)


def new_view(view: int, leader_id: int, last_op: int) -> WitnessMsg:
    return WitnessMsg(Kind.NEW_VIEW, view, last_op, leader_id)


def reject(view: int) -> WitnessMsg:
    return WitnessMsg(Kind.REJECT, view)


def op_digest(op: bytes) -> bytes:
    return hashlib.sha256(op).digest()


@dataclass
class WitnessState:
    shard_port: int
    witness_id: int = 0
    view: int = 0
    last_op: int = 0
    leader_id: int = 0
    log_capacity: int = DEFAULT_LOG_CAPACITY
    # op_num -> digest, oldest first
    op_digests: OrderedDict = field(default_factory=OrderedDict)

    def copy(self) -> "WitnessState":
        return WitnessState(self.shard_port, self.witness_id, self.view, self.last_op,
                            self.leader_id, self.log_capacity, OrderedDict(self.op_digests))

    def record(self, op_num: int, digest: bytes) -> None:
        self.op_digests[op_num] = digest
        while len(self.op_digests) > self.log_capacity:
            self.op_digests.popitem(last=False)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack(">HHIQH", self.shard_port, self.witness_id, self.view,
                             self.last_op, self.leader_id))
        for op, d in self.op_digests.items():
            h.update(struct.pack(">Q", op) + d)
        return h.hexdigest()


def witness_handle(state: WitnessState, msg: WitnessMsg) -> tuple[WitnessState, Optional[WitnessMsg]]:
    """Apply one message; returns the new state and the reply, if any.

    The input state is not modified.
    """
    s = state.copy()
    if msg.kind == Kind.PREPARE:
        if msg.view < s.view:
            return s, reject(s.view)
        if msg.view > s.view:
            # wait for NEW_VIEW before accepting anything from a later view
            return s, None
        if msg.op_num == s.last_op + 1:
            s.record(msg.op_num, msg.digest)
            s.last_op += 1
            return s, prepare_ok(s.view, msg.op_num, s.witness_id, msg.digest)
        if 0 < msg.op_num <= s.last_op:
            if s.op_digests.get(msg.op_num) == msg.digest:
                return s, prepare_ok(s.view, msg.op_num, s.witness_id, msg.digest)
            # unknown or conflicting digest: never acknowledge
            return s, None
        return s, None
    if msg.kind == Kind.NEW_VIEW:
        if msg.view > s.view:
            s.view = msg.view
            s.leader_id = msg.node
            s.last_op = msg.last_op
            for op in [o for o in s.op_digests if o > s.last_op]:
                del s.op_digests[op]
        return s, None
    # PREPARE_OK and REJECT are never addressed to a witness
    return s, None


def shard_table(ports: dict[int, str]) -> NextHopTable:
    t = NextHopTable()
    for port, tile in ports.items():
        t.set(port, tile)
    return t


def shard_route(dst_port: int, table: NextHopTable) -> str:
    """Witness tile for a destination port; unknown ports map to DROP."""
    dest = table.entries.get(dst_port)
    return dest if isinstance(dest, str) else DROP


class WitnessTile(Behavior):
    """Tile wrapper: parses the UDP payload and replies through the default next hop."""

    def __init__(self, state: WitnessState):
        self.state = state
        self.acks: list[WitnessMsg] = []

    def process(self, pkt, cycle):
        try:
            msg = WitnessMsg.unpack(pkt.data)
        except MalformedMessage:
            raise Drop("malformed_witness_msg")
        if pkt.meta is not None and pkt.meta.dst_port != self.state.shard_port:
            raise Drop("wrong_shard")
        self.state, reply = witness_handle(self.state, msg)
        if reply is None:
            raise Drop("no_reply")
        if reply.kind == Kind.PREPARE_OK:
            self.acks.append(reply)
        meta = pkt.meta.reply() if pkt.meta is not None else None
        return Output(self.tile.table.lookup("default"), replace(pkt, data=reply.pack(), meta=meta))
