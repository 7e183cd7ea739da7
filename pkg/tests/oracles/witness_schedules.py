"""
Exhaustive schedule explorer for one witness.

Two leaders (view 0 and, after a view change, view 1) send PREPAREs with
different digests for the same op numbers. The network may deliver pending
messages in any order, lose or duplicate them within a budget, and leaders
may retransmit. Every reachable state is visited once.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

from tilenet.apps.witness import Kind, WitnessMsg, WitnessState, new_view, prepare, witness_handle


def digest(leader: int, op: int) -> bytes:
    return hashlib.sha256(f"leader{leader}:op{op}".encode()).digest()


@dataclass
class Exploration:
    states: int = 0
    transitions: int = 0
    acks: set = field(default_factory=set)
    violations: list = field(default_factory=list)
    max_last_op: int = 0


def _wkey(s: WitnessState) -> tuple:
    return (s.view, s.last_op, s.leader_id, tuple(s.op_digests.items()))


def _wstate(key: tuple) -> WitnessState:
    view, last_op, leader, items = key
    return WitnessState(12000, 0, view, last_op, leader, op_digests=OrderedDict(items))


def explore(ops: int = 5, *, losses: int = 1, dups: int = 1, retransmits: int = 1,
            view_change: bool = True, max_net: int = 4, handle=witness_handle) -> Exploration:
    """Depth-first search over every schedule within the budgets.

    ``max_net`` bounds how many messages may be in flight at once so the
    search stays finite; leaders wait when the network is full. ``handle``
    replaces the witness transition function (used to check the explorer
    catches a faulty witness).
    """
    out = Exploration()
    start = (_wkey(WitnessState(12000, 0)), 0, (), 0, None, 0, losses, dups, retransmits,
             frozenset())
    seen = {start}
    stack = [start]

    def check(key, view_start, acks):
        view, last_op, _, items = key
        # ops accepted in the current view run without gaps up to last_op
        accepted = [op for op, _ in items if op > view_start]
        if accepted != list(range(view_start + 1, last_op + 1)):
            out.violations.append(("non_contiguous", key, view_start))
        per_slot: dict = {}
        for v, op, d in acks:
            per_slot.setdefault((v, op), set()).add(d)
        for slot, ds in per_slot.items():
            if len(ds) > 1:
                out.violations.append(("two_digests", slot, ds))

    while stack:
        st = stack.pop()
        out.states += 1
        wk, view_start, net, sent0, nv, sent1, loss_left, dup_left, retx_left, acks = st
        check(wk, view_start, acks)
        out.max_last_op = max(out.max_last_op, wk[1])
        succ = []

        def push(msg: bytes, **kw):
            succ.append(dict(net=tuple(sorted(net + (msg,))), **kw))

        room = len(net) < max_net
        # leader 0 sends the next op of view 0
        if room and sent0 < ops and nv is None:
            push(prepare(0, sent0 + 1, digest(0, sent0 + 1)).pack(), sent0=sent0 + 1)
        # view change: the new view starts after any op leader 0 had sent
        if room and view_change and nv is None:
            for j in range(sent0 + 1):
                push(new_view(1, 1, j).pack(), nv=j, sent1=j)
        # leader 1 sends the next op of view 1
        if room and nv is not None and sent1 < ops:
            push(prepare(1, sent1 + 1, digest(1, sent1 + 1)).pack(), sent1=sent1 + 1)
        # retransmission of anything already sent
        if room and retx_left:
            for op in range(1, sent0 + 1):
                push(prepare(0, op, digest(0, op)).pack(), retx_left=retx_left - 1)
            if nv is not None:
                for op in range(nv + 1, sent1 + 1):
                    push(prepare(1, op, digest(1, op)).pack(), retx_left=retx_left - 1)
        for i, msg in enumerate(net):
            if i and net[i - 1] == msg:
                continue
            rest = net[:i] + net[i + 1:]
            # deliver
            w = _wstate(wk)
            m = WitnessMsg.unpack(msg)
            w2, reply = handle(w, m)
            new_acks = acks
            vs = view_start
            if m.kind == Kind.NEW_VIEW and w2.view != w.view:
                vs = w2.last_op
            if reply is not None and reply.kind == Kind.PREPARE_OK:
                if reply.op_num > w2.last_op:
                    out.violations.append(("ack_beyond_last_op", reply))
                new_acks = acks | {(reply.view, reply.op_num, reply.digest)}
                out.acks |= new_acks
            succ.append(dict(net=rest, wk=_wkey(w2), view_start=vs, acks=new_acks))
            if loss_left:
                succ.append(dict(net=rest, loss_left=loss_left - 1))
            if dup_left and room:
                succ.append(dict(net=tuple(sorted(net + (msg,))), dup_left=dup_left - 1))
        for ch in succ:
            out.transitions += 1
            nxt = (ch.get("wk", wk), ch.get("view_start", view_start), ch["net"],
                   ch.get("sent0", sent0), ch.get("nv", nv), ch.get("sent1", sent1),
                   ch.get("loss_left", loss_left), ch.get("dup_left", dup_left),
                   ch.get("retx_left", retx_left), ch.get("acks", acks))
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return out
