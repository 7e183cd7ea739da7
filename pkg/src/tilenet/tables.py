"""Next-hop tables used by tiles to pick the following tile in a chain."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .packets import FlowKey

DROP = "DROP"
DEFAULT_KEY = "default"

Key = Union[int, str]


def flow_hash(key: FlowKey, seed: int = 0) -> int:
    """64-bit keyed BLAKE2b over the packed 4-tuple (src_ip, dst_ip, src_port, dst_port)."""
    h = hashlib.blake2b(key.pack(), digest_size=8, key=seed.to_bytes(8, "big"))
    return int.from_bytes(h.digest(), "big")


def flow_hash_select(key: FlowKey, group: Sequence[str], seed: int = 0) -> str:
    if not group:
        raise ValueError("replica group is empty")
    return group[flow_hash(key, seed) % len(group)]


@dataclass
class NextHopTable:
    """Exact-match table from a header field value to a tile name.

    A value may be a single tile or a replica group; groups are resolved by
    flow hash so a flow always lands on the same replica.
    """

    entries: dict[Key, Union[str, tuple[str, ...]]] = field(default_factory=dict)
    hash_seed: int = 0
    generation: int = 0

    def set(self, key: Key, dest: Union[str, Sequence[str]]) -> None:
        if not isinstance(dest, str):
            dest = tuple(dest)
            if not dest:
                raise ValueError("replica group is empty")
        self.entries[key] = dest
        self.generation += 1

    def remove(self, key: Key) -> None:
        self.entries.pop(key, None)
        self.generation += 1

    def lookup(self, key: Optional[Key], flow: Optional[FlowKey] = None) -> str:
        dest = self.entries.get(key) if key is not None else None
        if dest is None:
            dest = self.entries.get(DEFAULT_KEY)
        if dest is None:
            return DROP
        if isinstance(dest, tuple):
            if flow is None:
                return dest[0]
            return flow_hash_select(flow, dest, self.hash_seed)
        return dest


def next_hop_lookup(table: NextHopTable, key: Optional[Key], flow: Optional[FlowKey] = None) -> str:
    return table.lookup(key, flow)
