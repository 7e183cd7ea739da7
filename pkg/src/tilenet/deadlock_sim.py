"""
Dynamic deadlock oracle: saturate every chain of a layout with long messages
and watch for the fabric to stop making progress.

Each tile becomes a relay that forwards a message to the next tile of the
chain it belongs to (a tile may appear in several chains, or twice in one).
The last tile of a chain consumes the message.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

from .deadlock import check_topology
from .fabric import Behavior, Fabric, FabricParams, Output
from .noc import Coord
from .topology import STORE_AND_FORWARD, Chain, TileDecl, TopologyConfig


class Relay(Behavior):
    def __init__(self, routes: dict[str, list[str]]):
        self.routes = routes
        self.consumed = 0

    def process(self, pkt, cycle):
        chain = pkt.extra["chain"]
        hop = pkt.extra["hop"] + 1
        path = self.routes[chain]
        if hop >= len(path):
            self.consumed += 1
            return None
        extra = dict(pkt.extra, hop=hop)
        return Output(path[hop], replace(pkt, extra=extra))


@dataclass
class DynamicVerdict:
    deadlocked: bool
    runs: int
    completed: int
    blocked: list = field(default_factory=list)


def _run_once(cfg: TopologyConfig, lines: int, per_chain: int, stagger: int,
              stall_window: int) -> tuple[bool, int, list]:
    chains = [c for c in cfg.chains if c.noc == "data"]
    routes = {c.name: list(c.tiles) for c in chains}
    relays = {t.name: Relay(routes) for t in cfg.tiles if t.kind != "empty"}
    fab = Fabric(cfg, relays, FabricParams(stall_window=stall_window))
    for k, c in enumerate(chains):
        ing = fab.wire_in(c.tiles[0])
        for i in range(per_chain):
            ing.send(bytes(64 * lines), k * stagger + i, tag=i, chain=c.name, hop=0)
    # relays read chain/hop from the packet extras set by WireIngress.send
    fab.run(until=200_000, until_idle=True)
    done = sum(r.consumed for r in relays.values())
    return fab.deadlocked, done, fab.mesh.blocked_worms() if fab.deadlocked else []


def dynamic_deadlock(cfg: TopologyConfig, *, lines: tuple[int, ...] = (48, 96),
                     per_chain: int = 4, staggers: tuple[int, ...] = (0, 7),
                     stall_window: int = 64) -> DynamicVerdict:
    """Saturation runs over a few message lengths and start offsets."""
    completed = 0
    runs = 0
    for n, st in itertools.product(lines, staggers):
        runs += 1
        dead, done, blocked = _run_once(cfg, n, per_chain, st, stall_window)
        completed += done
        if dead:
            return DynamicVerdict(True, runs, completed, blocked)
    return DynamicVerdict(False, runs, completed)


def static_deadlock(cfg: TopologyConfig) -> bool:
    return bool(check_topology(cfg)["data"])


# -- layout library -------------------------------------------------------------

def _t(name, x, y, kind="app", buffering=None) -> TileDecl:
    kw = {"buffering": buffering} if buffering else {}
    return TileDecl(name, Coord(x, y), kind, **kw)


def _chain_layout(order: list[str], coords: list[tuple[int, int]], width: int, height: int,
                  buffered: Optional[str] = None) -> TopologyConfig:
    tiles = []
    for name, (x, y) in zip(order, coords):
        tiles.append(_t(name, x, y, buffering=STORE_AND_FORWARD if name == buffered else None))
    return TopologyConfig(width, height, tiles, [Chain("rx", ["eth", "ip", "udp", "app"])])


def deadlock_library() -> list[tuple[str, TopologyConfig]]:
    """Small layouts used to compare the static checker with the dynamic oracle."""
    lib: list[tuple[str, TopologyConfig]] = []
    names = ["eth", "ip", "udp", "app"]
    row = [(0, 0), (1, 0), (2, 0), (3, 0)]
    square = [(0, 0), (1, 0), (0, 1), (1, 1)]
    for perm in itertools.permutations(range(4)):
        coords = [row[i] for i in perm]
        lib.append((f"row_{''.join(map(str, perm))}", _chain_layout(names, coords, 4, 1)))
    for perm in itertools.permutations(range(4)):
        coords = [square[i] for i in perm]
        lib.append((f"square_{''.join(map(str, perm))}", _chain_layout(names, coords, 2, 2)))
    # the out-of-order row with one tile buffering whole messages
    for b in ("ip", "udp"):
        coords = [row[i] for i in (0, 2, 1, 3)]
        lib.append((f"row_0213_buf_{b}", _chain_layout(names, coords, 4, 1, buffered=b)))

    # two chains that are each acyclic but together close a loop around a 2x2 square
    def ring(*buffered: str) -> TopologyConfig:
        tiles = [_t("a", 0, 0), _t("b", 1, 0), _t("c", 1, 1), _t("d", 0, 1)]
        tiles = [replace(t, buffering=STORE_AND_FORWARD) if t.name in buffered else t
                 for t in tiles]
        return TopologyConfig(2, 2, tiles, [Chain("x", ["a", "b", "c", "d"]),
                                            Chain("y", ["c", "d", "a", "b"])])

    lib.append(("ring_two_chains", ring()))
    lib.append(("ring_two_chains_buf_b", ring("b")))
    lib.append(("ring_two_chains_buf_b_d", ring("b", "d")))
    # the same pair of chains on their own
    one = ring()
    lib.append(("ring_chain_x_only", TopologyConfig(2, 2, one.tiles, [one.chains[0]])))
    lib.append(("ring_chain_y_only", TopologyConfig(2, 2, one.tiles, [one.chains[1]])))

    # a chain that passes through IP twice (tunnelled traffic), shared vs duplicated IP tile
    shared = TopologyConfig(4, 1, [_t("eth", 0, 0), _t("ip", 1, 0), _t("tun", 2, 0),
                                   _t("app", 3, 0)],
                            [Chain("tunnel", ["eth", "ip", "tun", "ip", "app"])])
    dup = TopologyConfig(5, 1, [_t("eth", 0, 0), _t("ip", 1, 0), _t("tun", 2, 0),
                                _t("ip2", 3, 0), _t("app", 4, 0)],
                         [Chain("tunnel", ["eth", "ip", "tun", "ip2", "app"])])
    lib.append(("tunnel_shared_ip", shared))
    lib.append(("tunnel_duplicated_ip", dup))
    return lib
