"""
Static message-level deadlock analysis.

Each chain is turned into the ordered list of mesh links its worms acquire,
including the local ejection port of every tile reached. A tile has a single
input port, so a worm keeps that port until its tail is taken in, and a
streaming chain head holds its own port while the wire feeds it. A streaming
tile keeps its incoming worm's resources while acquiring outgoing ones, so
every earlier resource in a streaming span depends on every later one. A
store-and-forward tile absorbs the whole message and cuts the span.

The analysis assumes arbitrarily long messages; a cycle therefore means the
layout *can* deadlock, not that every workload will.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx

from .noc import Link, link_sequence
from .topology import STORE_AND_FORWARD, Chain, TopologyConfig, TopologyError


@dataclass
class DependencyGraph:
    graph: nx.DiGraph = field(default_factory=nx.DiGraph)

    @property
    def nodes(self) -> list[Link]:
        return sorted(self.graph.nodes)

    @property
    def edges(self) -> list[tuple[Link, Link, frozenset[str]]]:
        return sorted((a, b, frozenset(d["chains"])) for a, b, d in self.graph.edges(data=True))

    def add_dependency(self, a: Link, b: Link, chain: str) -> None:
        if self.graph.has_edge(a, b):
            self.graph[a][b]["chains"].add(chain)
        else:
            self.graph.add_edge(a, b, chains={chain})


@dataclass
class DeadlockCycle:
    links: list[Link]  # one concrete loop, in dependency order
    component: list[Link]  # every link of the strongly connected component
    chains: dict[tuple[Link, Link], list[str]]

    def describe(self) -> str:
        loop = " -> ".join(str(l) for l in self.links + self.links[:1])
        via = sorted({c for cs in self.chains.values() for c in cs})
        return f"{loop}  [chains: {', '.join(via)}]"


def chain_spans(cfg: TopologyConfig, chain: Chain) -> list[list[Link]]:
    """Split a chain's link acquisition sequence into streaming spans."""
    tiles = cfg.by_name()
    head = tiles[chain.tiles[0]]
    spans: list[list[Link]] = [[]]
    if head.buffering != STORE_AND_FORWARD:
        spans[0].append(Link(head.coord, head.coord))
    for i, (a, b) in enumerate(zip(chain.tiles, chain.tiles[1:])):
        ta, tb = tiles[a], tiles[b]
        if i > 0 and ta.buffering == STORE_AND_FORWARD and spans[-1]:
            spans.append([])
        spans[-1].extend(link_sequence(ta.coord, tb.coord))
        spans[-1].append(Link(tb.coord, tb.coord))
    return [s for s in spans if s]


def build_dependency_graph(cfg: TopologyConfig, noc: str = "data") -> DependencyGraph:
    g = DependencyGraph()
    for chain in cfg.chains:
        if chain.noc != noc:
            continue
        if len(chain.tiles) < 2:
            raise TopologyError(f"chain {chain.name!r} has fewer than 2 tiles")
        for span in chain_spans(cfg, chain):
            for link in span:
                g.graph.add_node(link)
            for i, a in enumerate(span):
                for b in span[i + 1:]:
                    g.add_dependency(a, b, chain.name)
    return g


def detect_deadlock(g: DependencyGraph) -> list[DeadlockCycle]:
    cycles = []
    for comp in nx.strongly_connected_components(g.graph):
        sub = g.graph.subgraph(comp)
        if sub.number_of_edges() == 0:
            continue
        start = min(comp)
        loop = [a for a, _ in nx.find_cycle(sub, source=start)]
        chains = {(a, b): sorted(d["chains"]) for a, b, d in sub.edges(data=True)}
        cycles.append(DeadlockCycle(loop, sorted(comp), chains))
    cycles.sort(key=lambda c: c.component)
    return cycles


def check_topology(cfg: TopologyConfig) -> dict[str, list[DeadlockCycle]]:
    """Deadlock check of each NoC in the design; the control NoC is analysed on its own."""
    out = {"data": detect_deadlock(build_dependency_graph(cfg, "data"))}
    if cfg.control_noc:
        out["control"] = detect_deadlock(build_dependency_graph(cfg, "control"))
    return out
