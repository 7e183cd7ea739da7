"""Ready-made topologies used by the harness, the CLI and the tests."""

from __future__ import annotations

from typing import Optional

from .noc import Coord
from .packets import ETH_IPV4, IPPROTO_UDP
from .topology import STORE_AND_FORWARD, Chain, TileDecl, TopologyConfig

ECHO_PORT = 7
RS_PORT = 9000
WITNESS_BASE_PORT = 12000


def _t(name, x, y, kind, routes=(), **kw) -> TileDecl:
    if kind == "buffer":
        kw.setdefault("buffering", STORE_AND_FORWARD)
    return TileDecl(name, Coord(x, y), kind, routes=list(routes), **kw)


def _stack_tiles(suffix: str, x0: int, y0: int, app_routes, app_names: list[str],
                 app_kind: str = "app", app_kw: Optional[dict] = None) -> list[TileDecl]:
    s = suffix
    tiles = [
        _t(f"eth_rx{s}", x0, y0, "eth_rx", [(ETH_IPV4, f"ip_rx{s}")]),
        _t(f"ip_rx{s}", x0 + 1, y0, "ip_rx", [(IPPROTO_UDP, f"udp_rx{s}")]),
        _t(f"udp_rx{s}", x0 + 2, y0, "udp_rx", app_routes),
        _t(f"udp_tx{s}", x0 + 2, y0 + 1, "udp_tx", [("default", f"ip_tx{s}")]),
        _t(f"ip_tx{s}", x0 + 1, y0 + 1, "ip_tx", [("default", f"eth_tx{s}")]),
        _t(f"eth_tx{s}", x0, y0 + 1, "eth_tx"),
    ]
    return tiles


def udp_echo_stack(*, app_recovery: int = 0, tile_latency: Optional[int] = None) -> TopologyConfig:
    """Seven-tile UDP echo stack on a 4x2 mesh; (3,1) is filled with an empty router."""
    tiles = _stack_tiles("", 0, 0, [(ECHO_PORT, "app")], ["app"])
    tiles.append(_t("app", 3, 0, "app", [("default", "udp_tx")], recovery=app_recovery))
    if tile_latency is not None:
        for t in tiles:
            t.latency = tile_latency
    chain = Chain("echo", ["eth_rx", "ip_rx", "udp_rx", "app", "udp_tx", "ip_tx", "eth_tx"])
    return TopologyConfig(4, 2, tiles, [chain])


def multi_stack_echo(n_stacks: int = 2, *, lb_recovery: int = 1, app_recovery: int = 0,
                     policy: str = "round_robin") -> TopologyConfig:
    """``n_stacks`` UDP echo stacks behind one load-balancing scheduler tile.

    The scheduler sits at (0,0) and receives frames straight from the wire;
    stack ``k`` occupies rows ``2k`` and ``2k+1``, columns 1..4.
    """
    tiles = []
    chains = []
    rx = []
    for k in range(n_stacks):
        s = f"_{k}"
        tiles += _stack_tiles(s, 1, 2 * k, [(ECHO_PORT, f"app{s}")], [f"app{s}"])
        tiles.append(_t(f"app{s}", 4, 2 * k, "app", [("default", f"udp_tx{s}")],
                        recovery=app_recovery))
        rx.append(f"eth_rx{s}")
        chains.append(Chain(f"echo{s}", ["lb", f"eth_rx{s}", f"ip_rx{s}", f"udp_rx{s}", f"app{s}",
                                         f"udp_tx{s}", f"ip_tx{s}", f"eth_tx{s}"]))
    tiles.append(_t("lb", 0, 0, "scheduler", [("default", tuple(rx))], recovery=lb_recovery,
                    params={"policy": policy}))
    return TopologyConfig(5, 2 * n_stacks, tiles, chains)


def rs_stack(n_replicas: int = 4, *, sched_recovery: int = 1) -> TopologyConfig:
    """UDP stack with a round-robin scheduler fanning requests out to RS encoder tiles.

    Encoders sit on row 2 and buffer whole requests (store-and-forward).
    """
    tiles = _stack_tiles("", 0, 0, [(RS_PORT, "sched")], [])
    tiles.append(_t("sched", 3, 0, "scheduler",
                    [("default", tuple(f"rs{i}" for i in range(n_replicas)))],
                    recovery=sched_recovery))
    for i in range(n_replicas):
        tiles.append(_t(f"rs{i}", i, 2, "app", [("default", "udp_tx")],
                        buffering=STORE_AND_FORWARD))
    chains = [Chain(f"rs{i}", ["eth_rx", "ip_rx", "udp_rx", "sched", f"rs{i}", "udp_tx",
                               "ip_tx", "eth_tx"]) for i in range(n_replicas)]
    return TopologyConfig(max(4, n_replicas), 3, tiles, chains)


def witness_stack(n_shards: int = 4) -> TopologyConfig:
    """UDP stack with one witness tile per shard, routed by destination port."""
    routes = [(WITNESS_BASE_PORT + i, f"witness{i}") for i in range(n_shards)]
    tiles = _stack_tiles("", 0, 0, routes, [])
    for i in range(n_shards):
        tiles.append(_t(f"witness{i}", 2 + i, 2, "app", [("default", "udp_tx")]))
    chains = [Chain(f"vr{i}", ["eth_rx", "ip_rx", "udp_rx", f"witness{i}", "udp_tx", "ip_tx",
                               "eth_tx"]) for i in range(n_shards)]
    return TopologyConfig(max(4, 2 + n_shards), 3, tiles, chains)


def deadlock_example(ordered: bool, with_buffer: bool = False) -> TopologyConfig:
    """The four-tile receive path laid out in one row.

    ``ordered=False`` places UDP before IP (Eth, UDP, IP, App) so the UDP tile
    must route east over a link the Eth->IP worm still holds. ``ordered=True``
    places the tiles in processing order. ``with_buffer`` inserts a
    store-and-forward buffer tile below UDP before the hop to App.
    """
    if ordered:
        tiles = [_t("eth", 0, 0, "eth_rx"), _t("ip", 1, 0, "ip_rx"),
                 _t("udp", 2, 0, "udp_rx"), _t("app", 3, 0, "app")]
    else:
        tiles = [_t("eth", 0, 0, "eth_rx"), _t("udp", 1, 0, "udp_rx"),
                 _t("ip", 2, 0, "ip_rx"), _t("app", 3, 0, "app")]
    order = ["eth", "ip", "udp", "app"]
    height = 1
    if with_buffer:
        tiles.append(_t("buf", 1, 1, "buffer"))
        order = ["eth", "ip", "udp", "buf", "app"]
        height = 2
    return TopologyConfig(4, height, tiles, [Chain("rx", order)])


def nat_gateway() -> TopologyConfig:
    """Ethernet -> NAT -> Ethernet forwarding path with a controller on the control NoC."""
    tiles = [
        _t("eth_rx", 0, 0, "eth_rx", [(ETH_IPV4, "nat")]),
        _t("nat", 1, 0, "nat", [("default", "eth_tx")]),
        _t("eth_tx", 2, 0, "eth_tx"),
        _t("controller", 0, 1, "controller"),
    ]
    chains = [Chain("fwd", ["eth_rx", "nat", "eth_tx"]),
              Chain("ctl", ["controller", "nat"], noc="control")]
    return TopologyConfig(3, 2, tiles, chains, control_noc=True)
