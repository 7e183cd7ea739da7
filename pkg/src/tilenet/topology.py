"""
Tile topology configuration: parsing (XML canonical, JSON accepted),
validation and generation of the router wiring plan.

XML layout::

    <design width="4" height="2" hash_seed="0" control_noc="true">
      <tile name="eth_rx" x="0" y="0" kind="eth_rx" latency="2">
        <route key="0x0800" dest="ip_rx"/>
        <route key="7" group="app0 app1"/>
        <param name="service" value="8"/>
      </tile>
      <chain name="rx">eth_rx ip_rx udp_rx app</chain>
      <chain name="ctl" noc="control">controller nat</chain>
    </design>

``buffering`` is ``streaming`` (default) or ``store_and_forward`` (default for
``buffer`` tiles). Route keys are integers (hex allowed) or ``default``.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Union

from .noc import Coord, Direction, Link, mesh_link_count

TILE_KINDS = frozenset({
    "eth_rx", "eth_tx", "ip_rx", "ip_tx", "udp_rx", "udp_tx", "tcp_rx", "tcp_tx",
    "buffer", "nat", "ipinip", "app", "scheduler", "logger", "controller", "empty",
})
STREAMING = "streaming"
STORE_AND_FORWARD = "store_and_forward"


class TopologyError(ValueError):
    pass


@dataclass
class TileDecl:
    name: str
    coord: Coord
    kind: str
    routes: list[tuple[Union[int, str], Union[str, tuple[str, ...]]]] = field(default_factory=list)
    buffering: str = STREAMING
    latency: Optional[int] = None
    recovery: int = 0
    params: dict[str, str] = field(default_factory=dict)
    generated: bool = False

    def destinations(self) -> set[str]:
        out: set[str] = set()
        for _, dest in self.routes:
            out.update((dest,) if isinstance(dest, str) else dest)
        return out


@dataclass
class Chain:
    name: str
    tiles: list[str]
    noc: str = "data"


@dataclass
class TopologyConfig:
    width: int
    height: int
    tiles: list[TileDecl]
    chains: list[Chain] = field(default_factory=list)
    control_noc: bool = False
    hash_seed: int = 0

    def tile(self, name: str) -> TileDecl:
        for t in self.tiles:
            if t.name == name:
                return t
        raise KeyError(name)

    def by_name(self) -> dict[str, TileDecl]:
        return {t.name: t for t in self.tiles}

    def by_coord(self) -> dict[Coord, TileDecl]:
        return {t.coord: t for t in self.tiles}

    def data_chains(self) -> list[Chain]:
        return [c for c in self.chains if c.noc == "data"]

    def control_chains(self) -> list[Chain]:
        return [c for c in self.chains if c.noc == "control"]


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.code}: {self.message}"


def _parse_key(raw: str) -> Union[int, str]:
    raw = raw.strip()
    if raw == "default":
        return raw
    try:
        return int(raw, 0)
    except ValueError:
        raise TopologyError(f"route key {raw!r} is neither an integer nor 'default'") from None


def _require(el: ET.Element, attr: str) -> str:
    val = el.get(attr)
    if val is None:
        raise TopologyError(f"<{el.tag}> is missing mandatory attribute {attr!r}")
    return val


def _int(el: ET.Element, attr: str, default: Optional[int] = None) -> int:
    raw = el.get(attr)
    if raw is None:
        if default is None:
            raise TopologyError(f"<{el.tag}> is missing mandatory attribute {attr!r}")
        return default
    try:
        return int(raw, 0)
    except ValueError:
        raise TopologyError(f"<{el.tag}> attribute {attr}={raw!r} is not an integer") from None


def _tile(name: str, x: int, y: int, kind: str, **kw) -> TileDecl:
    if kind not in TILE_KINDS:
        raise TopologyError(f"tile {name!r}: unknown tile kind {kind!r}")
    buffering = kw.pop("buffering", None) or (STORE_AND_FORWARD if kind == "buffer" else STREAMING)
    if buffering not in (STREAMING, STORE_AND_FORWARD):
        raise TopologyError(f"tile {name!r}: unknown buffering {buffering!r}")
    return TileDecl(name, Coord(x, y), kind, buffering=buffering, **kw)


def _from_xml(text: str) -> TopologyConfig:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise TopologyError(f"XML syntax error at line {line}, column {col}: {exc}") from None
    if root.tag != "design":
        raise TopologyError(f"root element must be <design>, got <{root.tag}>")
    tiles = []
    for el in root.findall("tile"):
        routes = []
        for r in el.findall("route"):
            key = _parse_key(_require(r, "key"))
            if r.get("group") is not None:
                routes.append((key, tuple(r.get("group").replace(",", " ").split())))
            else:
                routes.append((key, _require(r, "dest")))
        params = {p.get("name"): p.get("value") for p in el.findall("param")}
        lat = el.get("latency")
        tiles.append(_tile(
            _require(el, "name"), _int(el, "x"), _int(el, "y"), _require(el, "kind"),
            routes=routes, buffering=el.get("buffering"),
            latency=int(lat) if lat is not None else None,
            recovery=_int(el, "recovery", 0), params=params,
        ))
    chains = [
        Chain(c.get("name") or f"chain{i}", (c.text or "").split(), c.get("noc", "data"))
        for i, c in enumerate(root.findall("chain"))
    ]
    return TopologyConfig(
        _int(root, "width"), _int(root, "height"), tiles, chains,
        root.get("control_noc", "false").lower() == "true", _int(root, "hash_seed", 0),
    )


def _from_json(text: str) -> TopologyConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(f"JSON syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    for k in ("width", "height", "tiles"):
        if k not in doc:
            raise TopologyError(f"missing mandatory field {k!r}")
    tiles = []
    for t in doc["tiles"]:
        for k in ("name", "x", "y", "kind"):
            if k not in t:
                raise TopologyError(f"tile is missing mandatory field {k!r}")
        routes = []
        for r in t.get("routes", []):
            key = _parse_key(str(r["key"]))
            routes.append((key, tuple(r["group"]) if "group" in r else r["dest"]))
        tiles.append(_tile(
            t["name"], int(t["x"]), int(t["y"]), t["kind"], routes=routes,
            buffering=t.get("buffering"), latency=t.get("latency"),
            recovery=int(t.get("recovery", 0)),
            params={k: str(v) for k, v in t.get("params", {}).items()},
        ))
    chains = [
        Chain(c.get("name", f"chain{i}"), list(c["tiles"]), c.get("noc", "data"))
        for i, c in enumerate(doc.get("chains", []))
    ]
    return TopologyConfig(int(doc["width"]), int(doc["height"]), tiles, chains,
                          bool(doc.get("control_noc", False)), int(doc.get("hash_seed", 0)))


def parse_topology(text: str, *, strict: bool = True, fill: bool = True) -> TopologyConfig:
    """Parse XML (or JSON, detected by a leading ``{``) into a config.

    With ``strict`` any error diagnostic raises :class:`TopologyError`.
    With ``fill`` the rectangle is completed with router-only empty tiles.
    """
    cfg = _from_json(text) if text.lstrip().startswith("{") else _from_xml(text)
    errors = [d for d in validate_topology(cfg) if d.severity == "error"]
    if strict and errors:
        raise TopologyError("; ".join(str(d) for d in errors))
    if fill and not errors:
        cfg = fill_empty_tiles(cfg)
    return cfg


def load_topology(path, **kw) -> TopologyConfig:
    with open(path) as fh:
        return parse_topology(fh.read(), **kw)


def fill_empty_tiles(cfg: TopologyConfig) -> TopologyConfig:
    taken = {t.coord for t in cfg.tiles}
    tiles = list(cfg.tiles)
    for y in range(cfg.height):
        for x in range(cfg.width):
            if Coord(x, y) not in taken:
                tiles.append(TileDecl(f"empty_{x}_{y}", Coord(x, y), "empty", generated=True))
    return TopologyConfig(cfg.width, cfg.height, tiles, cfg.chains, cfg.control_noc, cfg.hash_seed)


def validate_topology(cfg: TopologyConfig) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    if cfg.width < 1 or cfg.height < 1:
        diags.append(Diagnostic("error", "bad_dimensions", f"{cfg.width}x{cfg.height}"))
    names: dict[str, TileDecl] = {}
    coords: dict[Coord, str] = {}
    for t in cfg.tiles:
        if t.name in names:
            diags.append(Diagnostic("error", "duplicate_name", f"tile name {t.name!r} declared twice"))
        names[t.name] = t
        if not (0 <= t.coord.x < cfg.width and 0 <= t.coord.y < cfg.height):
            diags.append(Diagnostic(
                "error", "out_of_bounds",
                f"tile {t.name!r} at ({t.coord}) outside {cfg.width}x{cfg.height} mesh"))
        elif t.coord in coords:
            diags.append(Diagnostic(
                "error", "duplicate_coord",
                f"tiles {coords[t.coord]!r} and {t.name!r} share coordinates ({t.coord})"))
        else:
            coords[t.coord] = t.name
    if len(coords) > cfg.width * cfg.height:
        diags.append(Diagnostic("error", "overfull", "more tiles than mesh positions"))
    for t in cfg.tiles:
        for dest in sorted(t.destinations()):
            if dest not in names:
                diags.append(Diagnostic(
                    "error", "unresolved_name", f"tile {t.name!r} routes to undeclared tile {dest!r}"))
        keys = [k for k, _ in t.routes]
        if len(keys) != len(set(keys)):
            diags.append(Diagnostic("error", "duplicate_route", f"tile {t.name!r} has duplicate route keys"))
    for c in cfg.chains:
        if c.noc not in ("data", "control"):
            diags.append(Diagnostic("error", "bad_noc", f"chain {c.name!r} on unknown NoC {c.noc!r}"))
        for n in c.tiles:
            if n not in names:
                diags.append(Diagnostic(
                    "error", "unresolved_name", f"chain {c.name!r} references undeclared tile {n!r}"))
        if len(c.tiles) < 2:
            diags.append(Diagnostic("error", "short_chain", f"chain {c.name!r} has fewer than 2 tiles"))
        for a, b in zip(c.tiles, c.tiles[1:]):
            ta = names.get(a)
            if ta is not None and ta.routes and b not in ta.destinations():
                diags.append(Diagnostic(
                    "warning", "unrealizable_hop",
                    f"chain {c.name!r}: no next-hop entry in {a!r} leads to {b!r}"))
        if c.noc == "control" and not cfg.control_noc:
            diags.append(Diagnostic("error", "no_control_noc",
                                    f"chain {c.name!r} uses the control NoC, which is disabled"))
    return diags


# --- wiring plan --------------------------------------------------------------

@dataclass
class InstantiationPlan:
    width: int
    height: int
    tiles: list[dict]
    links: list[str]
    generated_empty: list[str]

    def to_json(self) -> str:
        return json.dumps({
            "width": self.width,
            "height": self.height,
            "tiles": self.tiles,
            "links": self.links,
            "generated_empty": self.generated_empty,
        }, indent=2, sort_keys=True)


def generate_instantiation_plan(cfg: TopologyConfig) -> InstantiationPlan:
    cfg = fill_empty_tiles(cfg)
    at = cfg.by_coord()
    tiles = []
    links = []
    for y in range(cfg.height):
        for x in range(cfg.width):
            c = Coord(x, y)
            t = at[c]
            ports = {}
            for d in (Direction.N, Direction.E, Direction.S, Direction.W):
                n = c.step(d)
                if 0 <= n.x < cfg.width and 0 <= n.y < cfg.height:
                    ports[d.value] = at[n].name
                    links.append(str(Link(c, n)))
                else:
                    ports[d.value] = None
            table = {}
            for key, dest in t.routes:
                table[str(key) if isinstance(key, str) else hex(key)] = (
                    dest if isinstance(dest, str) else list(dest))
            tiles.append({
                "name": t.name, "x": x, "y": y, "kind": t.kind,
                "buffering": t.buffering, "ports": ports, "next_hop": table,
            })
    assert len(links) == mesh_link_count(cfg.width, cfg.height)
    return InstantiationPlan(
        cfg.width, cfg.height, tiles, links,
        sorted(t.name for t in cfg.tiles if t.generated),
    )


def to_xml(cfg: TopologyConfig) -> str:
    """Serialise a config back to the canonical XML form (generated tiles omitted)."""
    root = ET.Element("design", width=str(cfg.width), height=str(cfg.height),
                      hash_seed=str(cfg.hash_seed), control_noc=str(cfg.control_noc).lower())
    for t in cfg.tiles:
        if t.generated:
            continue
        el = ET.SubElement(root, "tile", name=t.name, x=str(t.coord.x), y=str(t.coord.y),
                           kind=t.kind, buffering=t.buffering, recovery=str(t.recovery))
        if t.latency is not None:
            el.set("latency", str(t.latency))
        for key, dest in t.routes:
            k = key if isinstance(key, str) else hex(key)
            if isinstance(dest, str):
                ET.SubElement(el, "route", key=k, dest=dest)
            else:
                ET.SubElement(el, "route", key=k, group=" ".join(dest))
        for name, value in sorted(t.params.items()):
            ET.SubElement(el, "param", name=name, value=value)
    for c in cfg.chains:
        ET.SubElement(root, "chain", name=c.name, noc=c.noc).text = " ".join(c.tiles)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"
