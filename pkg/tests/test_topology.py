import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilenet.layouts import multi_stack_echo, nat_gateway, rs_stack, udp_echo_stack, witness_stack
from tilenet.noc import Coord, mesh_link_count
from tilenet.topology import (
    STORE_AND_FORWARD,
    Chain,
    TileDecl,
    TopologyConfig,
    TopologyError,
    fill_empty_tiles,
    generate_instantiation_plan,
    load_topology,
    parse_topology,
    to_xml,
    validate_topology,
)

ECHO_XML = """
<design width="4" height="2">
  <tile name="eth_rx" x="0" y="0" kind="eth_rx"><route key="0x0800" dest="ip_rx"/></tile>
  <tile name="ip_rx" x="1" y="0" kind="ip_rx"><route key="17" dest="udp_rx"/></tile>
  <tile name="udp_rx" x="2" y="0" kind="udp_rx"><route key="7" dest="app"/></tile>
  <tile name="app" x="3" y="0" kind="app" recovery="2"><route key="default" dest="udp_tx"/></tile>
  <tile name="udp_tx" x="2" y="1" kind="udp_tx"><route key="default" dest="ip_tx"/></tile>
  <tile name="ip_tx" x="1" y="1" kind="ip_tx"><route key="default" dest="eth_tx"/></tile>
  <tile name="eth_tx" x="0" y="1" kind="eth_tx" latency="3"/>
  <chain name="echo">eth_rx ip_rx udp_rx app udp_tx ip_tx eth_tx</chain>
</design>
"""


def codes(cfg):
    return {d.code for d in validate_topology(cfg)}


def test_parse_xml_and_fill():
    cfg = parse_topology(ECHO_XML)
    assert (cfg.width, cfg.height) == (4, 2)
    assert len(cfg.tiles) == 8
    empty = [t for t in cfg.tiles if t.generated]
    assert [(t.name, t.coord) for t in empty] == [("empty_3_1", Coord(3, 1))]
    assert cfg.tile("eth_rx").routes == [(0x0800, "ip_rx")]
    assert cfg.tile("app").recovery == 2
    assert cfg.tile("eth_tx").latency == 3


def test_parse_json_equivalent():
    doc = {
        "width": 2, "height": 1,
        "tiles": [
            {"name": "a", "x": 0, "y": 0, "kind": "app", "routes": [{"key": "default", "dest": "b"}]},
            {"name": "b", "x": 1, "y": 0, "kind": "buffer"},
        ],
        "chains": [{"name": "c", "tiles": ["a", "b"]}],
    }
    cfg = parse_topology(json.dumps(doc))
    assert cfg.tile("b").buffering == STORE_AND_FORWARD
    assert cfg.chains == [Chain("c", ["a", "b"])]


@pytest.mark.parametrize("text,fragment", [
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'/><tile name='b' x='0' y='0' kind='app'/></design>",
     "duplicate_coord"),
    ("<design width='2' height='1'><tile name='a' x='5' y='0' kind='app'/></design>", "out_of_bounds"),
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'><route key='1' dest='zz'/></tile></design>",
     "unresolved_name"),
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'/><tile name='a' x='1' y='0' kind='app'/></design>",
     "duplicate_name"),
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='bogus'/></design>", "unknown tile kind"),
    ("<design width='2' height='1'><tile x='0' y='0' kind='app'/></design>", "missing mandatory attribute 'name'"),
    ("<design width='2'><tile name='a' x='0' y='0' kind='app'/></design>", "'height'"),
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'>", "line"),
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'><route key='tcp' dest='a'/></tile></design>",
     "route key"),
    ("<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'/><tile name='b' x='1' y='0' kind='app'/>"
     "<chain noc='control'>a b</chain></design>", "no_control_noc"),
])
def test_validation_errors(text, fragment):
    with pytest.raises(TopologyError) as e:
        parse_topology(text)
    assert fragment in str(e.value)


def test_unrealizable_hop_is_a_warning():
    cfg = TopologyConfig(2, 1, [TileDecl("a", Coord(0, 0), "app", routes=[("default", "a")]),
                                TileDecl("b", Coord(1, 0), "app")],
                         [Chain("c", ["a", "b"])])
    diags = validate_topology(cfg)
    assert [(d.severity, d.code) for d in diags] == [("warning", "unrealizable_hop")]
    parse_topology(to_xml(cfg))  # warnings do not fail parsing


def test_non_strict_parse_returns_errors_unfilled():
    text = "<design width='2' height='1'><tile name='a' x='0' y='0' kind='app'><route key='1' dest='zz'/></tile></design>"
    cfg = parse_topology(text, strict=False)
    assert "unresolved_name" in codes(cfg)
    assert len(cfg.tiles) == 1


@pytest.mark.parametrize("make", [udp_echo_stack, multi_stack_echo, rs_stack, witness_stack, nat_gateway])
def test_layouts_are_valid_and_roundtrip(make):
    cfg = make()
    assert not [d for d in validate_topology(cfg) if d.severity == "error"]
    again = parse_topology(to_xml(cfg), fill=False)
    assert to_xml(again) == to_xml(cfg)


def test_load_topology_from_file(tmp_path):
    p = tmp_path / "echo.xml"
    p.write_text(ECHO_XML)
    assert load_topology(p).tile("app").kind == "app"


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.data())
def test_plan_covers_every_position_and_link(w, h, data):
    n = data.draw(st.integers(0, w * h))
    cells = data.draw(st.permutations([(x, y) for y in range(h) for x in range(w)]))[:n]
    tiles = [TileDecl(f"t{i}", Coord(x, y), "app") for i, (x, y) in enumerate(cells)]
    plan = generate_instantiation_plan(TopologyConfig(w, h, tiles))
    assert len(plan.tiles) == w * h
    assert len(plan.links) == mesh_link_count(w, h) == len(set(plan.links))
    assert len(plan.generated_empty) == w * h - n
    for t in plan.tiles:
        # a port faces the mesh edge exactly when the neighbour is missing
        assert (t["ports"]["N"] is None) == (t["y"] == 0)
        assert (t["ports"]["W"] is None) == (t["x"] == 0)
        assert (t["ports"]["S"] is None) == (t["y"] == h - 1)
        assert (t["ports"]["E"] is None) == (t["x"] == w - 1)
    json.loads(plan.to_json())


def test_fill_empty_is_idempotent():
    cfg = fill_empty_tiles(udp_echo_stack())
    assert len(fill_empty_tiles(cfg).tiles) == len(cfg.tiles)
