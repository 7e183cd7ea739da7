import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tilenet.packets import (
    ETH_IPV4,
    IPPROTO_TCP,
    IPPROTO_UDP,
    TCP_ACK,
    TCP_FIN,
    TCP_SYN,
    Drop,
    EthHeader,
    FlowKey,
    Ipv4Header,
    PacketMeta,
    Segment,
    eth_build,
    eth_parse,
    int_to_ip,
    internet_checksum,
    ip_build,
    ip_parse,
    ip_to_int,
    parse_udp_frame,
    segment_from_ip,
    segment_to_ip,
    udp_build,
    udp_frame,
    udp_parse,
)


def ones_complement_oracle(data: bytes) -> int:
    # byte-pair loop with end-around carry after every addition
    s = 0
    for i in range(0, len(data), 2):
        hi = data[i]
        lo = data[i + 1] if i + 1 < len(data) else 0
        s += (hi << 8) | lo
        s = (s & 0xFFFF) + (s >> 16)
    return (~s) & 0xFFFF


def test_checksum_known_vectors():
    assert internet_checksum(bytes.fromhex("0001f203f4f5f6f7")) == 0x220D
    hdr = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")
    assert internet_checksum(hdr) == 0xB861


@given(st.binary(max_size=200))
def test_checksum_matches_oracle(data):
    assert internet_checksum(data) == ones_complement_oracle(data)


@given(st.binary(max_size=200))
def test_checksum_verifies_to_zero(data):
    if len(data) % 2:
        data += b"\x00"
    c = internet_checksum(data)
    assert internet_checksum(data + struct.pack("!H", c)) == 0


ips = st.integers(0, 2**32 - 1)
ports = st.integers(0, 65535)


@given(ips)
def test_ip_string_roundtrip(v):
    assert ip_to_int(int_to_ip(v)) == v


@given(st.binary(max_size=1400), ips, ips, ports, ports, st.one_of(st.none(), st.integers(0, 0xFFFF)))
def test_udp_frame_roundtrip(payload, sip, dip, sp, dp, vlan):
    frame = udp_frame(payload, src_ip=sip, dst_ip=dip, src_port=sp, dst_port=dp, vlan_tci=vlan)
    eth, ip, udp, body = parse_udp_frame(frame)
    assert body == payload
    assert (ip.src_ip, ip.dst_ip, ip.protocol) == (sip, dip, IPPROTO_UDP)
    assert (udp.src_port, udp.dst_port, udp.length) == (sp, dp, 8 + len(payload))
    assert eth.vlan == ((0x8100, vlan) if vlan is not None else None)
    assert eth.ethertype == ETH_IPV4


def test_eth_short_frame_dropped():
    with pytest.raises(Drop) as e:
        eth_parse(b"\x00" * 10)
    assert e.value.reason


@given(st.binary(min_size=20, max_size=60), st.integers(0, 59))
def test_ip_corruption_is_detected(payload, pos):
    pkt = bytearray(ip_build(Ipv4Header(1, 2, IPPROTO_UDP), payload))
    pos %= 20
    pkt[pos] ^= 0x01
    with pytest.raises(Drop):
        ip_parse(bytes(pkt))


@pytest.mark.parametrize("mutate,reason", [
    (lambda b: b[:19], "short_ip"),
    (lambda b: bytes([0x65]) + b[1:], "bad_version"),
])
def test_ip_drop_reasons(mutate, reason):
    pkt = ip_build(Ipv4Header(1, 2, IPPROTO_UDP), bytes(30))
    with pytest.raises(Drop) as e:
        ip_parse(mutate(pkt))
    assert e.value.reason == reason


def test_ip_fragment_dropped():
    pkt = bytearray(ip_build(Ipv4Header(1, 2, IPPROTO_UDP), bytes(30)))
    pkt[6] |= 0x20  # MF
    pkt[10:12] = b"\x00\x00"
    pkt[10:12] = struct.pack("!H", internet_checksum(bytes(pkt[:20])))
    with pytest.raises(Drop) as e:
        ip_parse(bytes(pkt))
    assert e.value.reason == "fragment"


def test_udp_bad_checksum_and_zero_checksum():
    d = bytearray(udp_build(1, 2, b"hello", 10, 20))
    d[-1] ^= 0xFF
    with pytest.raises(Drop) as e:
        udp_parse(bytes(d), 10, 20)
    assert e.value.reason == "bad_checksum"
    d[6:8] = b"\x00\x00"  # checksum disabled
    hdr, body = udp_parse(bytes(d), 10, 20)
    assert hdr.checksum == 0 and len(body) == 5


@given(ips, ips, ports, ports, st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.sampled_from([TCP_SYN, TCP_ACK, TCP_SYN | TCP_ACK, TCP_FIN | TCP_ACK]),
       st.integers(0, 65535), st.binary(max_size=300))
def test_tcp_segment_roundtrip(sip, dip, sp, dp, seq, ack, flags, win, payload):
    seg = Segment(sip, dip, sp, dp, seq, ack, flags, win, payload)
    assert segment_from_ip(segment_to_ip(seg)) == seg


def test_segment_length_counts_syn_and_fin():
    assert Segment(1, 2, 3, 4, 0, 0, TCP_SYN, 0).seg_len == 1
    assert Segment(1, 2, 3, 4, 0, 0, TCP_FIN | TCP_ACK, 0, b"ab").seg_len == 3
    assert Segment(1, 2, 3, 4, 0, 0, TCP_ACK, 0).flag_names() == "A"


def test_non_tcp_rejected():
    pkt = ip_build(Ipv4Header(1, 2, IPPROTO_UDP), udp_build(1, 2, b"", 1, 2))
    with pytest.raises(Drop) as e:
        segment_from_ip(pkt)
    assert e.value.reason == "not_tcp"


@given(st.builds(PacketMeta, dst_mac=st.binary(min_size=6, max_size=6),
                 src_mac=st.binary(min_size=6, max_size=6), ethertype=ports,
                 vlan_tci=st.one_of(st.none(), ports), src_ip=ips, dst_ip=ips,
                 protocol=st.integers(0, 255), ttl=st.integers(0, 255), src_port=ports,
                 dst_port=ports, l4_len=ports, tag=st.integers(0, 2**64 - 1)))
def test_metadata_flit_roundtrip(meta):
    raw = meta.pack()
    assert len(raw) == 64
    assert PacketMeta.unpack(raw) == meta


def test_meta_reply_swaps_endpoints():
    m = PacketMeta(src_ip=1, dst_ip=2, src_port=3, dst_port=4, src_mac=b"a" * 6, dst_mac=b"b" * 6)
    r = m.reply()
    assert (r.src_ip, r.dst_ip, r.src_port, r.dst_port) == (2, 1, 4, 3)
    assert r.reply() == m
    assert m.flow_key() == FlowKey(1, 2, 3, 4)


def test_eth_build_parse_roundtrip():
    hdr = EthHeader(b"\x01" * 6, b"\x02" * 6, ETH_IPV4, None)
    h2, body = eth_parse(eth_build(hdr, b"xyz" * 30))
    assert h2 == hdr and body == b"xyz" * 30
