"""Ethernet / IPv4 / UDP / TCP header parse and build, network byte order."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

ETH_IPV4 = 0x0800
ETH_VLAN = 0x8100
IPPROTO_IPIP = 4
IPPROTO_TCP = 6
IPPROTO_UDP = 17

MAX_FRAME = 9000

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


class Drop(Exception):
    """Raised by a parser when the packet must be discarded.

    ``reason`` is a short machine-friendly code, e.g. ``"bad_checksum"``.
    """

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ip_to_int(s: str) -> int:
    a, b, c, d = (int(p) for p in s.split("."))
    return (a << 24) | (b << 16) | (c << 8) | d


def int_to_ip(v: int) -> str:
    return ".".join(str((v >> s) & 0xFF) for s in (24, 16, 8, 0))


# --- Ethernet -----------------------------------------------------------------

@dataclass(frozen=True)
class EthHeader:
    dst_mac: bytes
    src_mac: bytes
    ethertype: int
    vlan: Optional[tuple[int, int]] = None  # (tpid, tci)

    @property
    def length(self) -> int:
        return 18 if self.vlan else 14


def eth_parse(frame: bytes) -> tuple[EthHeader, bytes]:
    if len(frame) < 14:
        raise Drop("short_frame", f"{len(frame)} bytes")
    dst, src = frame[0:6], frame[6:12]
    (etype,) = struct.unpack_from("!H", frame, 12)
    if etype == ETH_VLAN:
        if len(frame) < 18:
            raise Drop("short_frame", "truncated VLAN tag")
        tci, inner = struct.unpack_from("!HH", frame, 14)
        return EthHeader(dst, src, inner, (etype, tci)), frame[18:]
    return EthHeader(dst, src, etype), frame[14:]


def eth_build(hdr: EthHeader, payload: bytes) -> bytes:
    out = hdr.dst_mac + hdr.src_mac
    if hdr.vlan:
        out += struct.pack("!HH", hdr.vlan[0], hdr.vlan[1])
    return out + struct.pack("!H", hdr.ethertype) + payload


# --- IPv4 ---------------------------------------------------------------------

@dataclass(frozen=True)
class Ipv4Header:
    src_ip: int
    dst_ip: int
    protocol: int
    ttl: int = 64
    tos: int = 0
    ident: int = 0
    flags_frag: int = 0x4000  # DF set, offset 0
    options: bytes = b""
    total_length: int = 0
    header_checksum: int = 0

    @property
    def ihl(self) -> int:
        return 5 + len(self.options) // 4

    @property
    def header_len(self) -> int:
        return self.ihl * 4


def ip_header_bytes(hdr: Ipv4Header, payload_len: int) -> bytes:
    if len(hdr.options) % 4 or len(hdr.options) > 40:
        raise ValueError("IPv4 options must be a multiple of 4 bytes, at most 40")
    total = hdr.header_len + payload_len
    raw = struct.pack(
        "!BBHHHBBH4s4s",
        0x40 | hdr.ihl, hdr.tos, total, hdr.ident, hdr.flags_frag,
        hdr.ttl, hdr.protocol, 0,
        hdr.src_ip.to_bytes(4, "big"), hdr.dst_ip.to_bytes(4, "big"),
    ) + hdr.options
    csum = internet_checksum(raw)
    return raw[:10] + struct.pack("!H", csum) + raw[12:]


def ip_build(hdr: Ipv4Header, payload: bytes) -> bytes:
    return ip_header_bytes(hdr, len(payload)) + payload


def ip_parse(data: bytes) -> tuple[Ipv4Header, bytes]:
    if len(data) < 20:
        raise Drop("short_ip", f"{len(data)} bytes")
    vihl, tos, total, ident, ff, ttl, proto, csum, src, dst = struct.unpack_from(
        "!BBHHHBBH4s4s", data)
    if vihl >> 4 != 4:
        raise Drop("bad_version")
    ihl = vihl & 0x0F
    if ihl < 5:
        raise Drop("bad_ihl", str(ihl))
    hlen = ihl * 4
    if len(data) < hlen or total < hlen or total > len(data):
        raise Drop("bad_length")
    if internet_checksum(data[:hlen]) != 0:
        raise Drop("bad_checksum")
    # MF flag or non-zero offset
    if ff & 0x3FFF:
        raise Drop("fragment")
    hdr = Ipv4Header(
        int.from_bytes(src, "big"), int.from_bytes(dst, "big"), proto, ttl, tos,
        ident, ff, data[20:hlen], total, csum,
    )
    return hdr, data[hlen:total]


# --- UDP ----------------------------------------------------------------------

@dataclass(frozen=True)
class UdpHeader:
    src_port: int
    dst_port: int
    length: int = 0
    checksum: int = 0


def _pseudo(src_ip: int, dst_ip: int, proto: int, length: int) -> bytes:
    return struct.pack("!IIBBH", src_ip, dst_ip, 0, proto, length)


def udp_build(src_port: int, dst_port: int, payload: bytes, src_ip: int, dst_ip: int) -> bytes:
    length = 8 + len(payload)
    raw = struct.pack("!HHHH", src_port, dst_port, length, 0) + payload
    csum = internet_checksum(_pseudo(src_ip, dst_ip, IPPROTO_UDP, length) + raw)
    # a computed zero is sent as all-ones; zero on the wire means "no checksum"
    if csum == 0:
        csum = 0xFFFF
    return raw[:6] + struct.pack("!H", csum) + raw[8:]


def udp_parse(data: bytes, src_ip: int, dst_ip: int) -> tuple[UdpHeader, bytes]:
    if len(data) < 8:
        raise Drop("short_udp")
    sp, dp, length, csum = struct.unpack_from("!HHHH", data)
    if length != len(data) or length < 8:
        raise Drop("bad_length", f"udp length {length} vs {len(data)}")
    if csum != 0 and internet_checksum(_pseudo(src_ip, dst_ip, IPPROTO_UDP, length) + data) != 0:
        raise Drop("bad_checksum")
    return UdpHeader(sp, dp, length, csum), data[8:]


# --- TCP ----------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    window: int
    payload: bytes = b""

    @property
    def seg_len(self) -> int:
        n = len(self.payload)
        if self.flags & TCP_SYN:
            n += 1
        if self.flags & TCP_FIN:
            n += 1
        return n

    def flag_names(self) -> str:
        names = [(TCP_SYN, "S"), (TCP_ACK, "A"), (TCP_FIN, "F"), (TCP_RST, "R"), (TCP_PSH, "P")]
        return "".join(c for bit, c in names if self.flags & bit) or "-"

    def reply_key(self) -> tuple[int, int, int, int]:
        return (self.dst_ip, self.src_ip, self.dst_port, self.src_port)


def tcp_build(seg: Segment) -> bytes:
    """Serialise to a TCP header + payload (no options, data offset 5)."""
    raw = struct.pack(
        "!HHIIBBHHH", seg.src_port, seg.dst_port, seg.seq & 0xFFFFFFFF,
        seg.ack & 0xFFFFFFFF, 5 << 4, seg.flags, min(seg.window, 0xFFFF), 0, 0,
    ) + seg.payload
    csum = internet_checksum(_pseudo(seg.src_ip, seg.dst_ip, IPPROTO_TCP, len(raw)) + raw)
    return raw[:16] + struct.pack("!H", csum) + raw[18:]


def tcp_parse(data: bytes, src_ip: int, dst_ip: int) -> Segment:
    if len(data) < 20:
        raise Drop("short_tcp")
    sp, dp, seq, ack, off, flags, win, csum, _urg = struct.unpack_from("!HHIIBBHHH", data)
    hlen = (off >> 4) * 4
    if hlen < 20 or hlen > len(data):
        raise Drop("bad_offset")
    if internet_checksum(_pseudo(src_ip, dst_ip, IPPROTO_TCP, len(data)) + data) != 0:
        raise Drop("bad_checksum")
    return Segment(src_ip, dst_ip, sp, dp, seq, ack, flags, win, data[hlen:])


def segment_to_ip(seg: Segment, ttl: int = 64) -> bytes:
    return ip_build(Ipv4Header(seg.src_ip, seg.dst_ip, IPPROTO_TCP, ttl), tcp_build(seg))


def segment_from_ip(packet: bytes) -> Segment:
    hdr, body = ip_parse(packet)
    if hdr.protocol != IPPROTO_TCP:
        raise Drop("not_tcp")
    return tcp_parse(body, hdr.src_ip, hdr.dst_ip)


# --- metadata flit ------------------------------------------------------------

# Fixed field order of the parsed-header metadata flit (64 bytes, zero padded):
#   dst_mac 6s | src_mac 6s | ethertype H | vlan_tci H | has_vlan B |
#   src_ip I | dst_ip I | protocol B | ttl B | src_port H | dst_port H |
#   l4_len H | tag Q | ingress_cycle Q | flow_hash Q
_META = struct.Struct("!6s6sHHBIIBBHHHQQQ")
META_BYTES = 64


@dataclass(frozen=True)
class PacketMeta:
    dst_mac: bytes = b"\x00" * 6
    src_mac: bytes = b"\x00" * 6
    ethertype: int = 0
    vlan_tci: Optional[int] = None
    src_ip: int = 0
    dst_ip: int = 0
    protocol: int = 0
    ttl: int = 0
    src_port: int = 0
    dst_port: int = 0
    l4_len: int = 0
    tag: int = 0
    ingress_cycle: int = 0
    flow_hash: int = 0

    def pack(self) -> bytes:
        return _META.pack(
            self.dst_mac, self.src_mac, self.ethertype, self.vlan_tci or 0,
            self.vlan_tci is not None, self.src_ip, self.dst_ip, self.protocol,
            self.ttl, self.src_port, self.dst_port, self.l4_len, self.tag,
            self.ingress_cycle, self.flow_hash,
        ).ljust(META_BYTES, b"\x00")

    @classmethod
    def unpack(cls, raw: bytes) -> "PacketMeta":
        (dmac, smac, et, tci, has_vlan, sip, dip, proto, ttl, sp, dp, l4,
         tag, ing, fh) = _META.unpack_from(raw)
        return cls(dmac, smac, et, tci if has_vlan else None, sip, dip, proto,
                   ttl, sp, dp, l4, tag, ing, fh)

    def reply(self) -> "PacketMeta":
        """Swap addresses and ports for a response travelling back out."""
        return replace(
            self, dst_mac=self.src_mac, src_mac=self.dst_mac, src_ip=self.dst_ip,
            dst_ip=self.src_ip, src_port=self.dst_port, dst_port=self.src_port,
        )

    def flow_key(self) -> "FlowKey":
        return FlowKey(self.src_ip, self.dst_ip, self.src_port, self.dst_port)


@dataclass(frozen=True, order=True)
class FlowKey:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int

    def pack(self) -> bytes:
        return struct.pack("!IIHH", self.src_ip, self.dst_ip, self.src_port, self.dst_port)


def udp_frame(
    payload: bytes,
    *,
    src_ip: int = ip_to_int("10.0.0.2"),
    dst_ip: int = ip_to_int("10.0.0.1"),
    src_port: int = 40000,
    dst_port: int = 7,
    src_mac: bytes = bytes.fromhex("020000000002"),
    dst_mac: bytes = bytes.fromhex("020000000001"),
    vlan_tci: Optional[int] = None,
) -> bytes:
    """Convenience: a complete Ethernet/IPv4/UDP frame."""
    dgram = udp_build(src_port, dst_port, payload, src_ip, dst_ip)
    pkt = ip_build(Ipv4Header(src_ip, dst_ip, IPPROTO_UDP), dgram)
    vlan = (ETH_VLAN, vlan_tci) if vlan_tci is not None else None
    return eth_build(EthHeader(dst_mac, src_mac, ETH_IPV4, vlan), pkt)


def parse_udp_frame(frame: bytes) -> tuple[EthHeader, Ipv4Header, UdpHeader, bytes]:
    eth, rest = eth_parse(frame)
    if eth.ethertype != ETH_IPV4:
        raise Drop("not_ipv4")
    ip, rest = ip_parse(rest)
    if ip.protocol != IPPROTO_UDP:
        raise Drop("not_udp")
    udp, payload = udp_parse(rest, ip.src_ip, ip.dst_ip)
    return eth, ip, udp, payload
