"""Capture parsing, direction inference, TCP reassembly and TLS classification."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from . import pcap

log = logging.getLogger(__name__)

DEFAULT_LAYER2_OFFSET = 80


class Direction(str, Enum):
    C2S = "C"
    S2C = "S"

    def flipped(self) -> Direction:
        return Direction.S2C if self is Direction.C2S else Direction.C2S


class Kind(str, Enum):
    TCP_PAYLOAD = "tcp"
    TLS_APP_DATA = "tls-appdata"
    OTHER = "other"


class Mode(str, Enum):
    LAYER3 = "layer3"
    LAYER2 = "layer2"


@dataclass(frozen=True, order=True)
class FlowKey:
    """Direction-independent flow identity.

    Layer-3 keys are the sorted (ip, port) endpoint pair plus protocol;
    layer-2 keys are the sorted MAC pair with ``proto`` 0 and empty ports.
    """

    mode: Mode
    a: tuple
    b: tuple
    proto: int = 6

    @classmethod
    def layer3(cls, ip1: str, port1: int, ip2: str, port2: int, proto: int = 6) -> FlowKey:
        lo, hi = sorted([(ip1, port1), (ip2, port2)])
        return cls(Mode.LAYER3, lo, hi, proto)

    @classmethod
    def layer2(cls, mac1: str, mac2: str) -> FlowKey:
        lo, hi = sorted([mac1.lower(), mac2.lower()])
        return cls(Mode.LAYER2, (lo,), (hi,), 0)

    def __str__(self) -> str:
        if self.mode is Mode.LAYER2:
            return f"{self.a[0]}<->{self.b[0]}"
        return f"{self.a[0]}:{self.a[1]}<->{self.b[0]}:{self.b[1]}"

    def to_json(self) -> list:
        return [self.mode.value, list(self.a), list(self.b), self.proto]

    @classmethod
    def from_json(cls, obj: list) -> FlowKey:
        return cls(Mode(obj[0]), tuple(obj[1]), tuple(obj[2]), obj[3])


@dataclass(frozen=True)
class PacketMeta:
    ts: float
    length: int
    direction: Direction
    flow: FlowKey
    kind: Kind = Kind.OTHER
    retransmission: bool = False
    index: int = 0
    src: str = ""
    dst: str = ""
    seq: int | None = None
    flags: int = 0
    # layer-2 flow carrying a layer-3 packet, kept so a WAN capture can be
    # replayed through the Wi-Fi adversary's view
    link: FlowKey | None = None

    @property
    def ts_us(self) -> int:
        return round(self.ts * 1_000_000)

    @property
    def has_payload(self) -> bool:
        return self.kind in (Kind.TCP_PAYLOAD, Kind.TLS_APP_DATA)

    def __str__(self) -> str:
        return f"{self.direction.value}-{self.length}"


@dataclass(frozen=True)
class EndpointRoster:
    """Addresses (IP or MAC) on the local side of the home network.

    ``phone`` is the subset belonging to controlling smartphones; it decides
    direction for phone-device traffic and the communication class of a
    connection. ``router_wan`` is the NAT address seen by a WAN sniffer.
    """

    local: frozenset[str]
    phone: frozenset[str] = frozenset()
    router_wan: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "local", frozenset(a.lower() for a in self.local))
        object.__setattr__(self, "phone", frozenset(a.lower() for a in self.phone))
        if self.router_wan:
            object.__setattr__(self, "router_wan", self.router_wan.lower())

    def __bool__(self) -> bool:
        return bool(self.local or self.router_wan)

    def is_local(self, addr: str) -> bool:
        addr = addr.lower()
        return addr in self.local or addr in self.phone or addr == self.router_wan

    def is_phone(self, addr: str) -> bool:
        return addr.lower() in self.phone

    @classmethod
    def load(cls, path: str | Path) -> EndpointRoster:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(obj, list):
            return cls(frozenset(obj))
        return cls(frozenset(obj.get("local", [])), frozenset(obj.get("phone", [])),
                   obj.get("router_wan"))

    def dump(self, path: str | Path) -> None:
        obj = {"local": sorted(self.local), "phone": sorted(self.phone),
               "router_wan": self.router_wan}
        Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


class CommClass(str, Enum):
    PHONE_CLOUD = "phone-cloud"
    DEVICE_CLOUD = "device-cloud"
    PHONE_DEVICE = "phone-device"


def infer_direction(src: str, dst: str, roster: EndpointRoster) -> Direction | None:
    """Client-to-server iff the source is local; None when neither end is.

    When both ends are local (phone-device traffic) the phone is the client;
    without phone addresses the lexically smaller address is.
    """
    if not roster:
        raise ValueError("direction inference needs a non-empty roster")
    src_local, dst_local = roster.is_local(src), roster.is_local(dst)
    if src_local and dst_local:
        if roster.phone and roster.is_phone(src) != roster.is_phone(dst):
            return Direction.C2S if roster.is_phone(src) else Direction.S2C
        return Direction.C2S if src.lower() < dst.lower() else Direction.S2C
    if src_local:
        return Direction.C2S
    if dst_local:
        return Direction.S2C
    return None


def comm_class(client: str, server: str, roster: EndpointRoster) -> CommClass:
    if roster.is_local(client) and roster.is_local(server):
        return CommClass.PHONE_DEVICE
    if roster.is_phone(client):
        return CommClass.PHONE_CLOUD
    return CommClass.DEVICE_CLOUD


def classify_tls(first_bytes: bytes) -> Kind:
    """TLS Application Data iff the record header reads 0x17 0x03."""
    if len(first_bytes) >= 3 and first_bytes[0] == 0x17 and first_bytes[1] == 0x03:
        return Kind.TLS_APP_DATA
    return Kind.TCP_PAYLOAD


def map_to_layer2(length: int, offset: int = DEFAULT_LAYER2_OFFSET) -> int:
    if offset < 0:
        raise ValueError("layer-2 offset must be >= 0")
    return length + offset


@dataclass
class ParseStats:
    frames: int = 0
    emitted: int = 0
    truncated: int = 0
    non_tcp: int = 0
    fragments: int = 0
    non_data: int = 0
    not_in_roster: int = 0


def _parse_ethernet(data: bytes) -> tuple[str, str, int, bytes] | None:
    if len(data) < 14:
        return None
    dst, src = pcap.mac_str(data[0:6]), pcap.mac_str(data[6:12])
    ethertype = struct.unpack("!H", data[12:14])[0]
    off = 14
    while ethertype == pcap.ETH_P_8021Q and len(data) >= off + 4:
        ethertype = struct.unpack("!H", data[off + 2:off + 4])[0]
        off += 4
    return src, dst, ethertype, data[off:]


def _parse_80211(data: bytes) -> tuple[str, str] | None:
    """Source and destination MAC of a radiotap-framed 802.11 data frame."""
    if len(data) < 4:
        return None
    rt_len = struct.unpack("<H", data[2:4])[0]
    frame = data[rt_len:]
    if len(frame) < 24:
        return None
    ftype = (frame[0] >> 2) & 0x3
    if ftype != 2:
        return None
    to_ds, from_ds = frame[1] & 0x01, frame[1] & 0x02
    a1, a2, a3 = (pcap.mac_str(frame[i:i + 6]) for i in (4, 10, 16))
    if to_ds and from_ds:
        if len(frame) < 30:
            return None
        return pcap.mac_str(frame[24:30]), a3
    if to_ds:
        return a2, a3
    if from_ds:
        return a3, a1
    return a2, a1


def _layer3_meta(index: int, ts: float, src_mac: str, dst_mac: str, ip: bytes,
                 roster: EndpointRoster, stats: ParseStats) -> PacketMeta | None:
    if len(ip) < 20 or ip[0] >> 4 != 4:
        stats.non_tcp += 1
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len, frag = struct.unpack("!H2xH", ip[2:8])
    proto = ip[9]
    if proto != 6:
        stats.non_tcp += 1
        return None
    if frag & 0x1FFF or frag & 0x2000:
        stats.fragments += 1
        return None
    src = ".".join(str(b) for b in ip[12:16])
    dst = ".".join(str(b) for b in ip[16:20])
    tcp = ip[ihl:]
    if len(tcp) < 20:
        stats.truncated += 1
        return None
    sport, dport, seq, _ack, doff, flags = struct.unpack("!HHIIBB", tcp[:14])
    thl = (doff >> 4) * 4
    payload_len = max(total_len - ihl - thl, 0)
    direction = infer_direction(src, dst, roster)
    if direction is None:
        stats.not_in_roster += 1
        return None
    if payload_len:
        kind = classify_tls(tcp[thl:thl + 3])
    else:
        kind = Kind.OTHER
    return PacketMeta(ts=ts, length=payload_len, direction=direction,
                      flow=FlowKey.layer3(src, sport, dst, dport), kind=kind,
                      index=index, src=src, dst=dst, seq=seq, flags=flags,
                      link=FlowKey.layer2(src_mac, dst_mac))


def parse_capture(path: str | Path, mode: Mode, roster: EndpointRoster,
                  stats: ParseStats | None = None) -> Iterator[PacketMeta]:
    """Stream PacketMeta records out of a classic pcap file.

    Layer3 mode yields one record per IPv4/TCP frame with the TCP payload
    size as length. Layer2 mode yields one record per data frame with the
    captured frame's original length.
    """
    mode = Mode(mode)
    stats = stats if stats is not None else ParseStats()
    with open(path, "rb") as f:
        reader = pcap.PcapReader(f)
        if reader.linktype not in (pcap.LINKTYPE_ETHERNET, pcap.LINKTYPE_IEEE802_11_RADIOTAP):
            raise pcap.PcapError(f"unsupported link type {reader.linktype}")
        if mode is Mode.LAYER3 and reader.linktype != pcap.LINKTYPE_ETHERNET:
            raise pcap.PcapError("layer-3 parsing needs an Ethernet capture")
        for index, rec in enumerate(reader):
            stats.frames += 1
            meta = None
            if reader.linktype == pcap.LINKTYPE_ETHERNET:
                eth = _parse_ethernet(rec.data)
                if eth is None:
                    stats.truncated += 1
                    continue
                src_mac, dst_mac, ethertype, body = eth
                if mode is Mode.LAYER3:
                    if ethertype != pcap.ETH_P_IP:
                        stats.non_tcp += 1
                        continue
                    meta = _layer3_meta(index, rec.ts, src_mac, dst_mac, body, roster, stats)
                else:
                    meta = _layer2_meta(index, rec.ts, rec.orig_len, src_mac, dst_mac, roster, stats)
            else:
                addrs = _parse_80211(rec.data)
                if addrs is None:
                    stats.non_data += 1
                    continue
                meta = _layer2_meta(index, rec.ts, rec.orig_len, addrs[0], addrs[1], roster, stats)
            if meta is not None:
                stats.emitted += 1
                yield meta
        stats.truncated += reader.truncated
    if stats.truncated:
        log.warning("%s: %d truncated record(s) skipped", path, stats.truncated)


def _layer2_meta(index: int, ts: float, length: int, src: str, dst: str,
                 roster: EndpointRoster, stats: ParseStats) -> PacketMeta | None:
    direction = infer_direction(src, dst, roster)
    if direction is None:
        stats.not_in_roster += 1
        return None
    return PacketMeta(ts=ts, length=length, direction=direction, flow=FlowKey.layer2(src, dst),
                      index=index, src=src, dst=dst)


def write_capture(path: str | Path, packets: Iterable[PacketMeta], endian: str = "<") -> None:
    """Write layer-3 PacketMeta records as an Ethernet/IPv4/TCP pcap.

    Payload bytes are synthesized: TLS Application Data packets get a
    ``17 03 03`` record header, other payload packets are zero filled.
    Sequence numbers are taken from ``seq`` when present and otherwise
    numbered per direction so that reassembly sees an in-order stream.
    """
    next_seq: dict[tuple, int] = {}
    with open(path, "wb") as f:
        w = pcap.PcapWriter(f, endian=endian)
        for p in packets:
            if p.flow.mode is not Mode.LAYER3:
                raise ValueError("write_capture needs layer-3 packets")
            (ip_a, port_a), (ip_b, port_b) = p.flow.a, p.flow.b
            if p.src and p.dst:
                src, dst = p.src, p.dst
            else:
                src, dst = (ip_a, ip_b) if p.direction is Direction.C2S else (ip_b, ip_a)
            sport, dport = (port_a, port_b) if src == ip_a else (port_b, port_a)
            key = (src, sport, dst, dport)
            seq = p.seq if p.seq is not None else next_seq.get(key, 1000)
            next_seq[key] = seq + p.length
            payload = _synth_payload(p.kind, p.length)
            link = p.link
            if link is not None:
                src_mac, dst_mac = link.a[0], link.b[0]
            else:
                src_mac, dst_mac = "02:00:00:00:00:01", "02:00:00:00:00:02"
            frame = pcap.tcp_frame(src_mac, dst_mac, src, dst, sport, dport, seq, 0,
                                   p.flags or (pcap.TCP_ACK | pcap.TCP_PSH), payload)
            w.write(p.ts, frame)


def _synth_payload(kind: Kind, length: int) -> bytes:
    if length <= 0:
        return b""
    if kind is Kind.TLS_APP_DATA:
        head = bytes([0x17, 0x03, 0x03]) + struct.pack("!H", max(length - 5, 0) & 0xFFFF)
        return (head + b"\0" * length)[:length]
    return b"\0" * length


# --- reassembly -----------------------------------------------------------

def _rel(seq: int, ref: int) -> int:
    d = (seq - ref) & 0xFFFFFFFF
    return d - (1 << 32) if d >= (1 << 31) else d


@dataclass
class Connection:
    key: FlowKey
    packets: list[PacketMeta] = field(default_factory=list)
    payload: list[PacketMeta] = field(default_factory=list)
    client: str = ""
    server: str = ""

    @property
    def is_tls(self) -> bool:
        return any(p.kind is Kind.TLS_APP_DATA for p in self.payload)

    def payload_set(self) -> list[PacketMeta]:
        """P for this connection: TLS Application Data only on TLS connections."""
        if self.is_tls:
            return [p for p in self.payload if p.kind is Kind.TLS_APP_DATA]
        return list(self.payload)


def mark_retransmissions(packets: Iterable[PacketMeta]) -> list[PacketMeta]:
    """Flag payload segments whose byte range was already received.

    Works per (connection, direction) in the given order. A segment is a
    retransmission when its whole range lies below the contiguous
    high-water mark or inside data already received out of order.
    Partially overlapping segments are kept. Already-flagged segments are
    ignored, so applying this twice changes nothing.
    """
    packets = list(packets)
    by_dir: dict[tuple, list[int]] = defaultdict(list)
    syn_ref: dict[tuple, int] = {}
    for i, p in enumerate(packets):
        key = (p.flow, p.src)
        if p.flags & pcap.TCP_SYN and p.seq is not None:
            syn_ref.setdefault(key, (p.seq + 1) & 0xFFFFFFFF)
        if p.length > 0 and p.seq is not None and not p.retransmission:
            by_dir[key].append(i)
    out = list(packets)
    for key, idxs in by_dir.items():
        ref = syn_ref.get(key, packets[idxs[0]].seq)
        contig = min([0] + [_rel(packets[i].seq, ref) for i in idxs]) if key not in syn_ref else 0
        covered: list[list[int]] = []
        for i in idxs:
            s = _rel(packets[i].seq, ref)
            e = s + packets[i].length
            if e <= contig or any(a <= s and e <= b for a, b in covered):
                out[i] = dataclasses.replace(packets[i], retransmission=True)
                continue
            covered.append([s, e])
            covered.sort()
            merged: list[list[int]] = []
            for a, b in covered:
                if merged and a <= merged[-1][1]:
                    merged[-1][1] = max(merged[-1][1], b)
                else:
                    merged.append([a, b])
            covered = merged
            for a, b in covered:
                if a <= contig < b:
                    contig = b
    return out


def reassemble_tcp(packets: Iterable[PacketMeta]) -> dict[FlowKey, Connection]:
    """Group layer-3 packets into connections with retransmissions flagged.

    Within a direction, kept payload segments are ordered by sequence
    number; a segment's timestamp becomes its delivery time (the latest
    capture time of it and every segment before it in sequence order), so
    each connection's packet list is non-decreasing in time. Directions
    are merged by delivery time, ties broken by capture index.
    """
    flagged = mark_retransmissions(packets)
    grouped: dict[FlowKey, list[PacketMeta]] = defaultdict(list)
    for p in flagged:
        if p.flow.mode is not Mode.LAYER3:
            raise ValueError("TCP reassembly needs layer-3 packets")
        grouped[p.flow].append(p)
    conns: dict[FlowKey, Connection] = {}
    for key, pkts in grouped.items():
        ordered: list[PacketMeta] = []
        for src in sorted({p.src for p in pkts}):
            side = [p for p in pkts if p.src == src]
            data = [p for p in side if p.length > 0 and not p.retransmission and p.seq is not None]
            ref = data[0].seq if data else 0
            data.sort(key=lambda p: (_rel(p.seq, ref), p.index))
            latest = float("-inf")
            for p in data:
                latest = max(latest, p.ts)
                ordered.append(p if p.ts == latest else dataclasses.replace(p, ts=latest))
            ordered.extend(p for p in side if not (p.length > 0 and not p.retransmission
                                                   and p.seq is not None))
        ordered.sort(key=lambda p: (p.ts, p.index))
        conn = Connection(key, ordered, [p for p in ordered if p.has_payload and not p.retransmission])
        first = min(pkts, key=lambda p: p.index)
        syn = [p for p in pkts if p.flags & pcap.TCP_SYN and not p.flags & pcap.TCP_ACK]
        if syn:
            conn.client, conn.server = syn[0].src, syn[0].dst
        elif first.direction is Direction.C2S:
            conn.client, conn.server = first.src, first.dst
        else:
            conn.client, conn.server = first.dst, first.src
        conns[key] = conn
    return conns


def payload_streams(packets: Iterable[PacketMeta]) -> dict[FlowKey, list[PacketMeta]]:
    """Per-connection P lists as seen by the WAN adversary."""
    return {k: c.payload_set() for k, c in reassemble_tcp(packets).items()}


def layer2_view(packets: Iterable[PacketMeta], offset: int = DEFAULT_LAYER2_OFFSET) -> list[PacketMeta]:
    """What a Wi-Fi sniffer would see of a layer-3 capture.

    Every frame (including pure ACKs and retransmissions) is keyed by its
    MAC pair and lengthened by ``offset``. Layer-2 records pass through.
    """
    out = []
    for p in packets:
        if p.flow.mode is Mode.LAYER2:
            out.append(p)
            continue
        if p.link is None:
            raise ValueError("layer-3 packet without a layer-2 flow cannot be mapped")
        out.append(dataclasses.replace(p, flow=p.link, length=map_to_layer2(p.length, offset),
                                       kind=Kind.OTHER, retransmission=False, seq=None))
    return out
