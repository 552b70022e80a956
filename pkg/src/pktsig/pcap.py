"""Classic libpcap file reading/writing and raw frame builders.

Only the microsecond-resolution classic format is supported. Frame builders
produce Ethernet/IPv4/TCP and Radiotap/802.11 data frames with correct
headers, which is enough for synthetic fixtures and round-trip tests.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_IEEE802_11_RADIOTAP = 127

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

ETH_P_IP = 0x0800
ETH_P_8021Q = 0x8100

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


class PcapError(Exception):
    """Raised for a malformed or unsupported capture file."""


@dataclass
class PcapRecord:
    ts_sec: int
    ts_usec: int
    orig_len: int
    data: bytes

    @property
    def ts(self) -> float:
        return self.ts_sec + self.ts_usec / 1e6


class PcapReader:
    """Iterate over the records of a classic pcap file.

    A record whose header or body is cut short by the end of the file is
    counted in ``truncated`` and reading stops there.
    """

    def __init__(self, fileobj: BinaryIO):
        self._f = fileobj
        header = fileobj.read(GLOBAL_HEADER_LEN)
        if len(header) < GLOBAL_HEADER_LEN:
            raise PcapError("file too short for a pcap global header")
        magic_le = struct.unpack("<I", header[:4])[0]
        magic_be = struct.unpack(">I", header[:4])[0]
        if magic_le == MAGIC_USEC:
            self.endian = "<"
        elif magic_be == MAGIC_USEC:
            self.endian = ">"
        elif MAGIC_NSEC in (magic_le, magic_be):
            raise PcapError("nanosecond-resolution pcap is not supported; convert to microsecond pcap")
        else:
            raise PcapError(f"bad pcap magic 0x{magic_le:08x}")
        (_, self.version_major, self.version_minor, _, _, self.snaplen,
         self.linktype) = struct.unpack(self.endian + "IHHiIII", header)
        self.truncated = 0

    def __iter__(self) -> Iterator[PcapRecord]:
        fmt = self.endian + "IIII"
        while True:
            hdr = self._f.read(RECORD_HEADER_LEN)
            if not hdr:
                return
            if len(hdr) < RECORD_HEADER_LEN:
                self.truncated += 1
                return
            ts_sec, ts_usec, incl_len, orig_len = struct.unpack(fmt, hdr)
            data = self._f.read(incl_len)
            if len(data) < incl_len:
                self.truncated += 1
                return
            yield PcapRecord(ts_sec, ts_usec, orig_len, data)


class PcapWriter:
    def __init__(self, fileobj: BinaryIO, linktype: int = LINKTYPE_ETHERNET,
                 snaplen: int = 65535, endian: str = "<"):
        if endian not in ("<", ">"):
            raise ValueError("endian must be '<' or '>'")
        self._f = fileobj
        self.endian = endian
        self.snaplen = snaplen
        fileobj.write(struct.pack(endian + "IHHiIII", MAGIC_USEC, 2, 4, 0, 0, snaplen, linktype))

    def write(self, ts: float, frame: bytes, orig_len: int | None = None) -> None:
        usec_total = round(ts * 1_000_000)
        sec, usec = divmod(usec_total, 1_000_000)
        data = frame[: self.snaplen]
        self._f.write(struct.pack(self.endian + "IIII", sec, usec, len(data),
                                  len(frame) if orig_len is None else orig_len))
        self._f.write(data)


def mac_bytes(mac: str) -> bytes:
    return bytes(int(part, 16) for part in mac.split(":"))


def mac_str(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4_header(src: str, dst: str, proto: int, payload_len: int, ident: int = 0) -> bytes:
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + payload_len, ident & 0xFFFF, 0x4000,
                      64, proto, 0, ipaddress.IPv4Address(src).packed,
                      ipaddress.IPv4Address(dst).packed)
    return hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]


def tcp_segment(src: str, dst: str, sport: int, dport: int, seq: int, ack: int,
                flags: int, payload: bytes = b"", window: int = 65535) -> bytes:
    hdr = struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      5 << 4, flags, window, 0, 0)
    pseudo = (ipaddress.IPv4Address(src).packed + ipaddress.IPv4Address(dst).packed
              + struct.pack("!BBH", 0, 6, len(hdr) + len(payload)))
    csum = _checksum(pseudo + hdr + payload)
    return hdr[:16] + struct.pack("!H", csum) + hdr[18:] + payload


def ethernet_frame(src_mac: str, dst_mac: str, ethertype: int, payload: bytes) -> bytes:
    return mac_bytes(dst_mac) + mac_bytes(src_mac) + struct.pack("!H", ethertype) + payload


def tcp_frame(src_mac: str, dst_mac: str, src: str, dst: str, sport: int, dport: int,
              seq: int, ack: int, flags: int, payload: bytes = b"", ident: int = 0) -> bytes:
    seg = tcp_segment(src, dst, sport, dport, seq, ack, flags, payload)
    return ethernet_frame(src_mac, dst_mac, ETH_P_IP, ipv4_header(src, dst, 6, len(seg), ident) + seg)


def udp_frame(src_mac: str, dst_mac: str, src: str, dst: str, sport: int, dport: int,
              payload: bytes = b"") -> bytes:
    seg = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    return ethernet_frame(src_mac, dst_mac, ETH_P_IP, ipv4_header(src, dst, 17, len(seg)) + seg)


def radiotap_data_frame(src_mac: str, dst_mac: str, bssid: str, to_ds: bool,
                        body_len: int) -> bytes:
    """Minimal protected 802.11 data frame behind an 8-byte radiotap header.

    ``body_len`` bytes of opaque ciphertext sit between the CCMP header and
    the MIC; the FCS is zero.
    """
    radiotap = struct.pack("<BBHI", 0, 0, 8, 0)
    fc = struct.pack("BB", 0x08, (0x01 if to_ds else 0x02) | 0x40)
    if to_ds:
        addrs = mac_bytes(bssid) + mac_bytes(src_mac) + mac_bytes(dst_mac)
    else:
        addrs = mac_bytes(dst_mac) + mac_bytes(bssid) + mac_bytes(src_mac)
    header = fc + b"\0\0" + addrs + b"\0\0"
    return radiotap + header + b"\0" * 8 + b"\xaa" * body_len + b"\0" * 8 + b"\0" * 4
