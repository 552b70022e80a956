import io
import struct

import dpkt
import pytest
from hypothesis import given, strategies as st

from pktsig import pcap


def _capture(frames, endian="<", linktype=pcap.LINKTYPE_ETHERNET):
    buf = io.BytesIO()
    w = pcap.PcapWriter(buf, linktype=linktype, endian=endian)
    for ts, frame in frames:
        w.write(ts, frame)
    return buf.getvalue()


def _frame(payload=b"hello", flags=pcap.TCP_ACK | pcap.TCP_PSH):
    return pcap.tcp_frame("02:00:00:00:00:10", "02:00:00:00:00:01", "192.0.2.10", "198.51.100.1",
                          40000, 443, 1000, 7, flags, payload)


@pytest.mark.parametrize("endian", ["<", ">"])
def test_round_trip_both_byte_orders(endian):
    frames = [(1.5, _frame(b"a" * 10)), (2.000001, _frame(b""))]
    reader = pcap.PcapReader(io.BytesIO(_capture(frames, endian)))
    recs = list(reader)
    assert reader.endian == endian
    assert [r.data for r in recs] == [f for _, f in frames]
    assert [r.ts_usec for r in recs] == [500000, 1]
    assert reader.truncated == 0


def test_frames_agree_with_dpkt():
    raw = _capture([(1.0, _frame(b"\x17\x03\x03payload"))])
    (ts, buf), = list(dpkt.pcap.Reader(io.BytesIO(raw)))
    eth = dpkt.ethernet.Ethernet(buf)
    ip, tcp = eth.data, eth.data.data
    assert ts == pytest.approx(1.0)
    assert ip.len == 20 + 20 + 10
    assert (tcp.sport, tcp.dport, tcp.seq) == (40000, 443, 1000)
    assert bytes(tcp.data) == b"\x17\x03\x03payload"
    # checksums as dpkt would compute them
    assert ip.sum == dpkt.ip.IP(bytes(ip)).sum
    assert tcp.sum != 0


def test_nanosecond_capture_rejected():
    header = struct.pack("<IHHiIII", pcap.MAGIC_NSEC, 2, 4, 0, 0, 65535, 1)
    with pytest.raises(pcap.PcapError, match="nanosecond"):
        pcap.PcapReader(io.BytesIO(header))


def test_bad_magic_and_short_header():
    with pytest.raises(pcap.PcapError):
        pcap.PcapReader(io.BytesIO(b"\0" * 24))
    with pytest.raises(pcap.PcapError):
        pcap.PcapReader(io.BytesIO(b"\xd4\xc3"))


def test_truncated_record_counted_and_reading_stops():
    raw = _capture([(1.0, _frame()), (2.0, _frame())])
    reader = pcap.PcapReader(io.BytesIO(raw[:-5]))
    assert len(list(reader)) == 1
    assert reader.truncated == 1


def test_radiotap_frame_layout():
    body = 100
    frame = pcap.radiotap_data_frame("02:00:00:00:00:10", "02:00:00:00:00:02",
                                     "02:00:00:00:00:01", True, body)
    assert len(frame) == 8 + 24 + 8 + body + 8 + 4
    rt = dpkt.radiotap.Radiotap(frame)
    assert rt.length == 8
    wlan = dpkt.ieee80211.IEEE80211(frame[8:])
    assert wlan.type == dpkt.ieee80211.DATA_TYPE


@given(st.lists(st.tuples(st.integers(0, 2**31), st.integers(0, 999_999),
                          st.binary(min_size=0, max_size=64)), max_size=20),
       st.sampled_from(["<", ">"]))
def test_writer_reader_round_trip_property(recs, endian):
    frames = [(sec + usec / 1e6, data) for sec, usec, data in recs]
    back = list(pcap.PcapReader(io.BytesIO(_capture(frames, endian))))
    assert [(r.ts_sec, r.ts_usec, r.data) for r in back] == [(s, u, d) for s, u, d in recs]
