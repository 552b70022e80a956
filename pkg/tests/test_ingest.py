import dataclasses
import io

import dpkt
import pytest
from hypothesis import given, strategies as st

from helpers import C, S, pkt, seq_stream
from pktsig import pcap
from pktsig.ingest import (CommClass, Direction, EndpointRoster, FlowKey, Kind, Mode, ParseStats,
                           classify_tls, comm_class, infer_direction, layer2_view, map_to_layer2,
                           mark_retransmissions, parse_capture, payload_streams, reassemble_tcp,
                           write_capture)

DEV, PHONE, CLOUD = "192.0.2.10", "192.0.2.20", "198.51.100.1"
ROSTER = EndpointRoster(frozenset({DEV}), frozenset({PHONE}))


def _write(tmp_path, frames, linktype=pcap.LINKTYPE_ETHERNET, name="c.pcap"):
    path = tmp_path / name
    with open(path, "wb") as f:
        w = pcap.PcapWriter(f, linktype=linktype)
        for ts, frame in frames:
            w.write(ts, frame)
    return path


def _seg(src, dst, sport, dport, payload, seq=1000, flags=pcap.TCP_ACK | pcap.TCP_PSH):
    return pcap.tcp_frame("02:00:00:00:00:10", "02:00:00:00:00:01", src, dst, sport, dport,
                          seq, 0, flags, payload)


# --- direction, classification, offsets ----------------------------------------------

def test_direction_rules():
    assert infer_direction(DEV, CLOUD, ROSTER) is Direction.C2S
    assert infer_direction(CLOUD, DEV, ROSTER) is Direction.S2C
    assert infer_direction(CLOUD, "203.0.113.9", ROSTER) is None
    # phone-device traffic: the phone is the client
    assert infer_direction(PHONE, DEV, ROSTER) is Direction.C2S
    assert infer_direction(DEV, PHONE, ROSTER) is Direction.S2C


def test_empty_roster_rejected():
    with pytest.raises(ValueError):
        infer_direction(DEV, CLOUD, EndpointRoster(frozenset()))


addr = st.sampled_from([DEV, PHONE, CLOUD, "192.0.2.11", "203.0.113.9"])


@given(addr, addr, st.booleans())
def test_direction_flips_under_swap(a, b, with_phone):
    roster = ROSTER if with_phone else EndpointRoster(frozenset({DEV, PHONE, "192.0.2.11"}))
    if a == b:
        return
    fwd, back = infer_direction(a, b, roster), infer_direction(b, a, roster)
    if fwd is None:
        assert back is None
    else:
        assert back is fwd.flipped()


def test_comm_class():
    assert comm_class(DEV, CLOUD, ROSTER) is CommClass.DEVICE_CLOUD
    assert comm_class(PHONE, CLOUD, ROSTER) is CommClass.PHONE_CLOUD
    assert comm_class(PHONE, DEV, ROSTER) is CommClass.PHONE_DEVICE


@pytest.mark.parametrize("head,kind", [
    (b"\x17\x03\x03", Kind.TLS_APP_DATA),
    (b"\x16\x03\x03", Kind.TCP_PAYLOAD),
    (b"GET", Kind.TCP_PAYLOAD),
    (b"\x17\x03", Kind.TCP_PAYLOAD),
])
def test_classify_tls(head, kind):
    assert classify_tls(head) is kind


@pytest.mark.parametrize("l3,offset,l2", [(556, 80, 636), (0, 0, 0), (1293, 80, 1373)])
def test_map_to_layer2(l3, offset, l2):
    assert map_to_layer2(l3, offset) == l2


def test_map_to_layer2_negative_offset():
    with pytest.raises(ValueError):
        map_to_layer2(10, -1)


def test_flow_key_is_direction_independent():
    assert FlowKey.layer3(DEV, 4000, CLOUD, 443) == FlowKey.layer3(CLOUD, 443, DEV, 4000)
    assert FlowKey.layer2("02:00:00:00:00:AA", "02:00:00:00:00:01") == \
        FlowKey.layer2("02:00:00:00:00:01", "02:00:00:00:00:aa")
    k = FlowKey.layer3(DEV, 4000, CLOUD, 443)
    assert FlowKey.from_json(k.to_json()) == k


def test_roster_file_formats(tmp_path):
    p = tmp_path / "r.json"
    p.write_text('["192.0.2.10", "02:00:00:00:00:10"]')
    assert EndpointRoster.load(p).is_local("02:00:00:00:00:10")
    ROSTER.dump(p)
    assert EndpointRoster.load(p) == ROSTER


# --- parsing ---------------------------------------------------------------------------

def test_empty_capture(tmp_path):
    assert list(parse_capture(_write(tmp_path, []), Mode.LAYER3, ROSTER)) == []


def test_single_segment_parsed_and_checked_against_dpkt(tmp_path):
    path = _write(tmp_path, [(1.000001, _seg(DEV, CLOUD, 40000, 80, b"x" * 556))])
    (p,) = list(parse_capture(path, Mode.LAYER3, ROSTER))
    assert (p.length, p.direction, p.kind, p.ts) == (556, Direction.C2S, Kind.TCP_PAYLOAD, 1.000001)
    with open(path, "rb") as f:
        (_, buf), = list(dpkt.pcap.Reader(f))
    assert len(dpkt.ethernet.Ethernet(buf).data.data.data) == p.length


def test_tls_record_header_classified(tmp_path):
    path = _write(tmp_path, [(1.0, _seg(CLOUD, DEV, 443, 40000, b"\x17\x03\x03\x05\x00" + b"z" * 1288))])
    (p,) = list(parse_capture(path, Mode.LAYER3, ROSTER))
    assert (p.length, p.direction, p.kind) == (1293, Direction.S2C, Kind.TLS_APP_DATA)


def test_non_tcp_and_foreign_traffic_excluded(tmp_path):
    udp = pcap.udp_frame("02:00:00:00:00:10", "02:00:00:00:00:01", DEV, CLOUD, 5353, 53, b"q")
    foreign = _seg(CLOUD, "203.0.113.9", 443, 40000, b"abc")
    stats = ParseStats()
    path = _write(tmp_path, [(1.0, udp), (2.0, foreign), (3.0, _seg(DEV, CLOUD, 1, 2, b""))])
    out = list(parse_capture(path, Mode.LAYER3, ROSTER, stats))
    assert len(out) == 1 and out[0].length == 0 and out[0].kind is Kind.OTHER
    assert (stats.non_tcp, stats.not_in_roster, stats.emitted) == (1, 1, 1)


def test_truncated_record_skipped_with_counter(tmp_path):
    path = _write(tmp_path, [(1.0, _seg(DEV, CLOUD, 1, 2, b"a")), (2.0, _seg(DEV, CLOUD, 1, 2, b"b"))])
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    stats = ParseStats()
    assert len(list(parse_capture(path, Mode.LAYER3, ROSTER, stats))) == 1
    assert stats.truncated == 1


def test_layer2_modes(tmp_path):
    roster = EndpointRoster(frozenset({"02:00:00:00:00:10"}))
    eth = _write(tmp_path, [(1.0, _seg(DEV, CLOUD, 1, 2, b"a" * 10))], name="e.pcap")
    (p,) = list(parse_capture(eth, Mode.LAYER2, roster))
    assert p.length == 14 + 20 + 20 + 10 and p.direction is Direction.C2S
    frame = pcap.radiotap_data_frame("02:00:00:00:00:10", "02:00:00:00:00:02",
                                     "02:00:00:00:00:01", True, 500)
    rt = _write(tmp_path, [(1.0, frame)], pcap.LINKTYPE_IEEE802_11_RADIOTAP, "w.pcap")
    (q,) = list(parse_capture(rt, Mode.LAYER2, roster))
    assert q.length == len(frame) and q.flow == FlowKey.layer2("02:00:00:00:00:10", "02:00:00:00:00:02")
    with pytest.raises(pcap.PcapError):
        list(parse_capture(rt, Mode.LAYER3, roster))


kinds = st.sampled_from([Kind.TLS_APP_DATA, Kind.TCP_PAYLOAD])


# TLS classification needs a 3-byte record header, hence the minimum length
@given(st.lists(st.tuples(st.sampled_from("CS"), st.integers(3, 1400), kinds), max_size=25),
       st.sampled_from(["<", ">"]))
def test_write_then_parse_round_trip(tmp_path_factory, spec, endian):
    path = tmp_path_factory.mktemp("rt") / "c.pcap"
    packets = [dataclasses.replace(pkt(i, 1.0 + i * 0.001, d, n, seq=None), kind=k)
               for i, (d, n, k) in enumerate(spec)]
    write_capture(path, packets, endian)
    back = list(parse_capture(path, Mode.LAYER3, ROSTER))
    assert [(p.ts, p.length, p.direction, p.kind) for p in back] == \
        [(p.ts, p.length, p.direction, p.kind) for p in packets]


# --- reassembly ----------------------------------------------------------------------

def test_in_order_stream_keeps_arrival_order():
    packets = seq_stream([(1.0, "C", 100), (1.1, "S", 200), (1.2, "C", 50)])
    (conn,) = reassemble_tcp(packets).values()
    assert [p.index for p in conn.payload] == [0, 1, 2]


def test_duplicate_segment_flagged():
    packets = seq_stream([(1.0 + i / 10, "C", 100) for i in range(5)])
    dup = dataclasses.replace(packets[1], ts=1.45, index=5)
    flagged = mark_retransmissions(packets + [dup])
    assert [p.retransmission for p in flagged] == [False] * 5 + [True]
    (conn,) = reassemble_tcp(packets + [dup]).values()
    # oracle: one payload packet per distinct sequence range
    assert len(conn.payload) == len({(p.seq, p.length) for p in packets + [dup]})


def test_out_of_order_segments_ordered_by_sequence():
    a, b, c = seq_stream([(1.0, "C", 100), (1.1, "C", 100), (1.2, "C", 100)])
    late = dataclasses.replace(b, ts=1.3)
    (conn,) = reassemble_tcp([a, c, late]).values()
    assert [p.index for p in conn.payload] == [0, 1, 2]
    # delivery time: c cannot be handed over before b arrives
    assert [p.ts for p in conn.payload] == [1.0, 1.3, 1.3]


def test_partial_overlap_is_not_retransmission():
    a, b = seq_stream([(1.0, "C", 100), (1.1, "C", 100)])
    overlap = dataclasses.replace(b, seq=b.seq - 50, length=200, index=2, ts=1.2)
    assert not mark_retransmissions([a, b, overlap])[2].retransmission


def test_interleaved_connections_split():
    one = seq_stream([(1.0, "C", 10), (1.2, "S", 20)], port=1)
    two = seq_stream([(1.1, "C", 30), (1.3, "S", 40)], port=2, start_index=2)
    conns = reassemble_tcp(sorted(one + two, key=lambda p: p.ts))
    assert sorted(len(c.payload) for c in conns.values()) == [2, 2]
    for c in conns.values():
        assert len({p.flow for p in c.payload}) == 1


def test_payload_set_restricted_to_app_data_on_tls():
    packets = seq_stream([(1.0, "C", 300), (1.1, "S", 1200), (1.2, "C", 556), (1.3, "S", 1293)])
    packets[0] = dataclasses.replace(packets[0], kind=Kind.TCP_PAYLOAD)
    packets[1] = dataclasses.replace(packets[1], kind=Kind.TCP_PAYLOAD)
    (stream,) = payload_streams(packets).values()
    assert [p.length for p in stream] == [556, 1293]
    plain = [dataclasses.replace(p, kind=Kind.TCP_PAYLOAD) for p in packets]
    (stream,) = payload_streams(plain).values()
    assert len(stream) == 4


segments = st.lists(st.tuples(st.integers(0, 20), st.integers(1, 5)), min_size=1, max_size=30)


@given(segments)
def test_retransmission_filter_idempotent(spec):
    packets = [pkt(i, 1.0 + i * 0.01, "C", n * 10, seq=1000 + off * 10) for i, (off, n) in enumerate(spec)]
    once = mark_retransmissions(packets)
    assert mark_retransmissions(once) == once


@given(segments)
def test_payload_is_subsequence_and_time_ordered(spec):
    packets = [pkt(i, 1.0 + i * 0.01, "CS"[i % 2], n * 10, seq=1000 + off * 10)
               for i, (off, n) in enumerate(spec)]
    for conn in reassemble_tcp(packets).values():
        it = iter(conn.packets)
        assert all(any(p is q for q in it) for p in conn.payload)
        ts = [p.ts for p in conn.packets]
        assert ts == sorted(ts)


def test_layer2_view_lengthens_every_frame():
    packets = seq_stream([(1.0, "C", 556), (1.1, "S", 1293)])
    ack = dataclasses.replace(packets[0], length=0, kind=Kind.OTHER, index=2, ts=1.2)
    view = layer2_view(packets + [ack])
    assert [p.length for p in view] == [636, 1373, 80]
    assert {p.flow.mode for p in view} == {Mode.LAYER2}
