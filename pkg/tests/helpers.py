"""Packet and trace builders shared by the tests."""

from __future__ import annotations

import random

from pktsig.ingest import Direction, FlowKey, Kind, PacketMeta
from pktsig.signature import MatchBounds, PacketSpec, SetDescriptor, Signature, Strategy

DEV_IP, CLOUD_IP = "192.0.2.10", "198.51.100.1"
DEV_MAC, ROUTER_MAC = "02:00:00:00:00:10", "02:00:00:00:00:01"

C, S = Direction.C2S, Direction.S2C


def flow(port: int = 40000) -> FlowKey:
    return FlowKey.layer3(DEV_IP, port, CLOUD_IP, 443)


def pkt(index: int, ts: float, d, length: int, port: int = 40000,
        kind: Kind = Kind.TLS_APP_DATA, seq: int | None = None) -> PacketMeta:
    d = Direction(d)
    src, dst = (DEV_IP, CLOUD_IP) if d is C else (CLOUD_IP, DEV_IP)
    return PacketMeta(ts=ts, length=length, direction=d, flow=flow(port), kind=kind, index=index,
                      src=src, dst=dst, seq=seq, link=FlowKey.layer2(DEV_MAC, ROUTER_MAC))


def seq_stream(spec, port: int = 40000, start_index: int = 0):
    """Layer-3 packets with in-order sequence numbers from (ts, dir, len) tuples."""
    nxt = {C: 1000, S: 50000}
    out = []
    for i, (ts, d, length) in enumerate(spec):
        d = Direction(d)
        out.append(pkt(start_index + i, ts, d, length, port, seq=nxt[d]))
        nxt[d] += length
    return out


def random_case(rng: random.Random, max_packets: int = 500, max_flows: int = 3):
    """Random flows over a small length alphabet and a random 2-4 packet signature."""
    alphabet = [100, 110, 200, 300]
    nflows = rng.randint(1, max_flows)
    total = rng.randint(0, max_packets)
    streams: dict = {}
    t = 1.0
    for i in range(total):
        t += rng.choice([0.001, 0.005, 0.02, 0.05])
        f = flow(40000 + rng.randrange(nflows))
        d = rng.choice([C, S])
        streams.setdefault(f, []).append(
            PacketMeta(round(t, 6), rng.choice(alphabet), d, f, Kind.TLS_APP_DATA, index=i))
    tot = rng.randint(2, 4)
    k = rng.randint(1, min(3, tot))
    cuts = sorted(rng.sample(range(1, tot), k - 1))
    sets = []
    for size in (b - a for a, b in zip([0] + cuts, cuts + [tot])):
        dirs = [rng.choice([C, S]) for _ in range(size)]
        variants = tuple(
            tuple(PacketSpec(d, *sorted([rng.choice(alphabet), rng.choice(alphabet)])) for d in dirs)
            for _ in range(rng.randint(1, 2)))
        sets.append(variants)
    bounds = MatchBounds(Strategy.RANGE, tuple(sets))
    sig = Signature("rand", "dev", "E", tuple(
        SetDescriptor(tuple(p.direction for p in v[0]), tuple(p.lo for p in v[0]),
                      tuple(p.hi for p in v[0])) for v in sets), 100)
    window_ms = rng.choice([10, 50, 100, 300])
    return streams, sig, bounds, window_ms


def indices(matches):
    return [tuple(tuple(p.index for p in s) for s in m.sets) for m in matches]
