"""Synthetic ground-truth captures: templated device events plus background.

Addresses come from the documentation ranges (192.0.2.0/24 for the home,
198.51.100.0/24 for event servers, 203.0.113.0/24 for background servers),
so fixtures never collide with real hosts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pcap
from .detection import TruthEvent
from .ingest import (CommClass, Direction, EndpointRoster, FlowKey, Kind, PacketMeta,
                     write_capture)
from .signature import parse_sequence
from .training import Event, EventLog

ROUTER_MAC = "02:00:00:00:00:01"
DEVICE = ("192.0.2.10", "02:00:00:00:00:10")
PHONE = ("192.0.2.20", "02:00:00:00:00:20")


def _other_host(i: int) -> tuple[str, str]:
    return f"192.0.2.{30 + i}", f"02:00:00:00:00:{0x30 + i:02x}"


def _event_server(i: int) -> str:
    return f"198.51.100.{10 + i}"


def _bg_server(i: int) -> str:
    return f"203.0.113.{10 + i}"


# --- profile ----------------------------------------------------------------

@dataclass(frozen=True)
class PacketTemplate:
    direction: Direction
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo < 1 or self.hi < self.lo:
            raise ValueError(f"bad template length [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class ExchangeTemplate:
    """One TCP connection's application packets within an event."""

    packets: tuple[PacketTemplate, ...]
    comm_class: CommClass = CommClass.DEVICE_CLOUD
    tls: bool = True
    server: int = 0

    @classmethod
    def parse(cls, text: str, comm_class: CommClass = CommClass.DEVICE_CLOUD, tls: bool = True,
              server: int = 0) -> ExchangeTemplate:
        desc = parse_sequence(text)
        pk = tuple(PacketTemplate(d, lo, hi)
                   for d, lo, hi in zip(desc.directions, desc.length_min, desc.length_max))
        return cls(pk, CommClass(comm_class), tls, server)

    def notation(self) -> str:
        return " ".join(f"{p.direction.value}-{p.lo}" if p.lo == p.hi
                        else f"{p.direction.value}-[{p.lo}-{p.hi}]" for p in self.packets)


@dataclass(frozen=True)
class EventTemplate:
    label: str
    exchanges: tuple[ExchangeTemplate, ...]
    gap_ms: tuple[float, float] = (1.0, 50.0)
    delay_ms: tuple[float, float] = (50.0, 300.0)


@dataclass(frozen=True)
class BackgroundFlow:
    """Traffic unrelated to events.

    ``periodic``: one exchange every ``period_s`` on a persistent connection,
    opened by ``first`` ("C" request/reply, "S" server push then client ack).
    ``reqrep``: Poisson exchanges at ``rate_hz`` spread over ``connections``.
    ``bulk``: every ``period_s`` a request followed by ``burst`` full segments.
    """

    kind: str
    host: str = "other"
    tls: bool = False
    period_s: float = 5.0
    rate_hz: float = 1.0
    request: tuple[int, int] = (60, 400)
    reply: tuple[int, int] = (60, 1400)
    connections: int = 1
    burst: int = 20
    first: str = "C"
    phase_s: float = 0.0

    def __post_init__(self):
        if self.kind not in ("periodic", "reqrep", "bulk"):
            raise ValueError(f"unknown background kind {self.kind!r}")
        if self.host not in ("device", "phone", "other") and not self.host.startswith("other"):
            raise ValueError(f"unknown background host {self.host!r}")


@dataclass(frozen=True)
class TraceProfile:
    device: str
    events: tuple[EventTemplate, ...]
    n_per_label: int = 50
    spacing_s: float = 131.0
    window_t: float = 15.0
    background: tuple[BackgroundFlow, ...] = ()
    jitter_s: float = 0.0
    start_ts: float = 1_600_000_000.0
    avoid_margin: int = 25
    acks: bool = True

    def __post_init__(self):
        if self.spacing_s <= 2 * self.window_t:
            raise ValueError("event spacing must exceed twice the training window")
        if self.n_per_label < 0:
            raise ValueError("n_per_label must be >= 0")
        labels = [e.label for e in self.events]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate event labels")

    def to_dict(self) -> dict:
        return {
            "device": self.device,
            "n_per_label": self.n_per_label,
            "spacing_s": self.spacing_s,
            "window_t": self.window_t,
            "jitter_s": self.jitter_s,
            "start_ts": self.start_ts,
            "avoid_margin": self.avoid_margin,
            "acks": self.acks,
            "events": [{"label": e.label, "gap_ms": list(e.gap_ms), "delay_ms": list(e.delay_ms),
                        "exchanges": [{"packets": x.notation(), "comm_class": x.comm_class.value,
                                       "tls": x.tls, "server": x.server} for x in e.exchanges]}
                       for e in self.events],
            "background": [{k: (list(v) if isinstance(v, tuple) else v)
                            for k, v in dataclasses.asdict(b).items()} for b in self.background],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> TraceProfile:
        events = []
        for e in obj["events"]:
            exch = tuple(ExchangeTemplate.parse(x["packets"], CommClass(x.get("comm_class", "device-cloud")),
                                                x.get("tls", True), x.get("server", 0))
                         for x in e["exchanges"])
            events.append(EventTemplate(e["label"], exch, tuple(e.get("gap_ms", (1.0, 50.0))),
                                        tuple(e.get("delay_ms", (50.0, 300.0)))))
        bg = []
        for b in obj.get("background", []):
            b = dict(b)
            for k in ("request", "reply"):
                if k in b:
                    b[k] = tuple(b[k])
            bg.append(BackgroundFlow(**b))
        kw = {k: obj[k] for k in ("n_per_label", "spacing_s", "window_t", "jitter_s", "start_ts",
                                  "avoid_margin", "acks") if k in obj}
        return cls(obj["device"], tuple(events), background=tuple(bg), **kw)

    @classmethod
    def load(cls, path: str | Path) -> TraceProfile:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def tplink_profile(n_per_label: int = 50, spacing_s: float = 131.0, window_t: float = 15.0,
                   background: Sequence[BackgroundFlow] = ()) -> TraceProfile:
    return TraceProfile(
        "tplink-plug",
        (EventTemplate("ON", (ExchangeTemplate.parse("C-556 S-1293"),)),
         EventTemplate("OFF", (ExchangeTemplate.parse("C-557 S-1294"),))),
        n_per_label, spacing_s, window_t, tuple(background))


def arlo_profile(n_per_label: int = 50, spacing_s: float = 131.0, window_t: float = 15.0,
                 background: Sequence[BackgroundFlow] = ()) -> TraceProfile:
    pc = CommClass.PHONE_CLOUD
    return TraceProfile(
        "arlo-camera",
        (EventTemplate("STREAM_ON", (
            ExchangeTemplate.parse("C-[338-339] S-[326-329] C-[364-365] S-[1061-1070]", pc),
            ExchangeTemplate.parse("C-[271-273] S-[499-505]", pc, server=1)), gap_ms=(1.0, 25.0)),
         EventTemplate("STREAM_OFF", (ExchangeTemplate.parse("C-[445-449] S-442", pc),))),
        n_per_label, spacing_s, window_t, tuple(background))


def tplink_dense_profile(n_per_label: int = 50, spacing_s: float = 3.0, window_t: float = 1.0,
                         rate_hz: float = 50.0) -> TraceProfile:
    """TP-Link events under heavy request/reply chatter from another host,
    plus two server-push TLS flows on the plug itself."""
    background = (
        BackgroundFlow("reqrep", "other", tls=False, rate_hz=rate_hz, connections=8),
        BackgroundFlow("periodic", "device", tls=True, period_s=1.0, first="S", phase_s=0.0),
        BackgroundFlow("periodic", "device", tls=True, period_s=1.0, first="S", phase_s=0.1),
    )
    return tplink_profile(n_per_label, spacing_s, window_t, background)


BUILTIN_PROFILES = {"tplink": tplink_profile, "arlo": arlo_profile,
                    "tplink-dense": tplink_dense_profile}


# --- generated trace ------------------------------------------------------------------

@dataclass
class TruthRecord:
    label: str
    trigger: float
    start: float
    end: float
    packets: list[int] = field(default_factory=list)
    dummy: bool = False

    def as_truth_event(self) -> TruthEvent:
        return TruthEvent(self.trigger, self.end, self.label, self.dummy)


@dataclass
class SynthTrace:
    packets: list[PacketMeta]
    events: EventLog
    truth: list[TruthRecord]
    roster: EndpointRoster
    household: dict
    profile: TraceProfile | None = None
    noise: list[str] = field(default_factory=list)

    def truth_events(self) -> list[TruthEvent]:
        return [t.as_truth_event() for t in self.truth]

    def truth_dict(self) -> dict:
        return {"device": self.household["device"]["name"],
                "device_ip": self.household["device"]["ip"],
                "events": [dataclasses.asdict(t) for t in self.truth],
                "noise": list(self.noise)}


class _Builder:
    """Accumulates packets of many TCP connections."""

    def __init__(self, rng: np.random.Generator, acks: bool, avoid: list[tuple[int, int]]):
        self.rng = rng
        self.acks = acks
        self.avoid = avoid
        self.packets: list[PacketMeta] = []
        self.next_port = 40000
        self.seq: dict[tuple, int] = {}

    def length(self, lo: int, hi: int) -> int:
        for _ in range(200):
            x = int(self.rng.integers(lo, hi + 1))
            if not any(a <= x <= b for a, b in self.avoid):
                return x
        raise ValueError(f"cannot draw a length in [{lo}, {hi}] outside the avoided ranges")

    def open(self, client: tuple[str, str], server: tuple[str, str], port: int, ts: float,
             tls: bool) -> tuple[dict, float]:
        cport = self.next_port
        self.next_port += 1
        conn = {"client": client, "server": server, "cport": cport, "sport": port,
                "flow": FlowKey.layer3(client[0], cport, server[0], port),
                "link": FlowKey.layer2(client[1], server[1])}
        for side in ("C", "S"):
            self.seq[(cport, side)] = int(self.rng.integers(0, 2**32))
        rtt = float(self.rng.uniform(0.001, 0.005))
        self.emit(conn, "C", ts, 0, pcap.TCP_SYN)
        self.emit(conn, "S", ts + rtt / 2, 0, pcap.TCP_SYN | pcap.TCP_ACK)
        self.emit(conn, "C", ts + rtt, 0, pcap.TCP_ACK)
        t = ts + rtt
        if tls:
            t += 0.0005
            self.emit(conn, "C", t, self.length(180, 320), kind=Kind.TCP_PAYLOAD)
            t += rtt / 2
            self.emit(conn, "S", t, self.length(1000, 1400), kind=Kind.TCP_PAYLOAD)
            t += 0.0005
            self.emit(conn, "C", t, self.length(60, 160), kind=Kind.TCP_PAYLOAD)
        return conn, t

    def emit(self, conn: dict, side: str, ts: float, length: int, flags: int | None = None,
             kind: Kind = Kind.OTHER, ack: bool = False) -> PacketMeta:
        c, s = conn["client"], conn["server"]
        src, dst = (c, s) if side == "C" else (s, c)
        key = (conn["cport"], side)
        syn = flags is not None and flags & pcap.TCP_SYN
        seq = self.seq[key]
        self.seq[key] = (seq + length + (1 if syn else 0)) & 0xFFFFFFFF
        if flags is None:
            flags = pcap.TCP_ACK | (pcap.TCP_PSH if length else 0)
        p = PacketMeta(ts=round(ts, 6), length=length, direction=Direction(side), flow=conn["flow"],
                       kind=kind if length else Kind.OTHER, src=src[0], dst=dst[0], seq=seq,
                       flags=flags, link=FlowKey.layer2(src[1], dst[1]))
        self.packets.append(p)
        if length and self.acks and not ack:
            other = "S" if side == "C" else "C"
            self.emit(conn, other, ts + float(self.rng.uniform(0.0001, 0.0005)), 0, ack=True)
        return p


def _household(n_other: int, device: str) -> dict:
    return {
        "device": {"name": device, "ip": DEVICE[0], "mac": DEVICE[1]},
        "phone": {"ip": PHONE[0], "mac": PHONE[1]},
        "router": {"mac": ROUTER_MAC},
        "others": [{"ip": ip, "mac": mac} for ip, mac in (_other_host(i) for i in range(n_other))],
    }


def _roster(household: dict) -> EndpointRoster:
    local = {household["device"]["ip"], household["device"]["mac"]}
    for o in household["others"]:
        local |= {o["ip"], o["mac"]}
    phone = {household["phone"]["ip"], household["phone"]["mac"]}
    return EndpointRoster(frozenset(local), frozenset(phone))


def _finalize(packets: list[PacketMeta]) -> tuple[list[PacketMeta], dict[int, int]]:
    """Sort by time (stable) and number packets; returns old-id -> new index."""
    order = sorted(range(len(packets)), key=lambda i: (packets[i].ts, i))
    out, remap = [], {}
    for new, old in enumerate(order):
        out.append(dataclasses.replace(packets[old], index=new))
        remap[old] = new
    return out, remap


def _avoid_ranges(profile: TraceProfile) -> list[tuple[int, int]]:
    m = profile.avoid_margin
    return [(max(0, p.lo - m), p.hi + m) for e in profile.events for x in e.exchanges
            for p in x.packets]


def _endpoints(comm: CommClass, server: int) -> tuple[tuple[str, str], tuple[str, str]]:
    cloud = (_event_server(server), ROUTER_MAC)
    if comm is CommClass.PHONE_CLOUD:
        return (PHONE[0], PHONE[1]), cloud
    if comm is CommClass.PHONE_DEVICE:
        return (PHONE[0], PHONE[1]), (DEVICE[0], DEVICE[1])
    return (DEVICE[0], DEVICE[1]), cloud


def _host(name: str) -> tuple[str, str]:
    if name == "device":
        return DEVICE
    if name == "phone":
        return PHONE
    return _other_host(int(name[5:] or 0))


def _n_other(profile: TraceProfile) -> int:
    ids = [int(b.host[5:] or 0) for b in profile.background if b.host.startswith("other")]
    return max(ids) + 1 if ids else 0


def generate(profile: TraceProfile, seed: int = 0) -> SynthTrace:
    """Build a capture, its event log and the exact expected matches."""
    rng = np.random.default_rng(seed)
    b = _Builder(rng, profile.acks, _avoid_ranges(profile))
    order = [e for _ in range(profile.n_per_label) for e in profile.events]
    span = len(order) * profile.spacing_s
    log_entries, pending = [], []
    for k, tpl in enumerate(order):
        trigger = profile.start_ts + k * profile.spacing_s + 1.0
        if profile.jitter_s:
            trigger += float(rng.uniform(0, profile.jitter_s))
        trigger = round(trigger, 6)
        t = trigger + float(rng.uniform(*tpl.delay_ms)) / 1000
        ids, start = [], None
        for x in tpl.exchanges:
            client, server = _endpoints(x.comm_class, x.server)
            conn, t = b.open(client, server, 443, t, x.tls)
            for i, pt in enumerate(x.packets):
                t += float(rng.uniform(*tpl.gap_ms)) / 1000
                length = int(rng.integers(pt.lo, pt.hi + 1))
                ids.append(len(b.packets))
                p = b.emit(conn, pt.direction.value, t, length,
                           kind=Kind.TLS_APP_DATA if x.tls else Kind.TCP_PAYLOAD)
                start = p.ts if start is None else start
            t += float(rng.uniform(*tpl.gap_ms)) / 1000
        log_entries.append(Event(trigger, tpl.label))
        pending.append(TruthRecord(tpl.label, trigger, start, b.packets[ids[-1]].ts, ids))
    end = profile.start_ts + span + 1.0
    for bg in profile.background:
        _background(b, bg, profile.start_ts, end)
    packets, remap = _finalize(b.packets)
    for t in pending:
        t.packets = sorted(remap[i] for i in t.packets)
    hh = _household(_n_other(profile), profile.device)
    return SynthTrace(packets, EventLog(log_entries), pending, _roster(hh), hh, profile)


def _background(b: _Builder, bg: BackgroundFlow, t0: float, t1: float) -> None:
    rng = b.rng
    host = _host(bg.host)
    kind = Kind.TLS_APP_DATA if bg.tls else Kind.TCP_PAYLOAD
    conns = []
    for i in range(max(1, bg.connections)):
        server = (_bg_server((b.next_port - 40000) % 200), ROUTER_MAC)
        conn, _ = b.open(host, server, 443 if bg.tls else 80, t0 + bg.phase_s + 0.01 * i, bg.tls)
        conns.append(conn)
    start = t0 + bg.phase_s + 0.5
    if bg.kind == "periodic":
        second = "S" if bg.first == "C" else "C"
        for t in np.arange(start, t1, bg.period_s):
            conn = conns[0]
            a, z = (bg.request, bg.reply) if bg.first == "C" else (bg.reply, bg.request)
            b.emit(conn, bg.first, float(t), b.length(*a), kind=kind)
            b.emit(conn, second, float(t) + float(rng.uniform(0.005, 0.03)), b.length(*z), kind=kind)
    elif bg.kind == "reqrep":
        t = start
        while True:
            t += float(rng.exponential(1.0 / bg.rate_hz))
            if t >= t1:
                break
            conn = conns[int(rng.integers(len(conns)))]
            b.emit(conn, "C", t, b.length(*bg.request), kind=kind)
            b.emit(conn, "S", t + float(rng.uniform(0.001, 0.02)), b.length(*bg.reply), kind=kind)
    else:
        for t in np.arange(start, t1, bg.period_s):
            conn = conns[0]
            b.emit(conn, "C", float(t), b.length(*bg.request), kind=kind)
            u = float(t) + 0.01
            for _ in range(bg.burst):
                b.emit(conn, "S", u, 1448, kind=kind)
                u += 0.0002


# --- noise ------------------------------------------------------------------------

NOISE_KINDS = ("retransmissions", "interleaved-flows", "off-window-chatter")


def inject_noise(trace: SynthTrace, kind: str, rate: float, seed: int = 0) -> SynthTrace:
    """Return a copy of ``trace`` with extra packets; expected matches are kept.

    ``retransmissions``: each payload segment is repeated with probability
    ``rate``. ``interleaved-flows``: about ``rate`` packets of an unrelated
    device connection land inside each event's packet span.
    ``off-window-chatter``: about ``rate`` copies of each event template are
    replayed between event windows.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    if rate < 0:
        raise ValueError("rate must be >= 0")
    rng = np.random.default_rng(seed)
    extra: list[PacketMeta] = []
    if kind == "retransmissions":
        for p in trace.packets:
            if p.length > 0 and rng.random() < rate:
                extra.append(dataclasses.replace(p, ts=round(p.ts + float(rng.uniform(0.0002, 0.0008)), 6)))
    else:
        avoid = _avoid_ranges(trace.profile) if trace.profile else []
        b = _Builder(rng, False, avoid)
        b.next_port = 50000
        if kind == "interleaved-flows":
            for t in trace.truth:
                conn, _ = b.open(DEVICE, (_bg_server(250), ROUTER_MAC), 80, t.trigger, False)
                for _ in range(int(rng.poisson(rate))):
                    ts = float(rng.uniform(t.start, t.end)) if t.end > t.start else t.start
                    side = "C" if rng.random() < 0.5 else "S"
                    b.emit(conn, side, ts, b.length(60, 1400), kind=Kind.TCP_PAYLOAD)
        else:
            if trace.profile is None:
                raise ValueError("off-window chatter needs the trace profile")
            window = trace.profile.window_t
            by_label = {e.label: e for e in trace.profile.events}
            gaps = [(a.trigger + window, z.trigger) for a, z in zip(trace.truth, trace.truth[1:])]
            for lo, hi in gaps:
                if hi - lo < 1.0:
                    continue
                for _ in range(int(rng.poisson(rate))):
                    tpl = by_label[trace.truth[int(rng.integers(len(trace.truth)))].label]
                    t = float(rng.uniform(lo + 0.2, hi - 0.8))
                    for x in tpl.exchanges:
                        client, server = _endpoints(x.comm_class, x.server)
                        conn, t = b.open(client, server, 443, t, x.tls)
                        for pt in x.packets:
                            t += float(rng.uniform(*tpl.gap_ms)) / 1000
                            b.emit(conn, pt.direction.value, t, int(rng.integers(pt.lo, pt.hi + 1)),
                                   kind=Kind.TLS_APP_DATA if x.tls else Kind.TCP_PAYLOAD)
        extra = b.packets
    n = len(trace.packets)
    packets, remap = _finalize(list(trace.packets) + extra)
    truth = [dataclasses.replace(t, packets=sorted(remap[i] for i in t.packets)) for t in trace.truth]
    return SynthTrace(packets, trace.events, truth, trace.roster, trace.household, trace.profile,
                      trace.noise + [f"{kind}:{rate}:{seed}:{len(packets) - n}"])


# --- files ----------------------------------------------------------------------------

def write_wifi_capture(path: str | Path, packets: Sequence[PacketMeta], household: dict,
                       offset: int = 80) -> None:
    """Write what a Wi-Fi sniffer records: one radiotap data frame per packet,
    ``length + offset`` bytes long."""
    bssid = household["router"]["mac"]
    overhead = len(pcap.radiotap_data_frame(bssid, bssid, bssid, True, 0))
    if offset < overhead:
        raise ValueError(f"layer-2 offset must be at least {overhead}")
    with open(path, "wb") as f:
        w = pcap.PcapWriter(f, linktype=pcap.LINKTYPE_IEEE802_11_RADIOTAP)
        for p in packets:
            src, dst = _mac_for(p.src, household), _mac_for(p.dst, household)
            to_ds = src != bssid
            w.write(p.ts, pcap.radiotap_data_frame(src, dst, bssid, to_ds, p.length + offset - overhead))


def _mac_for(ip: str, household: dict) -> str:
    for role in ("device", "phone"):
        if household[role]["ip"] == ip:
            return household[role]["mac"]
    for o in household["others"]:
        if o["ip"] == ip:
            return o["mac"]
    return household["router"]["mac"]


def write_trace(trace: SynthTrace, out_dir: str | Path, wifi: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("capture.pcap", "events.txt", "roster.json", "household.json", "truth.json")}
    write_capture(paths["capture.pcap"], trace.packets)
    paths["events.txt"].write_text(trace.events.dumps(), encoding="utf-8")
    trace.roster.dump(paths["roster.json"])
    paths["household.json"].write_text(json.dumps(trace.household, indent=2) + "\n", encoding="utf-8")
    paths["truth.json"].write_text(json.dumps(trace.truth_dict(), indent=2) + "\n", encoding="utf-8")
    if trace.profile is not None:
        paths["profile.json"] = out / "profile.json"
        trace.profile.dump(paths["profile.json"])
    if wifi:
        paths["capture-wifi.pcap"] = out / "capture-wifi.pcap"
        write_wifi_capture(paths["capture-wifi.pcap"], trace.packets, trace.household)
    return paths


def load_truth(path: str | Path) -> list[TruthEvent]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return [TruthEvent(e["trigger"], e["end"], e["label"], e.get("dummy", False))
            for e in obj["events"]]
