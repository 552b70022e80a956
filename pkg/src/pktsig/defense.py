"""Trace transforms that model padding/tunneling defenses, and their scoring.

Padding to the MTU is modeled by overwriting every length with the MTU:
the detectors used against padded traffic look only at directions and
timing, so this is exact for them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detection import (AdversaryMode, MatchEvent, Score, TruthEvent, detect, match_streams,
                        score_matches)
from .ingest import Direction, FlowKey, Kind, Mode, PacketMeta, reassemble_tcp
from .signature import (MatchBounds, PacketSpec, Signature, Strategy, bounds_for,
                        detection_window_ms)

TUNNEL = FlowKey(Mode.LAYER3, ("tunnel", 0), ("tunnel", 1), 0)
_ANY_LENGTH = 1 << 31
# minimum clearance between a dummy and any other event, seconds
DUMMY_GUARD_S = 0.5


class DefenseError(RuntimeError):
    pass


class DefenseStrategy(str, Enum):
    PAD_MTU_VPN = "PadMtuVpn"
    PAD_MTU_TLS_PER_CONN = "PadMtuTlsPerConn"
    PAD_MTU_HYBRID = "PadMtuHybrid"
    STP_VPN = "StpVpn"


@dataclass(frozen=True)
class DefenseConfig:
    strategy: DefenseStrategy = DefenseStrategy.PAD_MTU_VPN
    mtu: int = 1500
    vpn_header_c2s: int = 52
    vpn_header_s2c: int = 49
    dummies: int = 0
    seed: int = 0
    max_tries: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "strategy", DefenseStrategy(self.strategy))
        if self.mtu <= 0:
            raise ValueError("mtu must be positive")
        if self.vpn_header_c2s < 0 or self.vpn_header_s2c < 0:
            raise ValueError("header sizes must be >= 0")
        if self.dummies < 0:
            raise ValueError("dummy count must be >= 0")

    def header(self, d: Direction) -> int:
        return self.vpn_header_c2s if d is Direction.C2S else self.vpn_header_s2c


View = dict[FlowKey, list[PacketMeta]]


def _order(p: PacketMeta) -> tuple:
    return (p.ts, p.index)


def _tunnel(packets: Iterable[PacketMeta], length=None) -> View:
    out = [dataclasses.replace(p, flow=TUNNEL, length=p.length if length is None else length(p))
           for p in packets]
    out.sort(key=_order)
    return {TUNNEL: out}


def simulate_padding(packets: Sequence[PacketMeta], config: DefenseConfig,
                     hosts: Iterable[str] | None = None) -> View:
    """Flow view of a layer-3 capture after padding.

    VPN: every packet in one tunnel flow. TLS per connection: each
    connection's Application Data records. Hybrid: the Application Data of
    connections touching ``hosts`` (the target device) merged into one flow.
    """
    packets = list(packets)
    if any(p.flow.mode is not Mode.LAYER3 for p in packets):
        raise DefenseError("padding simulation needs a layer-3 capture")
    pad = lambda p: config.mtu  # noqa: E731
    if config.strategy in (DefenseStrategy.PAD_MTU_VPN, DefenseStrategy.STP_VPN):
        return _tunnel(packets, pad)
    conns = reassemble_tcp(packets)
    if config.strategy is DefenseStrategy.PAD_MTU_TLS_PER_CONN:
        view = {}
        for key, c in sorted(conns.items()):
            app = [dataclasses.replace(p, length=config.mtu) for p in c.payload
                   if p.kind is Kind.TLS_APP_DATA]
            if app:
                view[key] = app
        return view
    wanted = None if hosts is None else {h.lower() for h in hosts}
    merged = []
    for c in conns.values():
        if wanted is not None and c.client.lower() not in wanted and c.server.lower() not in wanted:
            continue
        merged.extend(p for p in c.payload if p.kind is Kind.TLS_APP_DATA)
    return _tunnel(merged, pad)


def direction_bounds(sig: Signature) -> MatchBounds:
    return MatchBounds(Strategy.EXACT, tuple(
        (tuple(PacketSpec(d, 0, _ANY_LENGTH) for d in s.directions),) for s in sig.sets))


def detect_direction_only(view: Mapping[FlowKey, Sequence[PacketMeta]], sig: Signature,
                          window_ms: int | None = None) -> list[MatchEvent]:
    """Occurrences of the signature's direction pattern, lengths ignored,
    with skip-over semantics inside each flow of the view."""
    if window_ms is None:
        window_ms = detection_window_ms(sig.duration_max_ms)
    return match_streams(view, sig, direction_bounds(sig), AdversaryMode.WIFI, window_ms)


# --- stochastic traffic padding -----------------------------------------------------

@dataclass
class StpResult:
    view: View
    truth: list[TruthEvent]
    dummy_templates: list[str]


def _template(sig: Signature, packets: Sequence[PacketMeta], truth: Sequence[TruthEvent],
              rng: np.random.Generator) -> list[PacketMeta]:
    """Packets of one real detected event of ``sig``, or a synthesized copy."""
    real = [e for e in truth if not e.dummy and e.label in sig.labels]
    if packets and real:
        found = detect(packets, [sig], AdversaryMode.WAN, Strategy.EXACT, merge_labels=False).matches
        inside = [m for m in found if any(e.start <= m.first_ts <= e.end for e in real)]
        if inside:
            m = inside[int(rng.integers(len(inside)))]
            return [p for s in m.sets for p in s]
    out, t = [], 0.0
    n = sig.total_packets
    step = sig.duration_max_ms / 1000 / max(1, n - 1)
    for s in sig.sets:
        lengths = s.variants[0] if s.variants else s.length_min
        for d, x in zip(s.directions, lengths):
            out.append(PacketMeta(t, x, d, TUNNEL, Kind.TLS_APP_DATA))
            t += step
    return out


def simulate_stp(packets: Sequence[PacketMeta], signatures: Sequence[Signature],
                 truth: Sequence[TruthEvent], config: DefenseConfig) -> StpResult:
    """Inject dummy events shaped like ``signatures`` and tunnel everything.

    Dummies take turns over the signatures, copy the packets of a real
    event, and start at uniformly random times over the capture span that
    keep clear of every real event and every other dummy. All packets then
    get the per-direction tunnel header and share one flow.
    """
    rng = np.random.default_rng(config.seed)
    packets = sorted(packets, key=_order)
    truth = sorted(truth, key=lambda e: e.start)
    if config.dummies and not signatures:
        raise DefenseError("dummy injection needs at least one signature")
    busy = [(e.start, e.end) for e in truth]
    lo = packets[0].ts if packets else (truth[0].start if truth else 0.0)
    hi = packets[-1].ts if packets else (truth[-1].end if truth else 0.0)
    templates = {s.id: _template(s, packets, truth, rng) for s in signatures}
    next_index = max((p.index for p in packets), default=-1) + 1
    extra, dummies, names = [], [], []
    for i in range(config.dummies):
        sig = signatures[i % len(signatures)]
        tpl = templates[sig.id]
        dur = tpl[-1].ts - tpl[0].ts
        for _ in range(config.max_tries):
            # microsecond grid, like capture timestamps
            start = round(float(rng.uniform(lo, max(lo, hi - dur))), 6)
            end = round(start + dur, 6)
            if all(end + DUMMY_GUARD_S < a or start - DUMMY_GUARD_S > b for a, b in busy):
                break
        else:
            raise DefenseError(f"could not place dummy {i + 1} of {config.dummies} "
                               f"after {config.max_tries} tries")
        busy.append((start, end))
        for p in tpl:
            extra.append(dataclasses.replace(p, ts=round(start + (p.ts - tpl[0].ts), 6),
                                             index=next_index, retransmission=False))
            next_index += 1
        dummies.append(TruthEvent(start, end, sig.labels[0], True))
        names.append(sig.id)
    view = _tunnel(list(packets) + extra, lambda p: p.length + config.header(p.direction))
    merged = sorted(list(truth) + dummies, key=lambda e: e.start)
    return StpResult(view, merged, names)


def detect_tunnel(view: Mapping[FlowKey, Sequence[PacketMeta]], signatures: Sequence[Signature],
                  config: DefenseConfig, strategy: Strategy = Strategy.EXACT) -> list[MatchEvent]:
    """Length-aware detection on a tunnel view with header-shifted signatures."""
    out = []
    for sig in signatures:
        shifted = sig.shifted(config.vpn_header_c2s, config.vpn_header_s2c)
        bounds = bounds_for(shifted, strategy, peers=[s.shifted(config.vpn_header_c2s,
                                                                config.vpn_header_s2c)
                                                        for s in signatures if s is not sig])
        for m in match_streams(view, shifted, bounds, AdversaryMode.WIFI):
            out.append(dataclasses.replace(m, label=sig.label))
    out.sort(key=lambda m: (m.first_ts, m.signature_id))
    return out


# --- scoring ----------------------------------------------------------------------

@dataclass
class DefenseReport:
    strategy: str
    score: Score
    flows: int
    packets: int

    def to_dict(self) -> dict:
        d = {"strategy": self.strategy, "flows": self.flows, "packets": self.packets}
        d.update(self.score.to_dict())
        return d

    def summary(self) -> str:
        s = self.score
        return (f"{self.strategy}: {s.positives} positives for {s.events} events "
                f"(ratio {s.ratio:.2f}), TP {s.true_positives}, FP {s.false_positives}, "
                f"recall {s.recall:.2f}, FP/100 {s.fp_per_100:.2f}")


def score_defense(matches: Sequence[MatchEvent], truth: Sequence[TruthEvent],
                  use_labels: bool = False) -> Score:
    """Recall, FP per 100 events and positives per true event.

    Direction-only detectors cannot tell ON from OFF, so labels are ignored
    unless asked for.
    """
    return score_matches(matches, truth, use_labels=use_labels)


def run_defense(packets: Sequence[PacketMeta], signatures: Sequence[Signature],
                truth: Sequence[TruthEvent], config: DefenseConfig,
                hosts: Iterable[str] | None = None) -> DefenseReport:
    if config.strategy is DefenseStrategy.STP_VPN:
        res = simulate_stp(packets, signatures, truth, config)
        matches = detect_tunnel(res.view, signatures, config)
        score = score_defense(matches, res.truth, use_labels=True)
        view = res.view
    else:
        view = simulate_padding(packets, config, hosts)
        matches = []
        seen_shapes = set()
        for sig in signatures:
            # same direction pattern means same positives; count it once
            if sig.shape() in seen_shapes:
                continue
            seen_shapes.add(sig.shape())
            matches.extend(detect_direction_only(view, sig))
        score = score_defense(matches, truth)
    return DefenseReport(config.strategy.value, score, len(view),
                         sum(len(v) for v in view.values()))
