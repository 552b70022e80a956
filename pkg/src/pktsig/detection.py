"""Signature detection with per-flow state machines.

Each flow gets, per signature set and per accepted length variant, a small
pool of state machines (at most one per state). A machine whose next packet
matches advances; every advance leaves the pre-advance machine in place, and
an advancing machine replaces whatever already sits in the target state,
because its last packet is the later one. A mismatching packet resets a
partial match under WAN semantics and is skipped under Wi-Fi semantics. A
completed sequence clears all partial matches of that set in that flow, so
no packet counts twice.

Completed sequences of all flows then go, in stream order, to an assembler
that chains one sequence per set in set order and accepts the chain when it
fits the signature's detection window.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .ingest import (CommClass, FlowKey, Mode, PacketMeta, layer2_view, payload_streams)
from .signature import (DEFAULT_EPS, MatchBounds, Signature, Strategy, Variant, bounds_for,
                        detection_window_ms)


class ConfigurationError(ValueError):
    pass


class AdversaryMode(str, Enum):
    WAN = "wan"
    WIFI = "wifi"


class Outcome(str, Enum):
    ADVANCED = "advanced"
    IGNORED = "ignored"
    RESET = "reset"
    COMPLETED = "completed"


def _key(p: PacketMeta) -> tuple[int, int]:
    return (p.ts_us, p.index)


@dataclass
class SequenceMachine:
    spec: Variant
    set_index: int = 0
    flow: FlowKey | None = None
    state: int = 0
    recorded: list[PacketMeta] = field(default_factory=list)

    def copy(self) -> SequenceMachine:
        return SequenceMachine(self.spec, self.set_index, self.flow, self.state, list(self.recorded))


def advance(machine: SequenceMachine, packet: PacketMeta, mode: AdversaryMode) -> Outcome:
    """Present one packet of the machine's flow to the machine."""
    want = machine.spec[machine.state]
    if want.accepts(packet.direction, packet.length):
        machine.recorded.append(packet)
        machine.state += 1
        return Outcome.COMPLETED if machine.state == len(machine.spec) else Outcome.ADVANCED
    if mode is AdversaryMode.WAN:
        machine.state = 0
        machine.recorded.clear()
        return Outcome.RESET
    return Outcome.IGNORED


class MachinePool:
    """State machines for one sequence variant on one flow."""

    def __init__(self, spec: Variant, mode: AdversaryMode, set_index: int = 0,
                 flow: FlowKey | None = None):
        self.spec = spec
        self.mode = mode
        self.set_index = set_index
        self.flow = flow
        self.slots: dict[int, SequenceMachine] = {}

    def __len__(self) -> int:
        # the idle state-0 machine is implicit
        return len(self.slots) + 1

    def states(self) -> dict[int, tuple[PacketMeta, ...]]:
        return {s: tuple(m.recorded) for s, m in self.slots.items()}

    def clear(self) -> None:
        self.slots.clear()

    def _place(self, machine: SequenceMachine) -> None:
        existing = self.slots.get(machine.state)
        if existing is None or _key(machine.recorded[-1]) > _key(existing.recorded[-1]):
            self.slots[machine.state] = machine

    def feed(self, packet: PacketMeta) -> tuple[PacketMeta, ...] | None:
        """Spawn/advance/replace for one packet; returns a completed match."""
        done = None
        for state in sorted(self.slots, reverse=True):
            machine = self.slots[state]
            moved = machine.copy()
            outcome = advance(moved, packet, self.mode)
            if outcome is Outcome.COMPLETED:
                done = tuple(moved.recorded)
            elif outcome is Outcome.ADVANCED:
                self._place(moved)
            elif outcome is Outcome.RESET:
                del self.slots[state]
            if self.mode is AdversaryMode.WAN and outcome is not Outcome.IGNORED:
                # under WAN semantics the pre-advance copy did not see this
                # packet as its next one, so it cannot survive
                if self.slots.get(state) is machine:
                    del self.slots[state]
        fresh = SequenceMachine(self.spec, self.set_index, self.flow)
        outcome = advance(fresh, packet, self.mode)
        if outcome is Outcome.COMPLETED:
            done = done or tuple(fresh.recorded)
        elif outcome is Outcome.ADVANCED:
            self._place(fresh)
        return done


@dataclass(frozen=True)
class SequenceMatch:
    set_index: int
    variant: int
    packets: tuple[PacketMeta, ...]

    @property
    def start(self) -> tuple[int, int]:
        return _key(self.packets[0])

    @property
    def end(self) -> tuple[int, int]:
        return _key(self.packets[-1])


class SetMatcher:
    """All variants of one signature set on one flow."""

    def __init__(self, variants: Sequence[Variant], mode: AdversaryMode, set_index: int,
                 flow: FlowKey | None = None):
        self.set_index = set_index
        self.pools = [MachinePool(v, mode, set_index, flow) for v in variants]

    def feed(self, packet: PacketMeta) -> SequenceMatch | None:
        hits = [pool.feed(packet) for pool in self.pools]
        for v, rec in enumerate(hits):
            if rec is not None:
                for pool in self.pools:
                    pool.clear()
                return SequenceMatch(self.set_index, v, rec)
        return None


def match_sequences(stream: Sequence[PacketMeta], bounds: MatchBounds,
                    mode: AdversaryMode, flow: FlowKey | None = None) -> list[SequenceMatch]:
    matchers = [SetMatcher(variants, mode, i, flow) for i, variants in enumerate(bounds.sets)]
    out = []
    for p in stream:
        for m in matchers:
            hit = m.feed(p)
            if hit is not None:
                out.append(hit)
    return out


@dataclass(frozen=True)
class MatchEvent:
    signature_id: str
    label: str
    first_ts: float
    last_ts: float
    sets: tuple[tuple[PacketMeta, ...], ...]
    flows: tuple[FlowKey, ...]

    @property
    def packet_indices(self) -> tuple[int, ...]:
        return tuple(p.index for s in self.sets for p in s)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.label.split("/"))

    def to_dict(self) -> dict:
        return {"signature": self.signature_id, "label": self.label,
                "first_ts": round(self.first_ts, 6), "last_ts": round(self.last_ts, 6),
                "flows": [str(f) for f in self.flows],
                "packets": list(self.packet_indices)}


class MatchAssembler:
    """Chains sequence matches of a multi-set signature.

    Feed matches in order of their last packet. A match of the final set
    looks back for the latest usable match of each earlier set (each ending
    before the next one starts) such that the whole chain spans at most the
    detection window. Chains are consumed; older matches expire.
    """

    def __init__(self, sig: Signature, window_ms: int | None = None, label: str | None = None):
        self.sig = sig
        self.k = len(sig.sets)
        self.window_us = (detection_window_ms(sig.duration_max_ms) if window_ms is None
                          else window_ms) * 1000
        self.label = label or sig.label
        self.pending: list[list[SequenceMatch]] = [[] for _ in range(self.k)]
        self.flow_of: dict[int, FlowKey] = {}

    def _expire(self, now_us: int) -> None:
        for lst in self.pending:
            lst[:] = [m for m in lst if now_us - m.start[0] <= self.window_us]

    def _search(self, i: int, before: tuple[int, int], last_us: int) -> list[SequenceMatch] | None:
        for m in sorted(self.pending[i], key=lambda m: m.end, reverse=True):
            if m.end >= before or last_us - m.start[0] > self.window_us:
                continue
            if i == 0:
                return [m]
            rest = self._search(i - 1, m.start, last_us)
            if rest is not None:
                return rest + [m]
        return None

    def feed(self, match: SequenceMatch, flow: FlowKey | None = None) -> MatchEvent | None:
        self.flow_of[id(match)] = flow
        now = match.end[0]
        self._expire(now)
        i = match.set_index
        if i < self.k - 1:
            self.pending[i].append(match)
            return None
        if self.k == 1:
            chain = [match] if now - match.start[0] <= self.window_us else None
        else:
            head = self._search(self.k - 2, match.start, now)
            chain = None if head is None else head + [match]
        if chain is None:
            return None
        for m in chain[:-1]:
            self.pending[m.set_index].remove(m)
        flows = sorted({self.flow_of[id(m)] for m in chain if self.flow_of[id(m)] is not None})
        return MatchEvent(self.sig.id, self.label, chain[0].packets[0].ts, chain[-1].packets[-1].ts,
                          tuple(m.packets for m in chain), tuple(flows))


def match_streams(streams: Mapping[FlowKey, Sequence[PacketMeta]], sig: Signature,
                  bounds: MatchBounds, mode: AdversaryMode, window_ms: int | None = None
                  ) -> list[MatchEvent]:
    """Run one signature over independent flows and assemble full matches."""
    found: list[tuple[tuple[int, int], int, SequenceMatch, FlowKey]] = []
    for flow in sorted(streams):
        for m in match_sequences(streams[flow], bounds, mode, flow):
            found.append((m.end, m.set_index, m, flow))
    found.sort(key=lambda t: (t[0], t[1]))
    asm = MatchAssembler(sig, window_ms)
    out = []
    for _, _, m, flow in found:
        ev = asm.feed(m, flow)
        if ev is not None:
            out.append(ev)
    return out


def wan_streams(packets: Iterable[PacketMeta]) -> dict[FlowKey, list[PacketMeta]]:
    packets = list(packets)
    if any(p.flow.mode is not Mode.LAYER3 for p in packets):
        raise ConfigurationError("WAN detection needs a layer-3 capture")
    return payload_streams(packets)


def wifi_streams(packets: Iterable[PacketMeta], offset: int) -> dict[FlowKey, list[PacketMeta]]:
    streams: dict[FlowKey, list[PacketMeta]] = defaultdict(list)
    for p in layer2_view(packets, offset):
        streams[p.flow].append(p)
    for s in streams.values():
        s.sort(key=_key)
    return dict(streams)


@dataclass
class DetectionResult:
    matches: list[MatchEvent]
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {"matches": [m.to_dict() for m in self.matches], "counts": dict(self.counts)}


def detect(packets: Sequence[PacketMeta], signatures: Sequence[Signature],
           mode: AdversaryMode = AdversaryMode.WAN, strategy: Strategy = Strategy.RANGE,
           eps: float = DEFAULT_EPS, delta: int | None = None,
           positions: Iterable[int] | None = None, layer2_offset: int | None = None,
           peers: Sequence[Signature] = (), merge_labels: bool = True) -> DetectionResult:
    """Detect signatures in a parsed capture.

    WAN mode reads each TCP connection's payload packets (TLS Application
    Data only on TLS connections, retransmissions dropped). Wi-Fi mode reads
    layer-2 flows; a layer-3 capture is first mapped to frame lengths.
    """
    mode = AdversaryMode(mode)
    packets = list(packets)
    layer2_input = any(p.flow.mode is Mode.LAYER2 for p in packets)
    for sig in signatures:
        if mode is AdversaryMode.WAN and sig.comm_class is CommClass.PHONE_DEVICE:
            raise ConfigurationError(
                f"{sig.id}: phone-device signatures are only visible to the Wi-Fi sniffer")
    if mode is AdversaryMode.WAN:
        streams_by_offset = {None: wan_streams(packets)}
    else:
        offsets = {layer2_offset if layer2_offset is not None else s.layer2_offset for s in signatures}
        if layer2_input:
            streams_by_offset = {o: wifi_streams(packets, 0) for o in offsets}
        else:
            streams_by_offset = {o: wifi_streams(packets, o) for o in offsets}
    all_sigs = list(signatures) + [p for p in peers if p not in signatures]
    matches: list[MatchEvent] = []
    counts: dict[str, int] = {}
    for sig in signatures:
        bounds = bounds_for(sig, strategy, eps, delta, positions,
                            [s for s in all_sigs if s is not sig])
        if mode is AdversaryMode.WAN:
            streams = streams_by_offset[None]
        else:
            offset = layer2_offset if layer2_offset is not None else sig.layer2_offset
            streams = streams_by_offset[offset]
            bounds = bounds.shifted(offset)
        found = match_streams(streams, sig, bounds, mode)
        counts[sig.id] = len(found)
        matches.extend(found)
    if merge_labels:
        matches = merge_identical_matches(matches, {s.id: s for s in signatures})
    matches.sort(key=lambda m: (m.first_ts, m.signature_id))
    return DetectionResult(matches, counts)


def merge_identical_matches(matches: Sequence[MatchEvent],
                            sigs: Mapping[str, Signature]) -> list[MatchEvent]:
    """Report once, with joined labels, when signatures of one device match
    exactly the same packets."""
    groups: dict[tuple, list[MatchEvent]] = defaultdict(list)
    for m in matches:
        dev = sigs[m.signature_id].device if m.signature_id in sigs else ""
        groups[(dev, tuple(sorted(m.packet_indices)), m.first_ts)].append(m)
    out = []
    for group in groups.values():
        if len(group) == 1:
            out.append(group[0])
            continue
        labels: list[str] = []
        for m in group:
            for lab in m.labels:
                if lab not in labels:
                    labels.append(lab)
        head = group[0]
        out.append(MatchEvent("+".join(m.signature_id for m in group), "/".join(labels),
                              head.first_ts, head.last_ts, head.sets, head.flows))
    return out


# --- scoring ----------------------------------------------------------------------

@dataclass(frozen=True)
class TruthEvent:
    start: float
    end: float
    label: str = ""
    dummy: bool = False


@dataclass
class Score:
    events: int
    positives: int
    true_positives: int
    false_positives: int
    dummy_hits: int = 0
    per_label: dict = field(default_factory=dict)

    @property
    def recall(self) -> float:
        return self.true_positives / self.events if self.events else 0.0

    @property
    def fp_per_100(self) -> float:
        return 100.0 * self.false_positives / self.events if self.events else 0.0

    @property
    def ratio(self) -> float:
        return self.positives / self.events if self.events else 0.0

    def to_dict(self) -> dict:
        return {"events": self.events, "positives": self.positives,
                "true_positives": self.true_positives, "false_positives": self.false_positives,
                "dummy_hits": self.dummy_hits, "recall": self.recall,
                "fp_per_100": self.fp_per_100, "positives_per_event": self.ratio,
                "per_label": self.per_label}


def score_matches(matches: Sequence[MatchEvent], truth: Sequence[TruthEvent],
                  use_labels: bool = True) -> Score:
    """Attribute each match to at most one ground-truth event.

    A match hits an event when its first packet falls in [start, end] and,
    with ``use_labels``, one of its labels equals the event's label. Hits
    on dummy events count as false positives.
    """
    truth = sorted(truth, key=lambda e: e.start)
    starts = [e.start for e in truth]
    taken = [False] * len(truth)
    tp = fp = dummy_hits = 0
    per_label: dict[str, dict[str, int]] = {}
    for e in truth:
        if not e.dummy:
            per_label.setdefault(e.label, {"events": 0, "detected": 0, "false_positives": 0})
            per_label[e.label]["events"] += 1
    for m in sorted(matches, key=lambda m: (m.first_ts, m.signature_id)):
        hit = None
        hi = bisect.bisect_right(starts, m.first_ts)
        for i in range(hi - 1, -1, -1):
            e = truth[i]
            if taken[i] or m.first_ts > e.end:
                continue
            if use_labels and e.label not in m.labels:
                continue
            hit = i
            break
        if hit is not None and not truth[hit].dummy:
            taken[hit] = True
            tp += 1
            per_label[truth[hit].label]["detected"] += 1
            continue
        if hit is not None:
            taken[hit] = True
            dummy_hits += 1
        fp += 1
        for lab in m.labels:
            if lab in per_label:
                per_label[lab]["false_positives"] += 1
    real = sum(not e.dummy for e in truth)
    return Score(real, len(matches), tp, fp, dummy_hits, per_label)
