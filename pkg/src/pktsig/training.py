"""Signature extraction from a training capture and its event timestamps.

The pipeline: keep roster traffic inside each event window, reassemble TCP
connections, split each connection's payload packets into request/reply
pairs, cluster the pairs per event label, keep clusters whose frequency
tracks the number of events, join clusters that sit next to each other in
the same connections, order the resulting sets in time and finally check the
candidate by running detection over the whole training capture.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .clustering import NOISE, dbscan
from .ingest import (CommClass, Direction, EndpointRoster, FlowKey, PacketMeta,
                     comm_class, reassemble_tcp)
from .signature import DEFAULT_EPS, SetDescriptor, Signature, Strategy

log = logging.getLogger(__name__)

DEFAULT_WINDOW_T = 15.0


class TrainingError(Exception):
    pass


class ConfigError(TrainingError):
    pass


# --- events -----------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    ts: float
    label: str


@dataclass
class EventLog:
    entries: list[Event]

    def __post_init__(self):
        for a, b in zip(self.entries, self.entries[1:]):
            if not b.ts > a.ts:
                raise ConfigError(f"event timestamps not strictly increasing at {b.ts}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def labels(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.label)
        return list(seen)

    def count(self, label: str) -> int:
        return sum(e.label == label for e in self.entries)

    @classmethod
    def parse(cls, text: str) -> EventLog:
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"line {lineno}: expected '<timestamp> <label>'")
            try:
                ts = float(parts[0])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad timestamp {parts[0]!r}") from exc
            entries.append(Event(ts, parts[1]))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> EventLog:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{e.ts:.6f} {e.label}\n" for e in self.entries)


# --- trace filtering -----------------------------------------------------------

@dataclass
class FilteredTrace:
    packets: list[PacketMeta]
    window_of: dict[int, int]


def check_spacing(events: EventLog, window_t: float) -> None:
    ts = [e.ts for e in events]
    for a, b in zip(ts, ts[1:]):
        if b - a < window_t:
            raise ConfigError(f"event windows overlap: events at {a:.6f} and {b:.6f} "
                              f"are closer than the {window_t} s window")
    if any(b - a < 2 * window_t for a, b in zip(ts, ts[1:])):
        log.warning("events closer than twice the window (%.3f s)", 2 * window_t)


def filter_trace(packets: Iterable[PacketMeta], events: EventLog, window_t: float = DEFAULT_WINDOW_T,
                 roster: EndpointRoster | None = None) -> FilteredTrace:
    """Keep roster packets inside [e.ts, e.ts + window_t] of some event."""
    if window_t <= 0:
        raise ConfigError("window_t must be positive")
    check_spacing(events, window_t)
    starts = [e.ts for e in events]
    kept, window_of = [], {}
    for p in packets:
        if roster is not None and not (roster.is_local(p.src) or roster.is_local(p.dst)):
            continue
        i = bisect.bisect_right(starts, p.ts) - 1
        if i >= 0 and p.ts <= starts[i] + window_t:
            kept.append(p)
            window_of[p.index] = i
    return FilteredTrace(kept, window_of)


# --- pairs ------------------------------------------------------------------------

@dataclass(frozen=True)
class PacketPair:
    first: PacketMeta
    second: PacketMeta | None
    connection: FlowKey | None = None
    window: int = 0
    position: int = 0

    @property
    def pattern(self) -> tuple[Direction, Direction | None]:
        return (self.first.direction, None if self.second is None else self.second.direction)

    @property
    def lengths(self) -> tuple[int, int]:
        return (self.first.length, 0 if self.second is None else self.second.length)

    @property
    def packets(self) -> tuple[PacketMeta, ...]:
        return (self.first,) if self.second is None else (self.first, self.second)

    @property
    def ts(self) -> float:
        return self.first.ts

    def __str__(self) -> str:
        tail = "nil" if self.second is None else str(self.second)
        return f"<{self.first}, {tail}>"


def form_pairs(payload: Sequence[PacketMeta], connection: FlowKey | None = None,
               window: int = 0) -> list[PacketPair]:
    """Greedy left-to-right request/reply pairing of one connection's payload."""
    pairs, i = [], 0
    while i < len(payload):
        p = payload[i]
        if i + 1 < len(payload) and payload[i + 1].direction is not p.direction:
            pairs.append(PacketPair(p, payload[i + 1], connection, window, len(pairs)))
            i += 2
        else:
            pairs.append(PacketPair(p, None, connection, window, len(pairs)))
            i += 1
    return pairs


def pair_distance(p1: PacketPair, p2: PacketPair) -> float:
    if p1.pattern != p2.pattern:
        return math.inf
    (a1, a2), (b1, b2) = p1.lengths, p2.lengths
    return math.sqrt((a1 - b1) ** 2 + (a2 - b2) ** 2)


# --- clustering -------------------------------------------------------------------

def min_pts_for(n: int) -> int:
    """floor(n - 0.1n), in exact integer arithmetic."""
    return (9 * n) // 10


def frequency_interval(n: int) -> tuple[int, int]:
    """[floor(n - 0.1n), ceil(n + 0.1n)]."""
    return (9 * n) // 10, -((-11 * n) // 10)


@dataclass
class PairCluster:
    members: list[PacketPair]
    core: list[bool]

    @property
    def frequency(self) -> int:
        return len(self.members)

    @property
    def pattern(self) -> tuple[Direction, Direction | None]:
        return self.members[0].pattern

    @property
    def core_points(self) -> set[tuple[int, int]]:
        return {m.lengths for m, c in zip(self.members, self.core) if c}

    @property
    def earliest(self) -> float:
        return min(m.ts for m in self.members)

    def notation(self) -> str:
        d1, d2 = self.pattern
        l1 = [m.first.length for m in self.members]
        parts = [_range_token(d1, min(l1), max(l1))]
        if d2 is not None:
            l2 = [m.second.length for m in self.members]
            parts.append(_range_token(d2, min(l2), max(l2)))
        return " ".join(parts)


def _range_token(d: Direction, lo: int, hi: int) -> str:
    return f"{d.value}-{lo}" if lo == hi else f"{d.value}-[{lo}-{hi}]"


def _pair_order(p: PacketPair) -> tuple:
    return (p.first.ts, p.first.index)


def dbscan_pairs(pairs: Sequence[PacketPair], eps: float = DEFAULT_EPS,
                 min_pts: int | None = None, n: int | None = None
                 ) -> tuple[list[PairCluster], list[PacketPair]]:
    """Cluster pairs; points are visited by first-packet timestamp."""
    if min_pts is None:
        if n is None:
            raise ValueError("need min_pts or the event count n")
        min_pts = min_pts_for(n)
    ordered = sorted(pairs, key=_pair_order)
    if not ordered:
        return [], []
    points = np.array([p.lengths for p in ordered], dtype=np.int64)
    labels, core = dbscan(points, [p.pattern for p in ordered], eps, min_pts)
    clusters: dict[int, PairCluster] = {}
    noise = []
    for p, lab, c in zip(ordered, labels, core):
        if lab == NOISE:
            noise.append(p)
            continue
        clusters.setdefault(int(lab), PairCluster([], [])).members.append(p)
        clusters[int(lab)].core.append(bool(c))
    return [clusters[k] for k in sorted(clusters)], noise


def prune_clusters(clusters: Iterable[PairCluster], n: int) -> list[PairCluster]:
    if n <= 0:
        raise ValueError("n must be positive")
    lo, hi = frequency_interval(n)
    return [c for c in clusters if lo <= c.frequency <= hi]


# --- sequence sets ------------------------------------------------------------------

@dataclass(frozen=True)
class Occurrence:
    """One packet sequence: consecutive pairs of one connection."""

    pairs: tuple[PacketPair, ...]
    core: tuple[bool, ...]

    @property
    def packets(self) -> tuple[PacketMeta, ...]:
        return tuple(p for pair in self.pairs for p in pair.packets)

    @property
    def first_ts(self) -> float:
        return self.pairs[0].first.ts

    @property
    def last_ts(self) -> float:
        return self.packets[-1].ts

    @property
    def window(self) -> int:
        return self.pairs[0].window

    def follows(self, other: Occurrence) -> bool:
        """True when this sequence's first pair comes right after ``other``'s last."""
        a, b = other.pairs[-1], self.pairs[0]
        return (a.connection == b.connection and a.window == b.window
                and b.position == a.position + 1)


@dataclass
class SequenceSet:
    occurrences: list[Occurrence]

    @property
    def directions(self) -> tuple[Direction, ...]:
        return tuple(p.direction for p in self.occurrences[0].packets)

    def __len__(self) -> int:
        return len(self.occurrences[0].packets)

    @property
    def earliest(self) -> float:
        return min(o.first_ts for o in self.occurrences)

    def variants(self) -> tuple[tuple[int, ...], ...]:
        return tuple(sorted({tuple(p.length for p in o.packets) for o in self.occurrences}))

    def core_bounds(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Per-position (min, max) over lengths contributed by core pairs."""
        lo, hi = [], []
        slots = len(self.occurrences[0].pairs)
        for k in range(slots):
            members = [(o.pairs[k], o.core[k]) for o in self.occurrences]
            chosen = [p for p, c in members if c] or [p for p, _ in members]
            for j in range(len(chosen[0].packets)):
                lens = [p.packets[j].length for p in chosen]
                lo.append(min(lens))
                hi.append(max(lens))
        return tuple(lo), tuple(hi)

    def descriptor(self) -> SetDescriptor:
        lo, hi = self.core_bounds()
        return SetDescriptor(self.directions, lo, hi, self.variants())

    def notation(self) -> str:
        return self.descriptor().notation()


def _can_join(x: SequenceSet, y: SequenceSet) -> dict[int, Occurrence] | None:
    """Map each occurrence of x to the occurrence of y right after it, if all have one."""
    index = {}
    for o in y.occurrences:
        head = o.pairs[0]
        index[(head.connection, head.window, head.position)] = o
    joined = {}
    for i, o in enumerate(x.occurrences):
        tail = o.pairs[-1]
        nxt = index.get((tail.connection, tail.window, tail.position + 1))
        if nxt is None:
            return None
        joined[i] = nxt
    return joined


def concatenate_pairs(clusters: Sequence[PairCluster]) -> list[SequenceSet]:
    """Join clusters whose pairs occur back to back in the same connections.

    Sets are considered in order of their earliest member; surplus members
    of the following set are dropped, and joining repeats until no two
    sets can be joined.
    """
    sets = [SequenceSet([Occurrence((m,), (c,)) for m, c in zip(cl.members, cl.core)])
            for cl in clusters]
    sets.sort(key=lambda s: s.earliest)
    merged = True
    while merged:
        merged = False
        for i, x in enumerate(sets):
            for j, y in enumerate(sets):
                if i == j:
                    continue
                joined = _can_join(x, y)
                if joined is None:
                    continue
                occs = [Occurrence(o.pairs + joined[k].pairs, o.core + joined[k].core)
                        for k, o in enumerate(x.occurrences)]
                sets[i] = SequenceSet(occs)
                del sets[j]
                merged = True
                break
            if merged:
                break
    return sets


def precedes(x: SequenceSet, y: SequenceSet, window_t: float) -> bool:
    """Every sequence of x is followed, within window_t, by some sequence of y."""
    for ox in x.occurrences:
        if not any(oy.first_ts > ox.last_ts and oy.first_ts - ox.first_ts <= window_t
                   for oy in y.occurrences):
            return False
    return True


def order_sequence_sets(sets: Sequence[SequenceSet], window_t: float = DEFAULT_WINDOW_T
                        ) -> list[SequenceSet]:
    """Sort sets into a list by time, discarding the shorter of any
    incomparable pair."""
    if not sets:
        raise TrainingError("no sequence sets to order")
    active = sorted(sets, key=lambda s: s.earliest)
    changed = True
    while changed and len(active) > 1:
        changed = False
        for i in range(len(active)):
            for j in range(i + 1, len(active)):
                x, y = active[i], active[j]
                fwd, back = precedes(x, y, window_t), precedes(y, x, window_t)
                if fwd != back:
                    continue
                if fwd and back:
                    log.warning("sets %s and %s each precede the other; treating as incomparable",
                                x.notation(), y.notation())
                if len(x) == len(y):
                    raise TrainingError(
                        f"cannot order sets {x.notation()!r} and {y.notation()!r}: "
                        "incomparable and equally long")
                active.remove(x if len(x) < len(y) else y)
                changed = True
                break
            if changed:
                break
    wins = {id(s): sum(precedes(s, t, window_t) for t in active if t is not s) for s in active}
    ordered = sorted(active, key=lambda s: (-wins[id(s)], s.earliest))
    for a, b in zip(ordered, ordered[1:]):
        if not precedes(a, b, window_t):
            raise TrainingError("set ordering is not transitive on this training data")
    return ordered


@dataclass(frozen=True)
class DurationStats:
    min_ms: float
    avg_ms: float
    max_ms: float
    samples: int

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.min_ms, self.avg_ms, self.max_ms)


def compute_duration_stats(sets: Sequence[SequenceSet]) -> DurationStats:
    """Span from first to last signature packet per event window, in ms."""
    by_window: dict[int, list[list[Occurrence]]] = defaultdict(lambda: [[] for _ in sets])
    for k, s in enumerate(sets):
        for o in s.occurrences:
            by_window[o.window][k].append(o)
    spans_us = []
    for w in sorted(by_window):
        groups = by_window[w]
        if any(not g for g in groups):
            continue
        first = min(o.pairs[0].first.ts_us for g in groups for o in g)
        last = max(o.packets[-1].ts_us for g in groups for o in g)
        spans_us.append(last - first)
    if not spans_us:
        raise TrainingError("no training occurrence contains every set")
    return DurationStats(min(spans_us) / 1000, sum(spans_us) / len(spans_us) / 1000,
                         max(spans_us) / 1000, len(spans_us))


# --- validation ------------------------------------------------------------------

@dataclass
class ValidationResult:
    accepted: bool
    matches: int
    events: int
    matched_events: int
    extra: list = field(default_factory=list)
    reason: str = ""

    @property
    def recall(self) -> float:
        return self.matched_events / self.events if self.events else 0.0


def validate_signature(sig: Signature, packets: Sequence[PacketMeta], events: EventLog,
                       window_t: float = DEFAULT_WINDOW_T, strategy: Strategy = Strategy.RANGE,
                       eps: float = DEFAULT_EPS, peers: Sequence[Signature] = ()) -> ValidationResult:
    """Detect ``sig`` over the unfiltered training capture and compare with the events."""
    from .detection import AdversaryMode, detect

    mode = AdversaryMode.WIFI if sig.comm_class is CommClass.PHONE_DEVICE else AdversaryMode.WAN
    result = detect(packets, [sig], mode, strategy, eps=eps, peers=peers, merge_labels=False)
    own = [e for e in events if e.label in sig.labels]
    starts = [e.ts for e in own]
    used: set[int] = set()
    extra = []
    for m in result.matches:
        i = bisect.bisect_right(starts, m.first_ts) - 1
        if i >= 0 and m.first_ts <= starts[i] + window_t and i not in used:
            used.add(i)
        else:
            extra.append(m)
    n = len(own)
    if len(result.matches) > n:
        reason = f"{len(result.matches)} detections for {n} events"
    elif extra:
        reason = f"{len(extra)} detection(s) outside event windows"
    else:
        reason = ""
    return ValidationResult(not reason, len(result.matches), n, len(used), extra, reason)


# --- end to end -------------------------------------------------------------------

@dataclass
class TrainingParams:
    window_t: float = DEFAULT_WINDOW_T
    eps: float = DEFAULT_EPS
    min_pts: int | None = None
    strategy: Strategy = Strategy.RANGE


@dataclass
class CandidateReport:
    label: str
    comm_class: str
    n: int
    min_pts: int
    clusters: list[dict] = field(default_factory=list)
    sets: list[str] = field(default_factory=list)
    duration_ms: tuple | None = None
    signature_id: str | None = None
    verdict: str = ""


@dataclass
class TrainingResult:
    signatures: list[Signature]
    rejected: list[Signature]
    reports: list[CandidateReport]

    def to_dict(self) -> dict:
        return {
            "signatures": [s.id for s in self.signatures],
            "rejected": [s.id for s in self.rejected],
            "candidates": [r.__dict__ for r in self.reports],
        }


def _pairs_by_group(filtered: FilteredTrace, events: EventLog, roster: EndpointRoster):
    groups: dict[tuple[str, CommClass], list[PacketPair]] = defaultdict(list)
    for key, conn in sorted(reassemble_tcp(filtered.packets).items()):
        cls = comm_class(conn.client, conn.server, roster)
        runs: dict[int, list[PacketMeta]] = defaultdict(list)
        for p in conn.payload_set():
            runs[filtered.window_of[p.index]].append(p)
        for w, run in sorted(runs.items()):
            for pair in form_pairs(run, key, w):
                groups[(events.entries[w].label, cls)].append(pair)
    return groups


def _safe_id(text: str) -> str:
    return text.replace("/", "+").replace(" ", "_")


def train(packets: Sequence[PacketMeta], events: EventLog, roster: EndpointRoster,
          device: str = "device", params: TrainingParams | None = None,
          provenance: dict | None = None) -> TrainingResult:
    params = params or TrainingParams()
    packets = list(packets)
    filtered = filter_trace(packets, events, params.window_t, roster)
    groups = _pairs_by_group(filtered, events, roster)
    reports: list[CandidateReport] = []
    built: list[tuple[CandidateReport, Signature, int]] = []
    for label in events.labels():
        n = events.count(label)
        min_pts = params.min_pts if params.min_pts is not None else min_pts_for(n)
        for cls in CommClass:
            pairs = groups.get((label, cls))
            if not pairs:
                continue
            rep = CandidateReport(label, cls.value, n, min_pts)
            reports.append(rep)
            clusters, _noise = dbscan_pairs(pairs, params.eps, min_pts)
            kept = prune_clusters(clusters, n)
            lo, hi = frequency_interval(n)
            for c in clusters:
                rep.clusters.append({"pairs": c.notation(), "frequency": c.frequency,
                                     "kept": lo <= c.frequency <= hi})
            if not kept:
                rep.verdict = "no signature found"
                continue
            try:
                ordered = order_sequence_sets(concatenate_pairs(kept), params.window_t)
                stats = compute_duration_stats(ordered)
            except TrainingError as exc:
                rep.verdict = f"no signature found: {exc}"
                continue
            rep.sets = [s.notation() for s in ordered]
            rep.duration_ms = stats.as_tuple()
            dmax = math.ceil(stats.max_ms)
            if sum(len(s) for s in ordered) > 1:
                dmax = max(1, dmax)
            sig = Signature(
                id=_safe_id(f"{device}-{label}-{cls.value}"), device=device, label=label,
                sets=tuple(s.descriptor() for s in ordered), duration_max_ms=dmax,
                comm_class=cls, duration_ms=stats.as_tuple(),
                provenance=_provenance(provenance, params))
            built.append((rep, sig, n))

    merged = _merge_identical(built)
    signatures, rejected = [], []
    all_sigs = [s for _, s, _ in merged]
    for rep, sig, _n in merged:
        rep.signature_id = sig.id
        peers = [s for s in all_sigs if s is not sig]
        res = validate_signature(sig, packets, events, params.window_t, params.strategy,
                                 params.eps, peers)
        if res.accepted:
            rep.verdict = f"accepted ({res.matched_events}/{res.events} events)"
            signatures.append(sig)
        else:
            rep.verdict = f"rejected: {res.reason}"
            rejected.append(sig)
    return TrainingResult(signatures, rejected, reports)


def _provenance(extra: dict | None, params: TrainingParams) -> dict:
    out = {"tool": f"pktsig {__version__}", "window_t": params.window_t, "eps": params.eps,
           "min_pts": params.min_pts, "strategy": Strategy(params.strategy).value}
    out.update(extra or {})
    return out


def _merge_identical(built):
    """Fold same-class candidates with identical sets into one multi-label signature."""
    out: list[list] = []
    for rep, sig, n in built:
        for entry in out:
            other = entry[1]
            if (other.comm_class is sig.comm_class and other.device == sig.device
                    and [(s.directions, s.length_min, s.length_max) for s in other.sets]
                    == [(s.directions, s.length_min, s.length_max) for s in sig.sets]):
                label = f"{other.label}/{sig.label}"
                sets = tuple(SetDescriptor(a.directions, a.length_min, a.length_max,
                                           tuple(sorted(set(a.variants) | set(b.variants))))
                             for a, b in zip(other.sets, sig.sets))
                dur = (min(other.duration_ms[0], sig.duration_ms[0]),
                       (other.duration_ms[1] * entry[2] + sig.duration_ms[1] * n) / (entry[2] + n),
                       max(other.duration_ms[2], sig.duration_ms[2]))
                entry[1] = Signature(
                    id=_safe_id(f"{sig.device}-{label}-{sig.comm_class.value}"),
                    device=sig.device, label=label, sets=sets,
                    duration_max_ms=max(other.duration_max_ms, sig.duration_max_ms),
                    comm_class=sig.comm_class, duration_ms=dur, provenance=sig.provenance)
                entry[2] += n
                rep.verdict = f"merged into {label}"
                break
        else:
            out.append([rep, sig, n])
    return [tuple(e) for e in out]
