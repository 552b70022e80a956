"""Packet-level signatures: data model, matching bounds and the .sig format."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from .ingest import DEFAULT_LAYER2_OFFSET, CommClass, Direction

FORMAT_NAME = "pktsig-signature"
FORMAT_VERSION = 1
DEFAULT_EPS = 10.0


class SignatureFormatError(ValueError):
    pass


class Strategy(str, Enum):
    EXACT = "exact"
    RANGE = "range"
    RELAXED = "relaxed"


@dataclass(frozen=True)
class SetDescriptor:
    """One packet-sequence set as stored in a signature.

    ``length_min``/``length_max`` are per-position bounds taken from the
    clustering core points; ``variants`` are the distinct length tuples seen
    in training, used by exact matching.
    """

    directions: tuple[Direction, ...]
    length_min: tuple[int, ...]
    length_max: tuple[int, ...]
    variants: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        n = len(self.directions)
        if n == 0:
            raise SignatureFormatError("empty packet sequence")
        if len(self.length_min) != n or len(self.length_max) != n:
            raise SignatureFormatError("bounds do not match sequence length")
        for lo, hi in zip(self.length_min, self.length_max):
            if lo < 0 or lo > hi:
                raise SignatureFormatError(f"invalid length bounds [{lo}, {hi}]")
        if not self.variants:
            object.__setattr__(self, "variants", (tuple(self.length_min),)
                               if self.length_min == self.length_max else ())
        for v in self.variants:
            if len(v) != n or any(x < 0 for x in v):
                raise SignatureFormatError("variant does not match sequence shape")

    def __len__(self) -> int:
        return len(self.directions)

    @property
    def has_variation(self) -> bool:
        return self.length_min != self.length_max or len(self.variants) > 1

    def notation(self) -> str:
        parts = []
        for d, lo, hi in zip(self.directions, self.length_min, self.length_max):
            parts.append(f"{d.value}-{lo}" if lo == hi else f"{d.value}-[{lo}-{hi}]")
        return " ".join(parts)


@dataclass(frozen=True)
class Signature:
    id: str
    device: str
    label: str
    sets: tuple[SetDescriptor, ...]
    duration_max_ms: int
    comm_class: CommClass = CommClass.DEVICE_CLOUD
    layer2_offset: int = DEFAULT_LAYER2_OFFSET
    duration_ms: tuple[float, float, float] | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sets:
            raise SignatureFormatError("signature has no packet sequence sets")
        if self.duration_max_ms < 0:
            raise SignatureFormatError("negative duration")
        if self.total_packets >= 2 and self.duration_max_ms <= 0:
            raise SignatureFormatError("duration_max_ms must be positive for multi-packet signatures")
        if self.layer2_offset < 0:
            raise SignatureFormatError("negative layer-2 offset")

    @property
    def total_packets(self) -> int:
        return sum(len(s) for s in self.sets)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.label.split("/"))

    def shape(self) -> tuple[tuple[Direction, ...], ...]:
        return tuple(s.directions for s in self.sets)

    def notation(self) -> str:
        return " | ".join(s.notation() for s in self.sets)

    def shifted(self, c2s: int, s2c: int) -> Signature:
        """Same signature with every length grown by a per-direction header."""
        def shift(d: Direction) -> int:
            return c2s if d is Direction.C2S else s2c
        sets = []
        for s in self.sets:
            add = [shift(d) for d in s.directions]
            sets.append(SetDescriptor(
                s.directions,
                tuple(x + a for x, a in zip(s.length_min, add)),
                tuple(x + a for x, a in zip(s.length_max, add)),
                tuple(tuple(x + a for x, a in zip(v, add)) for v in s.variants)))
        return replace(self, sets=tuple(sets), id=f"{self.id}+hdr{c2s}/{s2c}")


_TOKEN = re.compile(r"^(?:(C|S)|(PH|D))-(?:(\d+)|\[(\d+)-(\d+)\])$")


def parse_sequence(text: str) -> SetDescriptor:
    """Parse ``"C-556 S-1293"`` or ``"C-[328-349] S-541"`` notation."""
    dirs, lo, hi = [], [], []
    for tok in text.split():
        m = _TOKEN.match(tok)
        if not m:
            raise SignatureFormatError(f"bad packet token {tok!r}")
        d = m.group(1) or m.group(2)
        dirs.append(Direction.C2S if d in ("C", "PH") else Direction.S2C)
        if m.group(3) is not None:
            lo.append(int(m.group(3)))
            hi.append(int(m.group(3)))
        else:
            lo.append(int(m.group(4)))
            hi.append(int(m.group(5)))
    return SetDescriptor(tuple(dirs), tuple(lo), tuple(hi))


def make_signature(sig_id: str, sets: Sequence[str], duration_max_ms: int, **kw) -> Signature:
    return Signature(id=sig_id, device=kw.pop("device", "device"), label=kw.pop("label", "event"),
                     sets=tuple(parse_sequence(s) for s in sets),
                     duration_max_ms=duration_max_ms, **kw)


# --- matching bounds --------------------------------------------------------

@dataclass(frozen=True)
class PacketSpec:
    direction: Direction
    lo: int
    hi: int

    def accepts(self, direction: Direction, length: int) -> bool:
        return direction is self.direction and self.lo <= length <= self.hi


Variant = tuple[PacketSpec, ...]


@dataclass(frozen=True)
class MatchBounds:
    strategy: Strategy
    sets: tuple[tuple[Variant, ...], ...]

    def shifted(self, offset: int) -> MatchBounds:
        return MatchBounds(self.strategy, tuple(
            tuple(tuple(PacketSpec(p.direction, p.lo + offset, p.hi + offset) for p in var)
                  for var in variants)
            for variants in self.sets))


def range_bounds(core: Sequence[tuple[Direction, int, int]], eps: float = DEFAULT_EPS) -> Variant:
    """Widen per-position core-point bounds by eps, clamping at zero."""
    out = []
    for d, lo, hi in core:
        out.append(PacketSpec(d, max(0, math.ceil(lo - eps)), math.floor(hi + eps)))
    return tuple(out)


def exact_bounds(sig: Signature) -> MatchBounds:
    sets = []
    for s in sig.sets:
        if s.variants:
            sets.append(tuple(tuple(PacketSpec(d, x, x) for d, x in zip(s.directions, v))
                              for v in s.variants))
        else:
            sets.append((tuple(PacketSpec(d, lo, hi) for d, lo, hi
                               in zip(s.directions, s.length_min, s.length_max)),))
    return MatchBounds(Strategy.EXACT, tuple(sets))


def relaxed_bounds(sig: Signature, delta: int, positions: Iterable[int] | None = None) -> MatchBounds:
    """Trained bounds with the listed flattened positions widened by ±delta.

    ``positions`` index packets across all sets, 0-based; ``None`` means
    every position.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    wanted = None if positions is None else set(positions)
    sets, k = [], 0
    for s in sig.sets:
        var = []
        for d, lo, hi in zip(s.directions, s.length_min, s.length_max):
            w = delta if wanted is None or k in wanted else 0
            var.append(PacketSpec(d, max(0, lo - w), hi + w))
            k += 1
        sets.append((tuple(var),))
    return MatchBounds(Strategy.RELAXED, tuple(sets))


def _widened(sig: Signature, eps: float) -> list[Variant]:
    return [range_bounds(list(zip(s.directions, s.length_min, s.length_max)), eps) for s in sig.sets]


def signatures_overlap(a: Signature, b: Signature, eps: float = DEFAULT_EPS) -> bool:
    """True when eps-widened bounds of two same-shape signatures intersect everywhere."""
    if a.shape() != b.shape():
        return False
    for va, vb in zip(_widened(a, eps), _widened(b, eps)):
        for pa, pb in zip(va, vb):
            if pa.hi < pb.lo or pb.hi < pa.lo:
                return False
    return True


def range_allowed(sig: Signature, peers: Iterable[Signature] = (), eps: float = DEFAULT_EPS) -> bool:
    """Range matching is skipped for 2-packet signatures and for signatures
    that overlap another event type's signature of the same device."""
    if sig.total_packets <= 2:
        return False
    for other in peers:
        if other.id != sig.id and other.device == sig.device and signatures_overlap(sig, other, eps):
            return False
    return True


def bounds_for(sig: Signature, strategy: Strategy, eps: float = DEFAULT_EPS,
               delta: int | None = None, positions: Iterable[int] | None = None,
               peers: Iterable[Signature] = ()) -> MatchBounds:
    strategy = Strategy(strategy)
    if strategy is Strategy.EXACT:
        return exact_bounds(sig)
    if strategy is Strategy.RELAXED:
        if delta is None:
            raise ValueError("relaxed matching needs a delta")
        return relaxed_bounds(sig, delta, positions)
    if not range_allowed(sig, peers, eps):
        return exact_bounds(sig)
    exact = exact_bounds(sig)
    sets = []
    for s, ex, widened in zip(sig.sets, exact.sets, _widened(sig, eps)):
        sets.append((widened,) if s.has_variation else ex)
    return MatchBounds(Strategy.RANGE, tuple(sets))


def detection_window_ms(duration_max_ms: int) -> int:
    """Longest span allowed for a full signature match: 1.1 x the trained
    maximum duration, in whole milliseconds (204 -> 224)."""
    if duration_max_ms < 0:
        raise ValueError("duration must be >= 0")
    d = int(duration_max_ms)
    return d + d // 10


# --- file format ------------------------------------------------------------

def to_dict(sig: Signature) -> dict:
    obj = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "id": sig.id,
        "device": sig.device,
        "label": sig.label,
        "comm_class": sig.comm_class.value,
        "layer2_offset": sig.layer2_offset,
        "duration_max_ms": sig.duration_max_ms,
        "duration_ms": None if sig.duration_ms is None else list(sig.duration_ms),
        "sets": [
            {
                "packets": [{"dir": d.value, "min": lo, "max": hi}
                            for d, lo, hi in zip(s.directions, s.length_min, s.length_max)],
                "variants": [list(v) for v in s.variants],
            }
            for s in sig.sets
        ],
        "provenance": dict(sorted(sig.provenance.items())),
    }
    return obj


def serialize(sig: Signature) -> bytes:
    return (json.dumps(to_dict(sig), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _require(obj: dict, key: str, kind):
    if key not in obj:
        raise SignatureFormatError(f"missing field {key!r}")
    val = obj[key]
    if kind is int and isinstance(val, bool) or not isinstance(val, kind):
        raise SignatureFormatError(f"field {key!r} has wrong type")
    return val


def from_dict(obj: dict) -> Signature:
    if not isinstance(obj, dict):
        raise SignatureFormatError("signature document must be an object")
    if obj.get("format") != FORMAT_NAME:
        raise SignatureFormatError(f"not a signature file (format={obj.get('format')!r})")
    if obj.get("version") != FORMAT_VERSION:
        raise SignatureFormatError(f"unsupported signature version {obj.get('version')!r}")
    sets = []
    for raw in _require(obj, "sets", list):
        packets = _require(raw, "packets", list)
        try:
            dirs = tuple(Direction(p["dir"]) for p in packets)
            lo = tuple(int(p["min"]) for p in packets)
            hi = tuple(int(p["max"]) for p in packets)
            variants = tuple(tuple(int(x) for x in v) for v in raw.get("variants", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise SignatureFormatError(f"bad packet entry: {exc}") from exc
        sets.append(SetDescriptor(dirs, lo, hi, variants))
    duration = obj.get("duration_ms")
    if duration is not None:
        if not isinstance(duration, list) or len(duration) != 3:
            raise SignatureFormatError("duration_ms must be [min, avg, max]")
        duration = tuple(duration)
    try:
        cls = CommClass(_require(obj, "comm_class", str))
    except ValueError as exc:
        raise SignatureFormatError(str(exc)) from exc
    return Signature(
        id=_require(obj, "id", str),
        device=_require(obj, "device", str),
        label=_require(obj, "label", str),
        sets=tuple(sets),
        duration_max_ms=_require(obj, "duration_max_ms", int),
        comm_class=cls,
        layer2_offset=_require(obj, "layer2_offset", int),
        duration_ms=duration,
        provenance=dict(obj.get("provenance") or {}),
    )


def deserialize(data: bytes | str) -> Signature:
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SignatureFormatError(f"malformed signature file: {exc}") from exc
    return from_dict(obj)


def load(path) -> Signature:
    with open(path, "rb") as f:
        return deserialize(f.read())


def save(sig: Signature, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(sig))


# --- comparison -------------------------------------------------------------

@dataclass
class Comparison:
    same_shape: bool
    identical: bool
    deltas: tuple[int, ...] = ()
    max_abs_delta: int = 0
    reason: str = ""

    def summary(self) -> str:
        if not self.same_shape:
            return f"structural mismatch: {self.reason}"
        deltas = " ".join(f"{d:+d}" for d in self.deltas)
        return f"deltas ({deltas}), max |delta| {self.max_abs_delta}"


def compare_signatures(a: Signature, b: Signature) -> Comparison:
    """Per-position length deltas b - a for same-shape signatures."""
    if len(a.sets) != len(b.sets):
        return Comparison(False, False, reason=f"{len(a.sets)} vs {len(b.sets)} sets")
    for i, (sa, sb) in enumerate(zip(a.sets, b.sets)):
        if len(sa) != len(sb):
            return Comparison(False, False, reason=f"set {i}: {len(sa)} vs {len(sb)} packets")
        if sa.directions != sb.directions:
            return Comparison(False, False, reason=f"set {i}: directions differ")
    deltas, worst = [], 0
    for sa, sb in zip(a.sets, b.sets):
        for lo_a, hi_a, lo_b, hi_b in zip(sa.length_min, sa.length_max, sb.length_min, sb.length_max):
            deltas.append(lo_b - lo_a)
            worst = max(worst, abs(lo_b - lo_a), abs(hi_b - hi_a))
    identical = worst == 0
    return Comparison(True, identical, tuple(deltas), worst)
