"""Command-line front end: train, validate, detect, compare, defend, gen.

Exit codes: 0 success, 1 usage error, 2 input or configuration error,
3 ran fine but found no signature / no match.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import pcap, signature as sigmod
from .defense import DefenseConfig, DefenseError, DefenseStrategy, run_defense
from .detection import AdversaryMode, ConfigurationError, TruthEvent, detect, score_matches
from .ingest import EndpointRoster, Mode, ParseStats, parse_capture
from .signature import SignatureFormatError, Strategy, compare_signatures
from .synth import BUILTIN_PROFILES, NOISE_KINDS, TraceProfile, generate, inject_noise, write_trace
from .training import (DEFAULT_WINDOW_T, ConfigError, EventLog, TrainingError, TrainingParams,
                       train, validate_signature)

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NOTHING = 0, 1, 2, 3

log = logging.getLogger("pktsig")


class InputError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ------------------------------------------------------------------

def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _roster(path: str) -> EndpointRoster:
    try:
        return EndpointRoster.load(_existing(path, "roster file"))
    except (json.JSONDecodeError, AttributeError, TypeError) as exc:
        raise InputError(f"bad roster file {path}: {exc}") from exc


def _capture(path: str, roster: EndpointRoster, mode: Mode | None = None):
    p = _existing(path, "capture")
    with open(p, "rb") as f:
        linktype = pcap.PcapReader(f).linktype
    if mode is None:
        mode = Mode.LAYER2 if linktype == pcap.LINKTYPE_IEEE802_11_RADIOTAP else Mode.LAYER3
    stats = ParseStats()
    packets = list(parse_capture(p, mode, roster, stats))
    log.info("%s: %d frames, %d kept", path, stats.frames, stats.emitted)
    return packets, stats


def _events(path: str) -> EventLog:
    return EventLog.load(_existing(path, "events file"))


def _signatures(paths) -> list:
    return [sigmod.load(_existing(p, "signature file")) for p in paths]


def _truth(path: str, window_t: float) -> list[TruthEvent]:
    """Ground truth from a generator truth.json or an events file."""
    p = _existing(path, "truth file")
    text = p.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        obj = json.loads(text)
        return [TruthEvent(e["trigger"], e["end"], e["label"], e.get("dummy", False))
                for e in obj["events"]]
    return [TruthEvent(e.ts, e.ts + window_t, e.label) for e in EventLog.parse(text)]


def _write_report(path: str | None, obj: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _positions(text: str | None):
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--positions takes comma-separated integers: {exc}") from exc


def _check_match_args(args) -> None:
    if args.match == "relaxed" and args.delta is None:
        raise UsageError("--match relaxed needs --delta")
    if args.match != "relaxed" and (args.delta is not None or getattr(args, "positions", None)):
        raise UsageError("--delta/--positions only apply to --match relaxed")


# --- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    roster = _roster(args.roster)
    events = _events(args.events)
    packets, _ = _capture(args.pcap, roster, Mode.LAYER3)
    params = TrainingParams(args.window_t, args.eps, args.min_pts, Strategy(args.match))
    digest = hashlib.sha256(Path(args.pcap).read_bytes()).hexdigest()
    result = train(packets, events, roster, args.device, params,
                   {"capture": Path(args.pcap).name, "capture_sha256": digest,
                    "events": Path(args.events).name})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sig in result.signatures:
        path = out / f"{sig.id}.sig"
        sigmod.save(sig, path)
        written.append(str(path))
    for rep in result.reports:
        print(f"[{rep.label} / {rep.comm_class}] n={rep.n} minPts={rep.min_pts}")
        for c in rep.clusters:
            mark = "kept" if c["kept"] else "dropped"
            print(f"    cluster {c['pairs']:<30} freq {c['frequency']:>4}  {mark}")
        for i, s in enumerate(rep.sets, 1):
            print(f"    S{i}: {s}")
        if rep.duration_ms:
            print("    duration ms (min/avg/max): " + " / ".join(f"{x:.1f}" for x in rep.duration_ms))
        print(f"    -> {rep.verdict}")
    report = result.to_dict()
    report["files"] = written
    _write_report(args.report, report)
    if not result.signatures:
        print("no signature found")
        return EXIT_NOTHING
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    roster = _roster(args.roster)
    events = _events(args.events)
    sigs = _signatures(args.sig)
    packets, _ = _capture(args.pcap, roster, Mode.LAYER3)
    ok = True
    report = []
    for sig in sigs:
        res = validate_signature(sig, packets, events, args.window_t, Strategy(args.match),
                                 args.eps, [s for s in sigs if s is not sig])
        verdict = "accepted" if res.accepted else f"rejected: {res.reason}"
        print(f"{sig.id}: {res.matches} detections, {res.matched_events}/{res.events} events -> {verdict}")
        report.append({"signature": sig.id, "accepted": res.accepted, "matches": res.matches,
                       "events": res.events, "matched_events": res.matched_events,
                       "reason": res.reason})
        ok &= res.accepted
    _write_report(args.report, {"validation": report})
    return EXIT_OK if ok else EXIT_NOTHING


def cmd_detect(args) -> int:
    _check_match_args(args)
    roster = _roster(args.roster)
    sigs = _signatures(args.sig)
    mode = AdversaryMode(args.mode)
    packets, _ = _capture(args.pcap, roster)
    if mode is AdversaryMode.WAN and any(p.flow.mode is Mode.LAYER2 for p in packets):
        raise ConfigurationError("WAN detection needs a layer-3 (Ethernet) capture")
    result = detect(packets, sigs, mode, Strategy(args.match), eps=args.eps, delta=args.delta,
                    positions=_positions(args.positions), layer2_offset=args.layer2_offset)
    for m in result.matches:
        flows = ", ".join(str(f) for f in m.flows)
        print(f"{m.first_ts:.6f} {m.last_ts:.6f} {m.signature_id} {m.label} {flows}")
    print(f"{'signature':<40} {'matches':>8}")
    for sid, n in result.counts.items():
        print(f"{sid:<40} {n:>8}")
    report = result.to_dict()
    if args.truth:
        score = score_matches(result.matches, _truth(args.truth, args.window_t))
        report["score"] = score.to_dict()
        print(f"recall {score.true_positives}/{score.events} ({100 * score.recall:.1f}%), "
              f"FP {score.false_positives} ({score.fp_per_100:.2f} per 100 events)")
        for label, row in sorted(score.per_label.items()):
            print(f"  {label:<12} {row['detected']}/{row['events']} detected, "
                  f"{row['false_positives']} FP")
    _write_report(args.report, report)
    return EXIT_OK if result.matches else EXIT_NOTHING


def cmd_compare(args) -> int:
    a, b = _signatures([args.a, args.b])
    cmp = compare_signatures(a, b)
    print(f"{a.id}: {a.notation()}")
    print(f"{b.id}: {b.notation()}")
    print(cmp.summary())
    _write_report(args.report, {"a": a.id, "b": b.id, "same_shape": cmp.same_shape,
                                "identical": cmp.identical, "deltas": list(cmp.deltas),
                                "max_abs_delta": cmp.max_abs_delta, "reason": cmp.reason})
    return EXIT_OK if cmp.same_shape else EXIT_NOTHING


def cmd_defend(args) -> int:
    roster = _roster(args.roster)
    sigs = _signatures(args.sig)
    packets, _ = _capture(args.pcap, roster, Mode.LAYER3)
    truth = _truth(args.truth, args.window_t)
    config = DefenseConfig(DefenseStrategy(args.strategy), args.mtu, args.vpn_header_c2s,
                           args.vpn_header_s2c, args.dummies, args.seed)
    hosts = args.host or None
    report = run_defense(packets, sigs, truth, config, hosts)
    print(report.summary())
    _write_report(args.report, report.to_dict())
    return EXIT_OK if report.score.positives else EXIT_NOTHING


def cmd_gen(args) -> int:
    if args.profile in BUILTIN_PROFILES:
        profile = BUILTIN_PROFILES[args.profile]()
    else:
        try:
            profile = TraceProfile.load(_existing(args.profile, "profile"))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"bad profile {args.profile}: {exc}") from exc
    trace = generate(profile, args.seed)
    for spec in args.noise or []:
        kind, _, rate = spec.partition(":")
        if kind not in NOISE_KINDS or not rate:
            raise UsageError(f"--noise takes KIND:RATE with KIND in {', '.join(NOISE_KINDS)}")
        trace = inject_noise(trace, kind, float(rate), args.seed)
    paths = write_trace(trace, args.out, wifi=args.wifi)
    print(f"{len(trace.events)} events, {len(trace.packets)} packets")
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pktsig", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging; repeat for debug")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, roster=True):
        if roster:
            sp.add_argument("--roster", required=True, help="JSON list/object of local addresses")
        sp.add_argument("--report", help="write a JSON report here")

    def matching(sp):
        sp.add_argument("--match", choices=[s.value for s in Strategy], default="range",
                        help="length matching strategy (default: range)")
        sp.add_argument("--eps", type=float, default=sigmod.DEFAULT_EPS,
                        help="range padding around observed lengths, bytes")

    t = sub.add_parser("train", help="extract signatures from a training capture")
    t.add_argument("pcap", help="training capture")
    t.add_argument("--events", required=True, help="event log, one 'epoch-seconds LABEL' per line")
    t.add_argument("--device", default="device", help="device name used in signature ids")
    t.add_argument("--out", default="signatures", help="directory for .sig files")
    t.add_argument("--window-t", type=float, default=DEFAULT_WINDOW_T,
                   help="seconds of traffic kept after each event")
    t.add_argument("--min-pts", type=int, help="DBSCAN minPts (default: derived from event count)")
    matching(t)
    common(t)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("validate", help="check signatures against a training capture")
    v.add_argument("pcap", help="training capture")
    v.add_argument("--sig", nargs="+", required=True, help="signature files")
    v.add_argument("--events", required=True, help="event log")
    v.add_argument("--window-t", type=float, default=DEFAULT_WINDOW_T,
                   help="seconds of traffic kept after each event")
    matching(v)
    common(v)
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("detect", help="find signature matches in a capture")
    d.add_argument("pcap", help="capture to search")
    d.add_argument("--sig", nargs="+", required=True, help="signature files")
    d.add_argument("--mode", choices=[m.value for m in AdversaryMode], default="wan",
                   help="sniffer model (default: wan)")
    d.add_argument("--delta", type=int, help="length tolerance for --match relaxed, bytes")
    d.add_argument("--positions", help="0-based packet positions widened by relaxed matching")
    d.add_argument("--layer2-offset", type=int, help="override the signatures' Wi-Fi length offset")
    d.add_argument("--truth", help="truth.json from gen, or an events file")
    d.add_argument("--window-t", type=float, default=DEFAULT_WINDOW_T,
                   help="event window used when --truth is an events file")
    matching(d)
    common(d)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("compare", help="per-position length deltas of two signatures")
    c.add_argument("a", help="first signature file")
    c.add_argument("b", help="second signature file")
    common(c, roster=False)
    c.set_defaults(func=cmd_compare)

    f = sub.add_parser("defend", help="score a padding or STP defense")
    f.add_argument("pcap", help="layer-3 capture")
    f.add_argument("--sig", nargs="+", required=True, help="signature files")
    f.add_argument("--truth", required=True, help="truth.json from gen, or an events file")
    f.add_argument("--strategy", choices=[s.value for s in DefenseStrategy], default="PadMtuVpn",
                   help="defense to simulate (default: PadMtuVpn)")
    f.add_argument("--mtu", type=int, default=1500, help="padded packet length")
    f.add_argument("--vpn-header-c2s", type=int, default=52, help="STP header bytes, client to server")
    f.add_argument("--vpn-header-s2c", type=int, default=49, help="STP header bytes, server to client")
    f.add_argument("--dummies", type=int, default=0, help="dummy events injected by StpVpn")
    f.add_argument("--seed", type=_u64, default=0, help="seed for dummy placement")
    f.add_argument("--host", action="append", help="target device address (hybrid); repeatable")
    f.add_argument("--window-t", type=float, default=DEFAULT_WINDOW_T,
                   help="event window used when --truth is an events file")
    common(f)
    f.set_defaults(func=cmd_defend)

    g = sub.add_parser("gen", help="generate a synthetic capture with ground truth")
    g.add_argument("--profile", required=True, help=f"profile file or one of {sorted(BUILTIN_PROFILES)}")
    g.add_argument("--seed", type=_u64, default=0, help="generator seed")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--wifi", action="store_true", help="also write a radiotap capture")
    g.add_argument("--noise", action="append", metavar="KIND:RATE",
                   help=f"inject noise, one of {list(NOISE_KINDS)}; repeatable")
    g.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on --help (0) and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pktsig: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError, pcap.PcapError, SignatureFormatError, ConfigError,
            ConfigurationError, DefenseError, ValueError) as exc:
        print(f"pktsig: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingError as exc:
        print(f"pktsig: no signature found: {exc}")
        return EXIT_NOTHING


if __name__ == "__main__":
    sys.exit(main())
