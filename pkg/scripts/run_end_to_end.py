#!/usr/bin/env python3
"""Generate a synthetic capture, train signatures on it, then detect on a fresh capture.

Prints the trained signatures and a per-mode score, and optionally writes a
JSON summary.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass

from pktsig.detection import AdversaryMode, detect, score_matches
from pktsig.synth import BUILTIN_PROFILES, TraceProfile, generate
from pktsig.training import TrainingParams, train


@dataclass
class RunConfig:
    profile: str = "tplink"
    train_seed: int = 1
    test_seed: int = 2
    n_per_label: int = 50
    device: str = "device"
    out: str | None = None


def load_profile(cfg: RunConfig) -> TraceProfile:
    if cfg.profile in BUILTIN_PROFILES:
        builder = BUILTIN_PROFILES[cfg.profile]
        return builder(n_per_label=cfg.n_per_label)
    return TraceProfile.load(cfg.profile)


def run(cfg: RunConfig) -> dict:
    profile = load_profile(cfg)
    t0 = time.perf_counter()
    train_trace = generate(profile, cfg.train_seed)
    result = train(train_trace.packets, train_trace.events, train_trace.roster, cfg.device,
                   TrainingParams(window_t=profile.window_t))
    summary = {"config": asdict(cfg), "signatures": [s.notation() for s in result.signatures],
               "rejected": [s.id for s in result.rejected], "modes": {}}
    test_trace = generate(profile, cfg.test_seed)
    for mode in (AdversaryMode.WAN, AdversaryMode.WIFI):
        found = detect(test_trace.packets, result.signatures, mode)
        score = score_matches(found.matches, test_trace.truth_events())
        summary["modes"][mode.value] = score.to_dict()
    summary["seconds"] = round(time.perf_counter() - t0, 3)
    return summary


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default=RunConfig.profile,
                    help=f"built-in name ({', '.join(BUILTIN_PROFILES)}) or a profile JSON path")
    ap.add_argument("--train-seed", type=int, default=RunConfig.train_seed)
    ap.add_argument("--test-seed", type=int, default=RunConfig.test_seed)
    ap.add_argument("--n-per-label", type=int, default=RunConfig.n_per_label,
                    help="events per label for built-in profiles")
    ap.add_argument("--device", default=RunConfig.device)
    ap.add_argument("--out", help="write the JSON summary here")
    cfg = RunConfig(**vars(ap.parse_args(argv)))

    summary = run(cfg)
    for text in summary["signatures"]:
        print(f"signature: {text}")
    if not summary["signatures"]:
        print("no signature found")
    for mode, score in summary["modes"].items():
        print(f"{mode}: TP {score['true_positives']}/{score['events']}, "
              f"FP {score['false_positives']}, recall {score['recall']:.2f}")
    print(f"done in {summary['seconds']:.1f} s")
    if cfg.out:
        with open(cfg.out, "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    return 0 if summary["signatures"] else 3


if __name__ == "__main__":
    sys.exit(main())
