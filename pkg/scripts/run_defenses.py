#!/usr/bin/env python3
"""Score every traffic-shaping defense against fixed signatures on a dense capture.

The default signatures are the smart-plug ON/OFF pair; the capture comes from
the built-in dense profile, whose background makes padded traffic ambiguous.
"""

import argparse
import json
import sys
from dataclasses import asdict, dataclass

from pktsig.defense import DefenseConfig, DefenseStrategy, run_defense
from pktsig.signature import make_signature
from pktsig.synth import generate, tplink_dense_profile


@dataclass
class DefenseRunConfig:
    seed: int = 1
    n_per_label: int = 50
    rate_hz: float = 50.0
    dummies: int = 100
    stp_seed: int = 1
    mtu: int = 1500
    out: str | None = None


SIGNATURES = (
    make_signature("tplink-ON", ["C-556 S-1293"], 204, device="tplink-plug", label="ON"),
    make_signature("tplink-OFF", ["C-557 S-1294"], 204, device="tplink-plug", label="OFF"),
)


def run(cfg: DefenseRunConfig) -> list[dict]:
    trace = generate(tplink_dense_profile(n_per_label=cfg.n_per_label, rate_hz=cfg.rate_hz), cfg.seed)
    truth = trace.truth_events()
    hosts = [trace.household["device"]["ip"]]
    rows = []
    for strategy in DefenseStrategy:
        dummies = cfg.dummies if strategy is DefenseStrategy.STP_VPN else 0
        config = DefenseConfig(strategy, mtu=cfg.mtu, dummies=dummies, seed=cfg.stp_seed)
        report = run_defense(trace.packets, SIGNATURES, truth, config, hosts)
        print(report.summary())
        rows.append(report.to_dict())
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=DefenseRunConfig.seed)
    ap.add_argument("--n-per-label", type=int, default=DefenseRunConfig.n_per_label)
    ap.add_argument("--rate-hz", type=float, default=DefenseRunConfig.rate_hz,
                    help="request rate of the background flow")
    ap.add_argument("--dummies", type=int, default=DefenseRunConfig.dummies,
                    help="dummy events injected by the STP defense")
    ap.add_argument("--stp-seed", type=int, default=DefenseRunConfig.stp_seed)
    ap.add_argument("--mtu", type=int, default=DefenseRunConfig.mtu)
    ap.add_argument("--out", help="write all reports as JSON here")
    cfg = DefenseRunConfig(**vars(ap.parse_args(argv)))

    rows = run(cfg)
    if cfg.out:
        with open(cfg.out, "w") as f:
            json.dump({"config": asdict(cfg), "reports": rows}, f, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
