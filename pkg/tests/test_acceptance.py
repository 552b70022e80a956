"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import os
import random
import time

import numpy as np
import pytest
from hypothesis import given, settings

from helpers import C, S, indices, pkt, random_case
from oracles import brute_dbscan, brute_detect
from pktsig.clustering import dbscan
from pktsig.defense import DefenseConfig, DefenseStrategy, run_defense
from pktsig.detection import AdversaryMode, detect, match_streams, score_matches
from pktsig.signature import (Strategy, compare_signatures, deserialize, detection_window_ms,
                              make_signature, range_bounds, serialize)
from pktsig.synth import EventTemplate, ExchangeTemplate, TraceProfile, generate
from pktsig.training import PairCluster, TrainingParams, form_pairs, prune_clusters, train
from test_signature import signatures

PROFILES = os.path.join(os.path.dirname(__file__), os.pardir, "profiles")
ON = make_signature("tplink-ON", ["C-556 S-1293"], 204, device="tplink-plug", label="ON")
OFF = make_signature("tplink-OFF", ["C-557 S-1294"], 204, device="tplink-plug", label="OFF")


@pytest.fixture
def verdict(capsys, request):
    """Call with (ok, detail); prints one line and fails the test when not ok."""
    number = request.node.get_closest_marker("criterion").args[0]

    def report(ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return report


criterion = pytest.mark.criterion


@criterion(1)
def test_range_bound_arithmetic(verdict):
    t0 = time.perf_counter()
    spec = range_bounds([(C, 338, 339), (S, 541, 542)], 10)
    elapsed_ms = (time.perf_counter() - t0) * 1000
    got = [(p.direction.value, p.lo, p.hi) for p in spec]
    verdict(got == [("C", 328, 349), ("S", 531, 552)] and elapsed_ms < 1,
            f"range bounds {got} in {elapsed_ms:.3f} ms")


@criterion(2)
def test_detection_window(verdict):
    w = detection_window_ms(204)
    verdict(w == 224, f"detection window for 204 ms is {w} ms")


@criterion(3)
def test_end_to_end_recovery(verdict):
    t0 = time.perf_counter()
    profile = TraceProfile.load(os.path.join(PROFILES, "tplink-fast.json"))
    assert len(profile.background) == 3 and profile.n_per_label == 50
    train_trace = generate(profile, seed=2)
    res = train(train_trace.packets, train_trace.events, train_trace.roster, "tplink",
                TrainingParams(window_t=profile.window_t))
    shapes = sorted(s.notation() for s in res.signatures)
    flat = all(len(s.sets) == 1 and s.sets[0].length_min == s.sets[0].length_max
               and len(s.sets[0].variants) == 1 for s in res.signatures)
    fresh = generate(profile, seed=12)
    results = []
    for mode in (AdversaryMode.WAN, AdversaryMode.WIFI):
        found = detect(fresh.packets, res.signatures, mode)
        score = score_matches(found.matches, fresh.truth_events())
        per = {k: (v["detected"], v["events"]) for k, v in sorted(score.per_label.items())}
        results.append((mode.value, per, score.false_positives))
    elapsed = time.perf_counter() - t0
    ok = (shapes == ["C-556 S-1293", "C-557 S-1294"] and flat
          and all(per == {"OFF": (50, 50), "ON": (50, 50)} and fp == 0 for _, per, fp in results)
          and elapsed < 10)
    verdict(ok, f"trained {shapes}, detection {results}, {elapsed:.1f} s")


@criterion(4)
def test_dbscan_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for trial in range(200):
        m = int(rng.integers(1, 2001))
        k = int(rng.integers(1, 12))
        centers = rng.integers(60, 1500, size=(k, 2))
        spread = int(rng.integers(1, 25))
        pts = centers[rng.integers(0, k, m)] + rng.integers(-spread, spread + 1, size=(m, 2))
        pats = list(rng.choice(["CS", "SC", "C-", "S-"], m, p=[0.6, 0.2, 0.1, 0.1]))
        eps = float(rng.choice([5, 10, 14.5]))
        min_pts = int(rng.integers(1, max(2, m // 10)))
        labels, core = dbscan(pts, pats, eps, min_pts)
        ref_labels, ref_core = brute_dbscan(pts, pats, eps, min_pts)
        mismatches += not ((labels == ref_labels).all() and (core == ref_core).all())
    elapsed = time.perf_counter() - t0
    verdict(mismatches == 0 and elapsed < 60,
            f"{mismatches} mismatches in 200 datasets, {elapsed:.1f} s")


@criterion(5)
def test_detection_oracle(verdict):
    t0 = time.perf_counter()
    bad = []
    for seed in range(1000):
        streams, sig, bounds, window_ms = random_case(random.Random(seed))
        for mode in (AdversaryMode.WAN, AdversaryMode.WIFI):
            got = indices(match_streams(streams, sig, bounds, mode, window_ms))
            if got != brute_detect(streams, bounds, window_ms, mode is AdversaryMode.WIFI):
                bad.append((seed, mode.value))
    elapsed = time.perf_counter() - t0
    verdict(not bad and elapsed < 120,
            f"{len(bad)} mismatches in 1000 traces x 2 modes, {elapsed:.1f} s")


@criterion(6)
def test_pruning_boundaries(verdict):
    p = form_pairs([pkt(0, 0.0, C, 1), pkt(1, 0.1, S, 2)])[0]
    kept = {f for f in range(40, 61)
            if prune_clusters([PairCluster([p] * f, [True] * f)], 50)}
    verdict(kept == set(range(45, 56)), f"n=50 keeps frequencies {min(kept)}..{max(kept)}")


@criterion(7)
def test_defense_reproduction(verdict, dense_trace):
    t0 = time.perf_counter()
    t = dense_trace
    span = t.truth[-1].trigger - t.truth[0].trigger
    truth = t.truth_events()
    hosts = [t.household["device"]["ip"]]
    reps = {s: run_defense(t.packets, [ON, OFF], truth, DefenseConfig(s), hosts)
            for s in (DefenseStrategy.PAD_MTU_VPN, DefenseStrategy.PAD_MTU_TLS_PER_CONN,
                      DefenseStrategy.PAD_MTU_HYBRID)}
    elapsed = time.perf_counter() - t0
    vpn = reps[DefenseStrategy.PAD_MTU_VPN].score
    per = reps[DefenseStrategy.PAD_MTU_TLS_PER_CONN].score
    hyb = reps[DefenseStrategy.PAD_MTU_HYBRID].score
    ok = (span >= 297 and vpn.ratio >= 10 and (per.positives, per.true_positives,
                                              per.false_positives) == (100, 100, 0)
          and per.positives < hyb.positives < vpn.positives and elapsed < 30)
    verdict(ok, f"VPN {vpn.positives} positives (ratio {vpn.ratio:.1f}), per-connection "
                f"{per.true_positives} TP / {per.false_positives} FP, hybrid {hyb.positives}, "
                f"{elapsed:.1f} s")


@criterion(8)
def test_stp_invariance(verdict, dense_trace):
    t = dense_trace
    rep = run_defense(t.packets, [ON, OFF], t.truth_events(),
                      DefenseConfig(DefenseStrategy.STP_VPN, dummies=100, seed=1))
    s = rep.score
    ok = (s.true_positives, s.events, s.dummy_hits, s.false_positives, s.positives) == (100, 100, 100, 100, 200)
    verdict(ok, f"{s.true_positives}/{s.events} true events, {s.dummy_hits}/100 dummies detected "
                f"and counted as FP ({s.false_positives} FP)")


def _variant_trace(text, seed):
    profile = TraceProfile("tplink-plug", (EventTemplate("ON", (ExchangeTemplate.parse(text),)),),
                           n_per_label=50, spacing_s=2.0, window_t=0.5)
    return generate(profile, seed)


@criterion(9)
def test_relaxed_matching(verdict):
    a = make_signature("tp-a", ["C-592 S-1234 S-100"], 204, device="tplink-plug", label="ON")
    b = make_signature("tp-b", ["C-605 S-1213 S-100"], 204, device="tplink-plug", label="ON")
    deltas = compare_signatures(a, b).deltas
    recall = {}
    for name, text, seed in (("original", a.notation(), 1), ("variant", b.notation(), 2)):
        t = _variant_trace(text, seed)
        for delta in (21, 12):
            found = detect(t.packets, [a], AdversaryMode.WAN, Strategy.RELAXED, delta=delta)
            recall[(name, delta)] = score_matches(found.matches, t.truth_events()).recall
    ok = (deltas == (13, -21, 0) and recall[("original", 21)] == 1.0
          and recall[("variant", 21)] == 1.0 and recall[("variant", 12)] == 0.0)
    verdict(ok, f"deltas {deltas}; recall {recall}")


@criterion(10)
def test_serialization_round_trip(verdict):
    failures = []

    @settings(max_examples=1000, derandomize=True, database=None)
    @given(signatures())
    def round_trip(sig):
        data = serialize(sig)
        if deserialize(data) != sig or serialize(deserialize(data)) != data:
            failures.append(sig)

    round_trip()
    verdict(not failures, f"1000 random signatures, {len(failures)} round-trip failures")
