"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the summary lines
are printed even without ``-s``.
"""

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from selfattn import constructions as cons
from selfattn import evaluation as ev
from selfattn import formal_langs as fl
from selfattn import restriction as rs
from selfattn import sensitivity as sens
from selfattn.modelio import load_model, save_model
from selfattn.transformer import (ModelConfig, attention_weights, forward, parameter_count, random_model,
                                  with_config)

from fixtures import HARD_COUNT, hard_case, hard_model, soft_fixtures, soft_model


def report(capsys, number, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail} ({elapsed:.1f}s, limit {limit:.0f}s)")
    return ok


# --- 1. positive constructions ------------------------------------------------------------------


def test_criterion_1_positive_constructions(capsys):
    t0 = time.perf_counter()
    errors = {}
    for name, build in (("ones_star", cons.build_ones_star), ("anbn", cons.build_anbn)):
        rep = build(verify_upto=14)
        errors[f"{name} exhaustive<=14"] = len(rep.failures)
        for n in (100, 1000):
            fails = cons.verify_sampled(rep.model, name, n, 10_000, fl.make_rng(n))
            errors[f"{name} n={n}"] = len(fails)
    elapsed = time.perf_counter() - t0
    ok = all(v == 0 for v in errors.values())
    detail = "errors " + ", ".join(f"{k}: {v}" for k, v in errors.items())
    assert report(capsys, 1, ok, detail, elapsed, 120)


# --- 2. bounded parity --------------------------------------------------------------------------


def test_criterion_2_bounded_parity(capsys):
    t0 = time.perf_counter()
    counts, fails = [], {}
    for N in (4, 8, 10):
        rep = cons.build_parity_bounded(N)
        fails[N] = len(rep.failures)
        counts.append(parameter_count(rep.model))
    elapsed = time.perf_counter() - t0
    increasing = all(a < b for a, b in zip(counts, counts[1:]))
    ok = increasing and all(v == 0 for v in fails.values())
    detail = f"exhaustive failures {fails}, parameter counts {counts}"
    assert report(capsys, 2, ok, detail, elapsed, 120)


# --- 3 and 4. depth reduction and failure witnesses ----------------------------------------------


def test_criterion_3_depth_reduction(capsys):
    t0 = time.perf_counter()
    mismatches, checked, not_exhaustive, retried = 0, 0, [], 0
    for index in range(HARD_COUNT):
        ct, n, _ = hard_case(index)
        rep = rs.depth_reduce_with_retries(ct, rs.Restriction.free(n), rng_seed=index)
        retried += rep.params != rs.StageParams()
        # exhaustive over every consistent input; the limit is raised so no case falls back to sampling
        eq = rs.check_equivalence(ct, rep.ct, rep.rho, exhaustive_limit=20)
        mismatches += eq.mismatches
        checked += eq.checked
        if not eq.exhaustive:
            not_exhaustive.append(index)
        assert rep.ct.num_layers == 0 and rep.c_new <= rep.c_bound
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and not not_exhaustive
    detail = (f"{HARD_COUNT} models, {checked} consistent inputs checked exhaustively, "
              f"{mismatches} mismatches, {retried} needed retry parameters")
    assert report(capsys, 3, ok, detail, elapsed, 600)


def _dyck_models():
    return [hard_model(300 + s, symbols=("(", ")"), layers=1 + s % 2) for s in range(3)]


def test_criterion_4_failure_witnesses(capsys):
    t0 = time.perf_counter()
    bad = []
    for index in range(HARD_COUNT):
        ct, n, _ = hard_case(index)
        cx = rs.demonstrate_failure(ct, "parity", n, rng_seed=index)
        rho = rs.Restriction.parse(cx.restriction)
        dec = ct.decisions(ct.encode([cx.word_a, cx.word_b]))
        good = (fl.parity_member(cx.word_a) != fl.parity_member(cx.word_b)
                and dec[0] == dec[1] and rho.consistent(cx.word_a) and rho.consistent(cx.word_b))
        if not good:
            bad.append(f"parity case {index}")
    n = 20
    m = int(0.2 * n)
    for k, model in enumerate(_dyck_models()):
        cx = rs.demonstrate_failure(model, "dyck1", n, rng_seed=k)
        ct = rs.lift(model, n)
        dec = ct.decisions(ct.encode([cx.word_a, cx.word_b]))
        framed = all(w[:m] == "(" * m and w[-m:] == ")" * m for w in (cx.word_a, cx.word_b))
        if not (fl.dyck_member(cx.word_a, 1) != fl.dyck_member(cx.word_b, 1) and dec[0] == dec[1] and framed):
            bad.append(f"dyck1 model {k}")
    elapsed = time.perf_counter() - t0
    detail = f"{HARD_COUNT} PARITY pairs and 3 DYCK1 pairs at n=20; invalid: {bad or 'none'}"
    assert report(capsys, 4, not bad, detail, elapsed, 300)


# --- 5. soft-attention decay ----------------------------------------------------------------------


def test_criterion_5_soft_attention_decay(capsys):
    t0 = time.perf_counter()
    grid = [16, 32, 64, 128, 256, 512, 1024]
    slopes, sound = [], []
    for model in soft_fixtures():
        curve = sens.decay_sweep(model, grid, trials=4, rng_seed=0)
        slopes.append(curve.slope)
        sound.append(curve.sound)
    elapsed = time.perf_counter() - t0
    ok = all(sound) and all(s <= -0.7 for s in slopes)
    detail = f"pointwise sound {sound}, slopes {[round(s, 3) for s in slopes]} (need <= -0.7)"
    assert report(capsys, 5, ok, detail, elapsed, 600)


# --- 6. oracle fidelity -------------------------------------------------------------------------------


def _dyck_oracle_check(p=0.5, prefixes=100, min_visits=400, seed=6):
    """z-test of the oracle's closing mass (closer, or EOS at height 0) per random prefix."""
    counts = fl.sample_derivation_stats(p, 1_000_000, fl.make_rng(seed), max_prefix=8)
    eligible = sorted(k for k, v in counts.items() if sum(v.values()) >= min_visits)
    chosen = fl.make_rng(seed + 1).choice(eligible, size=prefixes, replace=False)
    worst, zero_violations = 0.0, 0
    for x in chosen:
        c = counts[x]
        total = sum(c.values())
        d = fl.dyck_next_dist(x, p)
        for s, q in d.probs.items():
            if q == 0.0 and c.get(s, 0):
                zero_violations += 1
        closing = [s for s, q in d.probs.items() if q > 0 and s not in fl.OPENERS]
        q = sum(d[s] for s in closing)
        freq = sum(c.get(s, 0) for s in closing) / total
        worst = max(worst, abs(freq - q) / math.sqrt(q * (1 - q) / total))
    return worst, zero_violations, len(eligible)


def test_criterion_6_oracle_fidelity(capsys):
    t0 = time.perf_counter()
    worst_parity = 0.0
    for p in (0.1, 0.4, 0.7):
        for n in (8, 64, 512):
            got = ev.optimal_ce("parity", n, p, samples=20_000, rng_seed=n)
            worst_parity = max(worst_parity, abs(got.value - got.closed_form) / got.stderr)
    worst_dyck, zeros, pool = _dyck_oracle_check()
    elapsed = time.perf_counter() - t0
    ok = worst_parity <= 3 and worst_dyck <= 3 and zeros == 0
    detail = (f"PARITY worst |MC - closed form| = {worst_parity:.2f} SE over 9 (p, n); "
              f"DYCK worst = {worst_dyck:.2f} SE over 100 prefixes (of {pool} eligible), "
              f"{zeros} zero-probability violations")
    assert report(capsys, 6, ok, detail, elapsed, 300)


# --- 7. prediction merging and the gap bound ----------------------------------------------------------


def test_criterion_7_parity_tv_and_gap(capsys):
    t0 = time.perf_counter()
    ratios, chain = [], True
    for model in soft_fixtures():
        small = ev.parity_pair_tv(model, 16, trials=8)
        large = ev.parity_pair_tv(model, 1024, trials=8)
        ratios.append(small.mean_tv / large.mean_tv)
        chain &= small.chain_ok and large.chain_ok
    gaps = []
    with warnings.catch_warnings():
        # p = 1/2 has no stationary height law; the truncation warning is expected
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in range(3):
            stats = fl.height_chain_stats(0.5, seed=seed)
            gaps.append(ev.ce_gap_bound(0.5, stats.p0_lower))
    elapsed = time.perf_counter() - t0
    spread = max(gaps) - min(gaps)
    ok = all(r >= 4 for r in ratios) and chain and min(gaps) > 0 and spread <= 0.01
    detail = (f"TV ratios n=16/n=1024 {[round(r, 1) for r in ratios]} (need >= 4), chain bound held {chain}; "
              f"gap bounds {[round(g, 4) for g in gaps]} nats, spread {spread:.4f}")
    assert report(capsys, 7, ok, detail, elapsed, 300)


# --- 8. semantics invariants ------------------------------------------------------------------------


def test_criterion_8_semantics(capsys, tmp_path):
    t0 = time.perf_counter()
    checks = {}
    rng = fl.make_rng(8)
    scores = rng.normal(scale=20, size=(2000, 37))
    soft = attention_weights(scores, "soft")
    checks["softmax rows"] = bool(np.all(np.abs(soft.sum(axis=1) - 1) <= 1e-12))
    hard = attention_weights(scores, "hard")
    checks["one-hot rows"] = bool(np.all(hard.sum(axis=1) == 1) and set(np.unique(hard)) <= {0.0, 1.0})
    ties = np.array([[0.1, 0.7, 0.7, 0.2], [1.0, 1.0, 1.0, 1.0]])
    checks["earliest tie"] = attention_weights(ties, "hard").argmax(axis=1).tolist() == [1, 0]

    cfg = ModelConfig(alphabet=("0", "1", fl.EOS), num_layers=2, num_heads=2, model_dim=4, ff_hidden_dim=3,
                      weighting="soft", head="label", score_scale=1e6)
    base = random_model(cfg, fl.make_rng(12))
    ts, th = forward(base, "0110100$"), forward(with_config(base, weighting="hard"), "0110100$")
    checks["sharpening 1e-6"] = bool(np.max(np.abs(ts.final - th.final)) <= 1e-6)

    m = soft_model(100)
    path = tmp_path / "m.json"
    save_model(m, path)
    back = load_model(path)
    same = all(np.array_equal(a, b) for a, b in zip(forward(m, "0110").activations, forward(back, "0110").activations))
    checks["round trip"] = same and back.params.token_emb.tobytes() == m.params.token_emb.tobytes()

    words = ["".join(fl.make_rng(s).choice(["0", "1"], size=64)) for s in range(12)]
    ref = [forward(m, w).final for w in words]
    with ThreadPoolExecutor(4) as pool:
        got = list(pool.map(lambda w: forward(m, w).final, words))
    a = sens.decay_sweep(m, [16, 32], trials=2, threads=1)
    b = sens.decay_sweep(m, [16, 32], trials=2, threads=4)
    d1 = ev.draw("dyck2", 16, 0.4, 3000, seed=1, threads=1)
    d4 = ev.draw("dyck2", 16, 0.4, 3000, seed=1, threads=4)
    checks["thread determinism"] = (all(np.array_equal(x, y) for x, y in zip(ref, got))
                                    and a.max_delta == b.max_delta and d1.prefixes == d4.prefixes)
    elapsed = time.perf_counter() - t0
    ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items())
    assert report(capsys, 8, ok, detail, elapsed, 120)
