import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfattn import formal_langs as fl


def words(symbols, max_len):
    for n in range(max_len + 1):
        for w in itertools.product(symbols, repeat=n):
            yield "".join(w)


# --- membership --------------------------------------------------------------


@pytest.mark.parametrize("word,expected", [("", True), ("0110", True), ("1101", False)])
def test_parity_member(word, expected):
    assert fl.parity_member(word) is expected


@pytest.mark.parametrize("word,expected", [("([])", True), ("([)]", False), ("((", False), ("", True)])
def test_dyck_member(word, expected):
    assert fl.dyck_member(word, 2) is expected


@pytest.mark.parametrize("word,expected", [("111", True), ("", True), ("101", False)])
def test_ones_star(word, expected):
    assert fl.ones_star_member(word) is expected


@pytest.mark.parametrize("word,expected", [("aabb", True), ("aab", False), ("", True), ("ba", False), ("abab", False)])
def test_anbn(word, expected):
    assert fl.anbn_member(word) is expected


@pytest.mark.parametrize("fn,word", [
    (fl.parity_member, "012"),
    (lambda w: fl.dyck_member(w, 1), "([])"),
    (fl.ones_star_member, "1a"),
    (fl.anbn_member, "abc"),
])
def test_foreign_symbols_rejected(fn, word):
    with pytest.raises(fl.LanguageInputError):
        fn(word)


def test_parity_flips_with_one_bit():
    for w in words("01", 12):
        for i in range(len(w)):
            flipped = w[:i] + ("1" if w[i] == "0" else "0") + w[i + 1:]
            assert fl.parity_member(flipped) != fl.parity_member(w)


def test_dyck1_stack_equals_counter():
    for w in words("()", 14):
        assert fl.dyck_member(w, 1) == fl.dyck1_member_counter(w)


# --- next-symbol oracles -------------------------------------------------------


def test_parity_next_dist_examples():
    d = fl.parity_next_dist("", 0.4)
    assert d.probs == pytest.approx({fl.EOS: 0.4, "0": 0.3, "1": 0.3}, abs=1e-15)
    d = fl.parity_next_dist("1", 0.4)
    assert d.probs == pytest.approx({fl.EOS: 0.0, "0": 0.5, "1": 0.5}, abs=1e-15)
    for p in (0.1, 0.5, 0.9):
        assert fl.parity_next_dist("11", p)[fl.EOS] == p


def test_dyck_next_dist_examples():
    d = fl.dyck_next_dist("(", 0.5)
    assert d.probs == pytest.approx({"(": 0.25, "[": 0.25, ")": 0.5, "]": 0.0, fl.EOS: 0.0}, abs=1e-15)
    d = fl.dyck_next_dist("", 0.5)
    assert d.probs == pytest.approx({"(": 0.25, "[": 0.25, ")": 0.0, "]": 0.0, fl.EOS: 0.5}, abs=1e-15)
    assert fl.dyck_next_dist("()", 0.3)[fl.EOS] == pytest.approx(0.7)


@pytest.mark.parametrize("prefix", ["(]", ")", "([)"])
def test_dyck_next_dist_rejects_invalid_prefix(prefix):
    with pytest.raises(fl.LanguageInputError):
        fl.dyck_next_dist(prefix, 0.5)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_bad_p(p):
    with pytest.raises(fl.ConfigError):
        fl.parity_next_dist("", p)


def _valid_dyck_prefixes(max_len):
    for w in words("()[]", max_len):
        try:
            fl.pending_closers(w)
        except fl.LanguageInputError:
            continue
        yield w


@given(st.floats(0.01, 0.99))
@settings(max_examples=30, deadline=None)
def test_dyck_oracle_properties(p):
    for x in _valid_dyck_prefixes(5):
        d = fl.dyck_next_dist(x, p)
        assert abs(math.fsum(d.probs.values()) - 1.0) <= 1e-12
        stack = fl.pending_closers(x)
        if stack:
            wrong = "]" if stack[-1] == ")" else ")"
            assert d[wrong] == 0.0
        for s, q in d.probs.items():
            if q > 0 and s != fl.EOS:
                fl.pending_closers(x + s)  # still a valid prefix
            if s == fl.EOS and q > 0:
                assert fl.dyck_member(x, 2)


def test_next_symbol_dist_validation():
    with pytest.raises(ValueError):
        fl.NextSymbolDist({"a": 0.5, "b": 0.6})
    with pytest.raises(ValueError):
        fl.NextSymbolDist({"a": 1.2, "b": -0.2})


def test_dyck_oracle_against_derivations():
    rng = fl.make_rng(11)
    counts = fl.sample_derivation_stats(0.5, 200_000, rng, max_prefix=4)
    checked = 0
    for prefix, c in counts.items():
        total = sum(c.values())
        if total < 2000:
            continue
        d = fl.dyck_next_dist(prefix, 0.5)
        for s, q in d.probs.items():
            freq = c.get(s, 0) / total
            if q == 0:
                assert c.get(s, 0) == 0
            else:
                se = math.sqrt(q * (1 - q) / total)
                assert abs(freq - q) <= 4 * se, (prefix, s, freq, q)
        checked += 1
    assert checked >= 10


# --- samplers ----------------------------------------------------------------


def test_dyck_samples_are_members():
    rng = fl.make_rng(3)
    for _ in range(2000):
        w = fl.sample_dyck(0.45, rng)
        assert fl.dyck_member(w, 2)


def test_parity_empty_word_rate():
    rng = fl.make_rng(5)
    p = 0.3
    draws = 100_000
    empty = sum(fl.sample_parity(p, rng) == "" for _ in range(draws))
    se = math.sqrt(p * (1 - p) / draws)
    assert abs(empty / draws - p) <= 3 * se


def test_parity_samples_are_members():
    rng = fl.make_rng(8)
    assert all(fl.parity_member(fl.sample_parity(0.2, rng)) for _ in range(1000))


def test_sample_max_length_gives_none():
    rng = fl.make_rng(1)
    results = [fl.sample_dyck(0.49, rng, max_length=2) for _ in range(200)]
    assert any(r is None for r in results)
    assert all(r is None or len(r) <= 2 for r in results)


@pytest.mark.parametrize("language", ["parity", "dyck2"])
def test_sample_prefixes_are_prefixes(language):
    rng = fl.make_rng(4)
    out = fl.sample_prefixes(language, 10, 0.4, 500, rng)
    assert all(len(x) == 10 for x in out)
    if language == "dyck2":
        for x in out:
            fl.pending_closers(x)


def test_sample_prefixes_match_rejection_sampling():
    # exact conditioned sampler vs brute-force rejection at a small length
    p, n = 0.4, 4
    rng = fl.make_rng(9)
    exact = fl.sample_prefixes("dyck2", n, p, 40_000, rng)
    rejected = []
    while len(rejected) < 40_000:
        w = fl.sample_dyck(p, rng, max_length=200)
        if w is not None and len(w) >= n:
            rejected.append(w[:n])
    for key in ("(())", "()()", "(((("):
        a = sum(_shape(x) == key for x in exact) / len(exact)
        b = sum(_shape(x) == key for x in rejected) / len(rejected)
        se = math.sqrt(max(a * (1 - a), 1e-4) * 2 / 40_000)
        assert abs(a - b) <= 4 * se, (key, a, b)


def _shape(x):
    return x.replace("[", "(").replace("]", ")")


def test_parity_prefix_parity_is_balanced():
    # surviving prefixes of length >= 1 are even or odd with probability 1/2 each
    rng = fl.make_rng(2)
    out = fl.sample_prefixes("parity", 7, 0.6, 40_000, rng)
    even = np.mean([fl.parity_member(x) for x in out])
    assert abs(even - 0.5) <= 3 * math.sqrt(0.25 / 40_000)


# --- height chain and unigram ----------------------------------------------------


def test_height_chain_odd_probe_always_unbalanced():
    stats = fl.height_chain_stats(0.3, n_probe=33, samples=20_000, seed=1)
    assert stats.unbalanced_prob == 1.0


def test_height_chain_stationary_matches_brute_force():
    p = 0.3
    stats = fl.height_chain_stats(p, n_probe=8, samples=1000)
    assert abs(math.fsum(stats.stationary.values()) - 1.0) <= 1e-9
    for h in (2, 4, 6):
        assert stats.stationary[h] / stats.stationary[0] == pytest.approx(_brute_ratio(p, h), rel=1e-6)
    assert 0 < stats.p0_lower < 1


def _brute_ratio(p, h):
    # Reference: brute-force stationary law of the one-step renewal chain (height 0 always opens),
    # restricted to even times, via a large truncated power iteration.
    size = 400
    P = np.zeros((size, size))
    P[0, 1] = 1.0
    for k in range(1, size - 1):
        P[k, k + 1] = p
        P[k, k - 1] = 1 - p
    P[size - 1, size - 2] = 1.0
    P2 = P @ P
    pi = np.zeros(size)
    pi[0] = 1.0
    for _ in range(5000):
        pi = pi @ P2
    return pi[h] / pi[0]


def test_height_chain_leakage_warns_at_half():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fl.height_chain_stats(0.5, truncation_height=16, n_probe=8, samples=100, max_truncation=64)
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_height_chain_rejects_small_truncation():
    with pytest.raises(fl.ConfigError):
        fl.height_chain_stats(0.3, truncation_height=8)


def test_unigram_symmetry():
    est = fl.unigram_dist("dyck2", 0.4, n_symbols=200_000, seed=3)
    d = est.dist
    assert abs(d["("] - d["["]) <= 4 * math.hypot(est.stderr["("], est.stderr["["])
    est = fl.unigram_dist("parity", 0.05, n_symbols=200_000, seed=3)
    assert abs(est.dist["0"] - est.dist["1"]) <= 4 * math.hypot(est.stderr["0"], est.stderr["1"])


def test_unigram_parity_closed_form():
    # Renewal reward: a word has expected length L with E[#EOS] = 1, so P(EOS) = 1 / (L + 1).
    # Expected length from the two-state chain: from even, stop w.p. p; from odd never stop.
    p = 0.4
    e_even = _expected_parity_length(p)
    est = fl.unigram_dist("parity", p, n_symbols=400_000, seed=5)
    assert est.dist[fl.EOS] == pytest.approx(1 / (e_even + 1), abs=4 * est.stderr[fl.EOS] + 1e-4)
    assert est.dist["0"] == pytest.approx(est.dist["1"], abs=4 * est.stderr["0"] + 1e-4)


def _expected_parity_length(p):
    # solve E = A E + b for the expected remaining length from (even, odd)
    A = np.array([[(1 - p) / 2, (1 - p) / 2], [0.5, 0.5]])
    b = np.array([1 - p, 1.0])
    return float(np.linalg.solve(np.eye(2) - A, b)[0])
