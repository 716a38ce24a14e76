"""Formal languages, their generative processes, and exact next-symbol oracles.

Words are plain Python strings. The end-of-sequence marker is ``EOS`` and never
appears inside a word; oracles return it as a possible next symbol.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

EOS = "$"

PARITY_SYMBOLS = ("0", "1")
DYCK1_SYMBOLS = ("(", ")")
DYCK2_SYMBOLS = ("(", ")", "[", "]")
ONES_STAR_SYMBOLS = ("0", "1")
ANBN_SYMBOLS = ("a", "b")

OPENERS = {"(": ")", "[": "]"}
CLOSERS = {")": "(", "]": "["}


class LanguageInputError(ValueError):
    """A word contains a symbol outside the language's alphabet, or is not a valid prefix."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]
    eos: str = EOS

    def __post_init__(self):
        if not self.symbols:
            raise ConfigError("alphabet must be non-empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError(f"duplicate symbols in {self.symbols}")
        if self.eos not in self.symbols:
            raise ConfigError(f"eos {self.eos!r} must be one of the symbols")

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise LanguageInputError(f"unknown token {symbol!r}") from None

    @property
    def word_symbols(self) -> tuple[str, ...]:
        return tuple(s for s in self.symbols if s != self.eos)

    def __len__(self):
        return len(self.symbols)


@dataclass(frozen=True)
class NextSymbolDist:
    """Probability assignment over ``Σ ∪ {EOS}``."""

    probs: Mapping[str, float]

    def __post_init__(self):
        vals = np.array(list(self.probs.values()), dtype=float)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError(f"invalid probabilities {dict(self.probs)}")
        if abs(math.fsum(vals) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {math.fsum(vals)!r}, not 1")

    def __getitem__(self, symbol: str) -> float:
        return self.probs.get(symbol, 0.0)

    def support(self) -> list[str]:
        return [s for s, v in self.probs.items() if v > 0]

    def as_array(self, order: Iterable[str]) -> np.ndarray:
        return np.array([self[s] for s in order])

    def tv(self, other: "NextSymbolDist") -> float:
        keys = set(self.probs) | set(other.probs)
        return 0.5 * math.fsum(abs(self[k] - other[k]) for k in keys)

    def entropy(self) -> float:
        return -math.fsum(v * math.log(v) for v in self.probs.values() if v > 0)


def _check_symbols(word: str, allowed: Iterable[str]) -> None:
    allowed = set(allowed)
    for ch in word:
        if ch not in allowed:
            raise LanguageInputError(f"symbol {ch!r} not in alphabet {sorted(allowed)}")


def _check_p(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ConfigError(f"p must lie in (0, 1), got {p}")


# --- membership ---------------------------------------------------------------


def parity_member(word: str) -> bool:
    _check_symbols(word, PARITY_SYMBOLS)
    return word.count("1") % 2 == 0


def dyck_member(word: str, kinds: int = 2) -> bool:
    """Stack simulation: balanced, no underflow, no type mismatch."""
    if kinds not in (1, 2):
        raise ConfigError("kinds must be 1 or 2")
    _check_symbols(word, DYCK1_SYMBOLS if kinds == 1 else DYCK2_SYMBOLS)
    stack: list[str] = []
    for ch in word:
        if ch in OPENERS:
            stack.append(ch)
        elif not stack or stack.pop() != CLOSERS[ch]:
            return False
    return not stack


def dyck1_member_counter(word: str) -> bool:
    """Counter-based 1-Dyck membership (used as an independent check on the stack version)."""
    _check_symbols(word, DYCK1_SYMBOLS)
    height = 0
    for ch in word:
        height += 1 if ch == "(" else -1
        if height < 0:
            return False
    return height == 0


def ones_star_member(word: str) -> bool:
    _check_symbols(word, ONES_STAR_SYMBOLS)
    return "0" not in word


def anbn_member(word: str) -> bool:
    # k = 0 (the empty word) is a member.
    _check_symbols(word, ANBN_SYMBOLS)
    k, r = divmod(len(word), 2)
    return r == 0 and word == "a" * k + "b" * k


MEMBERS = {
    "parity": parity_member,
    "dyck1": lambda w: dyck_member(w, 1),
    "dyck2": lambda w: dyck_member(w, 2),
    "ones_star": ones_star_member,
    "anbn": anbn_member,
}

LANGUAGE_SYMBOLS = {
    "parity": PARITY_SYMBOLS,
    "dyck1": DYCK1_SYMBOLS,
    "dyck2": DYCK2_SYMBOLS,
    "ones_star": ONES_STAR_SYMBOLS,
    "anbn": ANBN_SYMBOLS,
}


def member(language: str, word: str) -> bool:
    try:
        return MEMBERS[language](word)
    except KeyError:
        raise ConfigError(f"unknown language {language!r}") from None


# --- next-symbol oracles -------------------------------------------------------


def parity_next_dist(prefix: str, p: float) -> NextSymbolDist:
    _check_p(p)
    if parity_member(prefix):
        return NextSymbolDist({"0": (1 - p) / 2, "1": (1 - p) / 2, EOS: p})
    return NextSymbolDist({"0": 0.5, "1": 0.5, EOS: 0.0})


def pending_closers(prefix: str) -> list[str]:
    """Stack of closers still owed after ``prefix``; raises on an invalid prefix."""
    _check_symbols(prefix, DYCK2_SYMBOLS)
    stack: list[str] = []
    for pos, ch in enumerate(prefix):
        if ch in OPENERS:
            stack.append(OPENERS[ch])
        elif not stack or stack[-1] != ch:
            raise LanguageInputError(f"invalid Dyck prefix {prefix!r} at position {pos + 1}")
        else:
            stack.pop()
    return stack


def dyck_next_dist(prefix: str, p: float) -> NextSymbolDist:
    """Exact conditional law of the next symbol under S -> (S)S | [S]S | ε.

    Each pending nonterminal expands to an opener with probability p (split
    evenly between the two types) and otherwise vanishes, which exposes the top
    pending closer, or EOS when nothing is pending.
    """
    _check_p(p)
    stack = pending_closers(prefix)
    probs = {"(": p / 2, "[": p / 2, ")": 0.0, "]": 0.0, EOS: 0.0}
    probs[stack[-1] if stack else EOS] = 1 - p
    return NextSymbolDist(probs)


def next_dist(language: str, prefix: str, p: float) -> NextSymbolDist:
    if language == "parity":
        return parity_next_dist(prefix, p)
    if language == "dyck2":
        return dyck_next_dist(prefix, p)
    raise ConfigError(f"no generative process for {language!r}")


# --- samplers ------------------------------------------------------------------


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_parity(p: float, rng: np.random.Generator, max_length: int | None = None) -> str | None:
    """One word from the two-state automaton; ``None`` if it outgrows ``max_length``."""
    _check_p(p)
    out = []
    ones = 0
    while True:
        if ones % 2 == 0 and rng.random() < p:
            return "".join(out)
        if max_length is not None and len(out) >= max_length:
            return None
        bit = "1" if rng.random() < 0.5 else "0"
        ones += bit == "1"
        out.append(bit)


def sample_dyck(p: float, rng: np.random.Generator, max_length: int | None = None) -> str | None:
    """One word from the 2-Dyck PCFG, generated left to right via the pending-closer stack.

    With ``max_length`` set, the draw is abandoned and ``None`` returned once the
    word would exceed it (p >= 1/2 makes the expected length infinite).
    """
    _check_p(p)
    out: list[str] = []
    stack: list[str] = []
    while True:
        if max_length is not None and len(out) >= max_length:
            return None
        u = rng.random()
        if u < p:
            opener = "(" if u < p / 2 else "["
            out.append(opener)
            stack.append(OPENERS[opener])
        elif stack:
            out.append(stack.pop())
        else:
            return "".join(out)


def sample_derivation_stats(p: float, n_words: int, rng: np.random.Generator,
                            max_prefix: int = 12) -> dict[str, dict[str, int]]:
    """Count next-symbol occurrences after each short prefix over ``n_words`` PCFG words.

    This samples whole derivations and tallies, for every prefix of length
    ``<= max_prefix`` that occurs, which symbol followed it. It is the Monte
    Carlo oracle for :func:`dyck_next_dist` and shares no code with it.
    """
    counts: dict[str, dict[str, int]] = {}
    for _ in range(n_words):
        word = _sample_dyck_by_rewriting(p, rng, max_prefix + 1)
        for t in range(min(len(word), max_prefix) + 1):
            nxt = word[t] if t < len(word) else EOS
            bucket = counts.setdefault(word[:t], {})
            bucket[nxt] = bucket.get(nxt, 0) + 1
            if nxt == EOS:
                break
    return counts


def _sample_dyck_by_rewriting(p: float, rng: np.random.Generator, horizon: int) -> str:
    """Leftmost-derivation rewriting of the sentential form, stopped once ``horizon``
    terminals are produced. Stopping early is harmless: only prefixes up to
    ``horizon - 1`` and their next symbol are inspected."""
    form = ["S"]
    out: list[str] = []
    while form and len(out) < horizon:
        sym = form.pop(0)
        if sym != "S":
            out.append(sym)
            continue
        u = rng.random()
        if u < p / 2:
            form[:0] = ["(", "S", ")", "S"]
        elif u < p:
            form[:0] = ["[", "S", "]", "S"]
    return "".join(out)


# --- prefixes of length n conditioned on the word reaching that length ---------


def _survival_table(step, n_states: int, n: int) -> list[np.ndarray]:
    """``table[r][s]`` proportional to P(at least r more symbols | state s)."""
    table = [np.ones(n_states)]
    for _ in range(n):
        nxt = step(table[-1])
        table.append(nxt / nxt.max())
    return table


def sample_prefixes(language: str, n: int, p: float, count: int,
                    rng: np.random.Generator) -> list[str]:
    """Exact draws of length-``n`` prefixes of words with length >= n.

    Sampling is the generative process reweighted by the probability of
    surviving the remaining steps, so no rejection is needed even when
    reaching length ``n`` is exponentially rare.
    """
    _check_p(p)
    if language == "parity":
        return _prefixes_parity(n, p, count, rng)
    if language == "dyck2":
        return _prefixes_dyck(n, p, count, rng)
    raise ConfigError(f"no generative process for {language!r}")


def _prefixes_parity(n, p, count, rng):
    def step(s):  # states: 0 even, 1 odd; both bits equally likely, bit 1 flips
        out = np.empty(2)
        out[0] = (1 - p) / 2 * (s[0] + s[1])
        out[1] = 0.5 * (s[1] + s[0])
        return out

    table = _survival_table(step, 2, n)
    state = np.zeros(count, dtype=np.int64)
    bits = np.empty((count, n), dtype=np.int8)
    for t in range(n):
        s = table[n - t - 1]
        # P(bit = 1 | survive) ∝ S(flipped state); bit 0 keeps the state.
        keep = s[state]
        flip = s[1 - state]
        one = rng.random(count) < flip / (keep + flip)
        bits[:, t] = one
        state = np.where(one, 1 - state, state)
    return ["".join("1" if b else "0" for b in row) for row in bits]


def _dyck_heights(n, p, count, rng):
    """Height paths (count, n) of conditioned Dyck prefixes; +1 open, -1 close."""
    size = n + 2

    def step(s):
        out = np.zeros(size)
        out[:-1] += p * s[1:]
        out[1:] += (1 - p) * s[:-1]
        return out

    table = _survival_table(step, size, n)
    h = np.zeros(count, dtype=np.int64)
    moves = np.empty((count, n), dtype=np.int8)
    for t in range(n):
        s = table[n - t - 1]
        up = p * s[h + 1]
        down = np.where(h > 0, (1 - p) * s[np.maximum(h - 1, 0)], 0.0)
        go_up = rng.random(count) * (up + down) < up
        moves[:, t] = np.where(go_up, 1, -1)
        h = h + moves[:, t]
    return moves


def _prefixes_dyck(n, p, count, rng):
    moves = _dyck_heights(n, p, count, rng)
    types = rng.random((count, n)) < 0.5
    words = []
    for mv, ty in zip(moves, types):
        out, stack = [], []
        for m, sq in zip(mv, ty):
            if m > 0:
                o = "[" if sq else "("
                out.append(o)
                stack.append(OPENERS[o])
            else:
                out.append(stack.pop())
        words.append("".join(out))
    return words


# --- height chain --------------------------------------------------------------


@dataclass
class HeightChainStats:
    p: float
    stationary: dict[int, float]
    p0_lower: float
    p0_stderr: float
    n_probe: int
    samples: int
    seed: int
    truncation_height: int
    leakage: float
    unbalanced_prob: float = field(default=float("nan"))


def even_step_transition(p: float, truncation_height: int) -> np.ndarray:
    """Two-symbol transition matrix on heights {0, 2, ..., 2T}.

    Within a word the height moves +1 w.p. p and -1 w.p. 1-p; at height 0 a new
    word begins, so the next bracket is an opener. Mass that would climb past
    the top state is reflected back onto it.
    """
    size = 2 * truncation_height + 1
    one = np.zeros((size, size))
    one[0, 1] = 1.0
    for h in range(1, size):
        one[h, min(h + 1, size - 1)] += p
        one[h, h - 1] += 1 - p
    two = one @ one
    even = np.arange(0, size, 2)
    return two[np.ix_(even, even)]


def _stationary(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    pi = np.abs(pi)
    return pi / pi.sum()


def height_chain_stats(p: float, truncation_height: int = 64, n_probe: int = 64,
                       samples: int = 1_000_000, seed: int = 0,
                       max_truncation: int = 2048) -> HeightChainStats:
    """Stationary law of the even-step height chain and a Monte-Carlo P0 estimate.

    ``p0_lower`` estimates P(length-``n_probe`` prefix is unbalanced and ends in
    a closing bracket), over prefixes drawn by :func:`sample_prefixes`.
    """
    _check_p(p)
    if truncation_height < 16:
        raise ConfigError("truncation_height must be >= 16")
    T = truncation_height
    while True:
        pi = _stationary(even_step_transition(p, T))
        leakage = float(pi[-1])
        if leakage <= 1e-6:
            break
        if 2 * T > max_truncation:
            warnings.warn(f"height chain truncation at {2 * T} still leaks {leakage:.3g} "
                          f"(p={p} has no stationary law when p >= 1/2)", RuntimeWarning)
            break
        warnings.warn(f"truncation leakage {leakage:.3g} > 1e-6, enlarging to {2 * T}", RuntimeWarning)
        T *= 2
    stationary = {2 * i: float(v) for i, v in enumerate(pi)}

    rng = make_rng(seed)
    moves = _dyck_heights(n_probe, p, samples, rng)
    height = moves.sum(axis=1)
    hits = (height > 0) & (moves[:, -1] < 0) if n_probe > 0 else np.zeros(samples, bool)
    p0 = float(hits.mean())
    return HeightChainStats(
        p=p, stationary=stationary, p0_lower=p0,
        p0_stderr=math.sqrt(max(p0 * (1 - p0), 1e-300) / samples),
        n_probe=n_probe, samples=samples, seed=seed, truncation_height=T,
        leakage=leakage, unbalanced_prob=float((height > 0).mean()),
    )


# --- unigram baseline ----------------------------------------------------------


@dataclass
class UnigramEstimate:
    dist: NextSymbolDist
    stderr: dict[str, float]
    symbols_counted: int
    seed: int


def unigram_dist(language: str, p: float, n_symbols: int = 1_000_000, seed: int = 0,
                 max_word_length: int = 100_000) -> UnigramEstimate:
    """Long-run symbol frequencies (EOS included) over a stream of sampled words.

    Standard errors come from batching the stream into 50 contiguous blocks.
    """
    _check_p(p)
    sampler = {"parity": sample_parity, "dyck2": sample_dyck}.get(language)
    if sampler is None:
        raise ConfigError(f"no generative process for {language!r}")
    symbols = (PARITY_SYMBOLS if language == "parity" else DYCK2_SYMBOLS) + (EOS,)
    rng = make_rng(seed)
    block_counts = []
    per_block = max(n_symbols // 50, 1)
    total = 0
    while total < n_symbols:
        counts = dict.fromkeys(symbols, 0)
        got = 0
        while got < per_block:
            w = sampler(p, rng, max_length=max_word_length)
            if w is None:
                continue
            for ch in w:
                counts[ch] += 1
            counts[EOS] += 1
            got += len(w) + 1
        block_counts.append(counts)
        total += got
    grand = {s: sum(b[s] for b in block_counts) for s in symbols}
    freqs = {s: grand[s] / total for s in symbols}
    # Renormalize exactly so NextSymbolDist validation passes.
    z = math.fsum(freqs.values())
    freqs = {s: v / z for s, v in freqs.items()}
    block_freq = np.array([[b[s] / sum(b.values()) for s in symbols] for b in block_counts])
    se = block_freq.std(axis=0, ddof=1) / math.sqrt(len(block_counts))
    return UnigramEstimate(NextSymbolDist(freqs), dict(zip(symbols, se.tolist())), total, seed)
