"""Cross-entropy harness: model vs exact oracle vs unigram baseline.

All cross-entropies are in nats, measured per prefix: a length-``n`` prefix is
drawn from the generative process conditioned on the word reaching length
``n``, the true next symbol is drawn from the exact conditional law, and the
predictor is charged ``-log q(next | prefix)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import formal_langs as fl
from .sensitivity import flip_positions
from .transformer import ModelError, Transformer, final_activations, next_probs

CE_CAP = 50.0
LOG2 = math.log(2.0)
CHUNK = 2048

Predictor = Callable[[Sequence[str]], np.ndarray]


def language_symbols(language: str) -> tuple[str, ...]:
    """Next-symbol outcomes (word symbols then EOS) for a generative language."""
    if language not in ("parity", "dyck2"):
        raise fl.ConfigError(f"no generative process for {language!r}")
    return fl.LANGUAGE_SYMBOLS[language] + (fl.EOS,)


def as_predictor(model: Transformer | Predictor, language: str) -> Predictor:
    """Wrap a next-symbol transformer so its columns follow :func:`language_symbols`."""
    if not isinstance(model, Transformer):
        return model
    cfg = model.config
    if cfg.head != "next":
        raise ModelError("cross-entropy needs a next-symbol head")
    symbols = language_symbols(language)
    if set(cfg.alphabet) != set(symbols):
        raise ModelError(f"model alphabet {cfg.alphabet} does not match {language}")
    order = [cfg.alphabet.index(s) for s in symbols]

    def predict(prefixes):
        if not prefixes or not prefixes[0]:
            raise ModelError("transformers need a non-empty prefix")
        return next_probs(model, prefixes)[:, order]

    return predict


def oracle_predictor(language: str, p: float) -> Predictor:
    symbols = language_symbols(language)

    def predict(prefixes):
        return np.array([[fl.next_dist(language, x, p)[s] for s in symbols] for x in prefixes])

    return predict


def uniform_predictor(language: str) -> Predictor:
    k = len(language_symbols(language))
    return lambda prefixes: np.full((len(prefixes), k), 1.0 / k)


# --- sampling -----------------------------------------------------------------------


@dataclass
class Draws:
    prefixes: list[str]
    next_idx: np.ndarray
    oracle: np.ndarray   # exact next-symbol law per prefix


def draw(language: str, n: int, p: float, samples: int, seed: int, threads: int = 1) -> Draws:
    """Prefixes and next symbols, generated in fixed chunks with their own seeds."""
    symbols = language_symbols(language)
    seeds = np.random.SeedSequence(seed).spawn(max(1, math.ceil(samples / CHUNK)))
    sizes = [min(CHUNK, samples - k * CHUNK) for k in range(len(seeds))]

    def one(job):
        ss, size = job
        rng = np.random.Generator(np.random.PCG64(ss))
        prefixes = fl.sample_prefixes(language, n, p, size, rng)
        oracle = oracle_predictor(language, p)(prefixes) if size else np.zeros((0, len(symbols)))
        u = rng.random(size)
        nxt = np.minimum((oracle.cumsum(axis=1) < u[:, None]).sum(axis=1), len(symbols) - 1)
        return prefixes, nxt, oracle

    jobs = list(zip(seeds, sizes))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    return Draws([x for pr, _, _ in parts for x in pr],
                 np.concatenate([nx for _, nx, _ in parts]),
                 np.concatenate([o for _, _, o in parts]))


def _nll(probs: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, int]:
    q = probs[np.arange(len(idx)), idx]
    with np.errstate(divide="ignore"):
        nll = -np.log(q)
    capped = int(np.sum(~(nll <= CE_CAP)))
    return np.minimum(np.nan_to_num(nll, nan=CE_CAP, posinf=CE_CAP), CE_CAP), capped


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if len(x) < 2:
        return float(x.mean()) if len(x) else math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


# --- reports --------------------------------------------------------------------------


@dataclass
class CEReport:
    language: str
    n: int
    p: float
    model_ce: float
    optimal_ce: float
    unigram_ce: float
    gap: float
    stderr: float          # of model_ce
    gap_stderr: float      # paired over the same draws
    optimal_stderr: float
    samples: int
    seed: int
    capped: int = 0        # events charged CE_CAP because the model gave them ~zero probability
    class_ce: float = math.nan
    type_ce: float = math.nan

    def to_json(self) -> dict:
        out = asdict(self)
        out["units"] = "nats"
        out["gap_bits"] = self.gap / LOG2
        return out


def optimal_ce_closed_form(language: str, n: int, p: float) -> float:
    """PARITY only: the next symbol after an even prefix has entropy
    ``H_even = -p log p - (1-p) log((1-p)/2)``, after an odd one ``log 2``; for ``n >= 1``
    a surviving prefix is even or odd with probability 1/2 each."""
    if language != "parity":
        raise fl.ConfigError("closed form available for PARITY only")
    h_even = -(p * math.log(p) if p > 0 else 0.0) - (1 - p) * math.log((1 - p) / 2)
    return h_even if n == 0 else 0.5 * h_even + 0.5 * LOG2


@dataclass
class OptimalCE:
    value: float
    stderr: float
    closed_form: float | None


def optimal_ce(language: str, n: int, p: float, samples: int = 100_000, rng_seed: int = 0,
               threads: int = 1) -> OptimalCE:
    d = draw(language, n, p, samples, rng_seed, threads)
    nll, _ = _nll(d.oracle, d.next_idx)
    mean, se = _mean_se(nll)
    closed = optimal_ce_closed_form(language, n, p) if language == "parity" else None
    return OptimalCE(mean, se, closed)


def unigram_ce_from(unigram: fl.NextSymbolDist, language: str, d: Draws) -> np.ndarray:
    u = np.array([unigram[s] for s in language_symbols(language)])
    return _nll(np.tile(u, (len(d.prefixes), 1)), d.next_idx)[0]


def class_type_split(language: str, probs: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw ``-log q(class)`` and ``-log q(symbol | class)``; classes are
    openers versus closers-or-EOS. The two parts add up to the next-symbol NLL."""
    symbols = language_symbols(language)
    opener = np.array([s in fl.OPENERS or (language == "parity" and s != fl.EOS) for s in symbols])
    mass_open = probs[:, opener].sum(axis=1)
    in_open = opener[idx]
    q_class = np.where(in_open, mass_open, 1.0 - mass_open)
    q_sym = probs[np.arange(len(idx)), idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.log(q_class), -np.log(q_sym / q_class)


def model_ce(model: Transformer | Predictor, language: str, n: int, samples: int = 10_000,
             p: float = 0.5, rng_seed: int = 0, unigram: fl.NextSymbolDist | None = None,
             threads: int = 1, batch: int = 512) -> CEReport:
    predict = as_predictor(model, language)
    d = draw(language, n, p, samples, rng_seed, threads)
    probs = np.concatenate([predict(d.prefixes[s:s + batch]) for s in range(0, samples, batch)])
    m_nll, capped = _nll(probs, d.next_idx)
    o_nll, _ = _nll(d.oracle, d.next_idx)
    if unigram is None:
        unigram = fl.unigram_dist(language, p, n_symbols=200_000, seed=rng_seed).dist
    u_nll = unigram_ce_from(unigram, language, d)
    cls, typ = class_type_split(language, probs, d.next_idx)
    mean, se = _mean_se(m_nll)
    gap, gse = _mean_se(m_nll - o_nll)
    opt, ose = _mean_se(o_nll)
    return CEReport(language, n, p, mean, opt, float(u_nll.mean()), gap, se, gse, ose, samples,
                    rng_seed, capped, float(np.mean(cls)), float(np.mean(typ)))


def ce_gap_bound(p: float, P0: float) -> float:
    """Lower bound ``P0 (1 - p) log 2`` (nats) on the excess cross-entropy of a soft-attention model."""
    if not 0.0 <= P0 <= 1.0:
        raise ValueError("P0 must be a probability")
    return P0 * (1.0 - p) * LOG2


def ce_gap_bound_bits(p: float, P0: float) -> float:
    return ce_gap_bound(p, P0) / LOG2


# --- parity-pair TV -----------------------------------------------------------------


def head_lipschitz(model: Transformer) -> float:
    """``max_{r,s} ||W_r - W_s|| / 2``: bounds TV between output distributions per unit of
    activation change (softmax moves by at most the logit oscillation in L1)."""
    w = model.params.out_w
    diffs = w[:, None, :] - w[None, :, :]
    return 0.5 * float(np.max(np.linalg.norm(diffs, axis=-1)))


@dataclass
class TVReport:
    n: int
    mean_tv: float
    max_tv: float
    max_delta: float      # largest activation change among the same pairs
    head_lipschitz: float
    pairs: int
    chain_ok: bool        # every pair: TV <= head_lipschitz * ||Δy||


def parity_pair_tv(model: Transformer, n: int, trials: int = 8, rng_seed: int = 0,
                   chunk: int = 8) -> TVReport:
    """TV distance between output distributions on a random bit string and the same string
    with one bit flipped (never the last position the model reads)."""
    cfg = model.config
    if cfg.weighting != "soft":
        raise ModelError("parity_pair_tv concerns soft-attention models")
    alpha = cfg.alpha
    zero, one = alpha.index("0"), alpha.index("1")
    tail = [alpha.index(cfg.eos)] if cfg.head == "label" else []
    lip = head_lipschitz(model)
    tvs, deltas, ok = [], [], True
    for t in range(trials):
        rng = fl.make_rng(rng_seed * 1_000_003 + n * 1009 + t)
        bits = rng.integers(0, 2, size=n)
        base = np.concatenate([np.where(bits == 1, one, zero), tail]).astype(np.int64)
        limit = len(base) - 1
        pos = flip_positions(limit, rng)
        rows = [base]
        for i in pos:
            alt = base.copy()
            alt[i] = one if base[i] == zero else zero
            rows.append(alt)
        idx = np.stack(rows)
        y0 = final_activations(model, idx[:1])[0]
        p0 = _probs(model, y0[None])[0]
        for s in range(1, len(idx), chunk):
            y = final_activations(model, idx[s:s + chunk])
            pr = _probs(model, y)
            tv = 0.5 * np.abs(pr - p0).sum(axis=1)
            dl = np.linalg.norm(y - y0, axis=1)
            ok &= bool(np.all(tv <= lip * dl + 1e-15))
            tvs.extend(tv.tolist())
            deltas.extend(dl.tolist())
    return TVReport(n, float(np.mean(tvs)), float(np.max(tvs)), float(np.max(deltas)), lip, len(tvs), ok)


def _probs(model: Transformer, y: np.ndarray) -> np.ndarray:
    z = y @ model.params.out_w.T + model.params.out_b
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)
