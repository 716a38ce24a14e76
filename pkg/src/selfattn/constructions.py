"""Hand-built transformers for languages that self-attention *can* handle.

* ``1*``: one hard head looks for a 0 anywhere and the model rejects if it finds one.
* ``a^n b^n``: layer 1 attends to the last position to learn ``n``; layer 2
  attends to any misplaced symbol (a ``b`` in the first half or an ``a`` in the
  second half). Odd word lengths are rejected through a ``(-1)^i`` positional
  feature.
* bounded PARITY: two uniform soft heads give ``#1s / n`` and ``1 / n``; a wide
  one-hidden-layer ReLU comb reads parity off a linear mix of the two. Exact up
  to the length bound, meaningless beyond it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import formal_langs as fl
from .transformer import (
    HeadParams,
    LayerParams,
    ModelConfig,
    ModelParams,
    Transformer,
    label_probs,
    parameter_count,
)

PARITY_N_CAP = 64


@dataclass
class ConstructionReport:
    model: Transformer
    language: str
    verified_upto: int
    sampled_upto: int
    failures: list[str] = field(default_factory=list)
    parameter_count: int = 0
    length_bound: int | None = None


def _zeros(*shape):
    return np.zeros(shape)


# --- 1* ----------------------------------------------------------------------------


def ones_star_model() -> Transformer:
    # coordinates: 0 is-zero, 1 constant, 2 flag
    cfg = ModelConfig(alphabet=("0", "1", fl.EOS), num_layers=1, num_heads=1, model_dim=3,
                      ff_hidden_dim=1, weighting="hard", positional="zero", head="label")
    emb = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    head = HeadParams(query=np.array([[0.0, 1.0, 0.0]]), key=np.array([[1.0, 0.0, 0.0]]))
    w1 = _zeros(1, 6)
    w1[0, 3] = 1.0  # attended is-zero
    w2 = _zeros(3, 1)
    w2[2, 0] = 1.0
    layer = LayerParams([head], w1, _zeros(1), w2, _zeros(3))
    out_w = np.array([[0.0, 0.0, 10.0], [0.0, 0.0, -10.0]])
    out_b = np.array([-5.0, 5.0])
    return Transformer(cfg, ModelParams(emb, [layer], out_w, out_b))


# --- a^n b^n ----------------------------------------------------------------------------

# token half
IS_A, IS_B, IS_EOS, N_SLOT, AJ, BJ, FLAG = range(7)
# positional half (offset by model_dim)
_K = 8
POS, ONE, SGN = _K, _K + 1, _K + 2


def anbn_model(capacity: int = 4096) -> Transformer:
    """Exact for every word with ``len(word) + 1 <= capacity``."""
    M = float(capacity)
    d = 2 * _K
    cfg = ModelConfig(alphabet=("a", "b", fl.EOS), num_layers=2, num_heads=1, model_dim=_K,
                      ff_hidden_dim=4, weighting="hard", combine="concat",
                      positional="index_sign", max_len=capacity, head="label")
    emb = _zeros(3, _K)
    emb[0, IS_A] = emb[1, IS_B] = emb[2, IS_EOS] = 1.0

    # layer 1: attend to the largest position, copy n; form j*[a at j] and j*[b at j]
    q1 = _zeros(1, d)
    q1[0, ONE] = 1.0
    k1 = _zeros(1, d)
    k1[0, POS] = 1.0
    w1 = _zeros(4, 2 * d)
    b1 = _zeros(4)
    w1[0, d + POS] = 1.0
    w1[1, POS], w1[1, IS_A], b1[1] = 1.0, M, -M
    w1[2, POS], w1[2, IS_B], b1[2] = 1.0, M, -M
    w2 = _zeros(d, 4)
    w2[N_SLOT, 0] = w2[AJ, 1] = w2[BJ, 2] = 1.0
    layer1 = LayerParams([HeadParams(q1, k1)], w1, b1, w2, _zeros(d))

    # layer 2: score (n - 1/2)(isB - isA) + 2(aj - bj) is positive exactly on misplaced symbols
    q2 = _zeros(2, d)
    q2[0, N_SLOT], q2[0, ONE] = 1.0, -0.5
    q2[1, ONE] = 1.0
    k2 = _zeros(2, d)
    k2[0, IS_B], k2[0, IS_A] = 1.0, -1.0
    k2[1, AJ], k2[1, BJ] = 2.0, -2.0
    w1b = _zeros(4, 2 * d)
    b1b = _zeros(4)
    # misplaced b: n - 1/2 - 2j >= 1/2
    w1b[0, N_SLOT], w1b[0, d + BJ], w1b[0, d + IS_B], b1b[0] = 1.0, -2.0, M, -0.5 - M
    # misplaced a: 2j - n + 1/2 >= 1/2
    w1b[1, N_SLOT], w1b[1, d + AJ], w1b[1, d + IS_A], b1b[1] = -1.0, 2.0, M, 0.5 - M
    # even n means odd word length
    w1b[2, SGN] = 1.0
    w2b = _zeros(d, 4)
    w2b[FLAG, 0] = w2b[FLAG, 1] = w2b[FLAG, 2] = 1.0
    layer2 = LayerParams([HeadParams(q2, k2)], w1b, b1b, w2b, _zeros(d))

    out_w = _zeros(2, d)
    out_w[0, FLAG], out_w[1, FLAG] = 20.0, -20.0
    out_b = np.array([-5.0, 5.0])
    return Transformer(cfg, ModelParams(emb, [layer1, layer2], out_w, out_b))


# --- bounded PARITY -------------------------------------------------------------------


def parity_comb_points(N: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Sorted comb inputs ``t = (c + lam) / n`` for all 1 <= n <= N + 1, 0 <= c < n,
    with target +1 for even ``c`` and -1 for odd. All ``t`` are distinct."""
    lam = 1.0 / (2 * (N + 1))
    pts = sorted(((c + lam) / n, 1.0 if c % 2 == 0 else -1.0)
                 for n in range(1, N + 2) for c in range(n))
    t = np.array([a for a, _ in pts])
    g = np.array([b for _, b in pts])
    return t, g, lam


def parity_bounded_model(N: int) -> Transformer:
    if not 0 <= N <= PARITY_N_CAP:
        raise fl.ConfigError(f"N must lie in [0, {PARITY_N_CAP}]")
    t, g, lam = parity_comb_points(N)
    slopes = np.diff(g) / np.diff(t)
    coeffs = np.diff(np.concatenate([[0.0], slopes]))  # one per breakpoint t_1..t_{P-1}
    units = max(len(coeffs), 1)
    d = 3  # is-one, is-eos, comb output
    cfg = ModelConfig(alphabet=("0", "1", fl.EOS), num_layers=1, num_heads=2, model_dim=d,
                      ff_hidden_dim=units, weighting="soft", positional="zero", head="label")
    emb = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    uniform = [HeadParams(_zeros(1, d), _zeros(1, d)) for _ in range(2)]
    w1 = _zeros(units, 3 * d)
    b1 = _zeros(units)
    w2 = _zeros(d, units)
    b2 = _zeros(d)
    for u, (tk, ck) in enumerate(zip(t[:-1], coeffs)):
        w1[u, d + 0] = 1.0        # head 1: mean of is-one = c/n
        w1[u, 2 * d + 1] = lam    # head 2: mean of is-eos = 1/n
        b1[u] = -tk
        w2[2, u] = ck
    b2[2] = g[0]
    out_w = np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 5.0]])
    return Transformer(cfg, ModelParams(emb, [LayerParams(uniform, w1, b1, w2, b2)], out_w, _zeros(2)))


# --- verification ------------------------------------------------------------------------


def all_words(symbols, length):
    return ["".join(w) for w in itertools.product(symbols, repeat=length)]


def verify_exhaustive(model: Transformer, language: str, upto: int, batch: int = 4096) -> list[str]:
    """Words of length <= ``upto`` where the model's decision disagrees with membership."""
    failures = []
    symbols = fl.LANGUAGE_SYMBOLS[language]
    for n in range(upto + 1):
        words = all_words(symbols, n)
        for s in range(0, len(words), batch):
            chunk = words[s:s + batch]
            acc = label_probs(model, chunk) >= 0.5
            failures += [w for w, a in zip(chunk, acc) if a != fl.member(language, w)]
    return failures


def random_words(language: str, n: int, count: int, rng: np.random.Generator) -> list[str]:
    """Uniform words mixed with members and single-symbol mutants of members where
    members exist at this length (uniform words alone almost never hit them)."""
    symbols = fl.LANGUAGE_SYMBOLS[language]
    idx = rng.integers(0, len(symbols), size=(count, n))
    words = ["".join(symbols[i] for i in row) for row in idx]
    template = {"ones_star": "1" * n, "anbn": "a" * (n // 2) + "b" * (n // 2) if n % 2 == 0 else None}.get(language)
    if template is None or n == 0:
        return words
    third = count // 3
    for r in range(third):
        words[r] = template
    for r in range(third, 2 * third):
        pos = int(rng.integers(n))
        other = [s for s in symbols if s != template[pos]]
        words[r] = template[:pos] + other[int(rng.integers(len(other)))] + template[pos + 1:]
    return words


def verify_sampled(model: Transformer, language: str, n: int, count: int,
                   rng: np.random.Generator, batch: int | None = None) -> list[str]:
    words = random_words(language, n, count, rng)
    batch = batch or max(1, 4096 // max(n, 1))  # keeps the n x n score blocks small
    failures = []
    for s in range(0, count, batch):
        chunk = words[s:s + batch]
        acc = label_probs(model, chunk) >= 0.5
        failures += [w for w, a in zip(chunk, acc) if a != fl.member(language, w)]
    return failures


def build_ones_star(verify_upto: int = 10) -> ConstructionReport:
    model = ones_star_model()
    fails = verify_exhaustive(model, "ones_star", verify_upto)
    return ConstructionReport(model, "ones_star", verify_upto, 0, fails, parameter_count(model))


def build_anbn(verify_upto: int = 10, capacity: int = 4096) -> ConstructionReport:
    model = anbn_model(capacity)
    fails = verify_exhaustive(model, "anbn", verify_upto)
    return ConstructionReport(model, "anbn", verify_upto, 0, fails, parameter_count(model))


def build_parity_bounded(N: int, verify: bool = True) -> ConstructionReport:
    model = parity_bounded_model(N)
    fails = verify_exhaustive(model, "parity", N) if verify else []
    return ConstructionReport(model, "parity", N if verify else 0, 0, fails,
                              parameter_count(model), length_bound=N)


def accuracy_at_length(model: Transformer, language: str, n: int, count: int,
                       rng: np.random.Generator) -> float:
    symbols = fl.LANGUAGE_SYMBOLS[language]
    idx = rng.integers(0, len(symbols), size=(count, n))
    words = ["".join(symbols[i] for i in row) for row in idx]
    correct = 0
    for s in range(0, count, 512):
        chunk = words[s:s + 512]
        acc = label_probs(model, chunk) >= 0.5
        correct += sum(a == fl.member(language, w) for w, a in zip(chunk, acc))
    return correct / count


def margin_report(N: int) -> dict:
    t, _, lam = parity_comb_points(N)
    return {"N": N, "points": len(t), "min_gap": float(np.diff(t).min()) if len(t) > 1 else math.inf,
            "lambda": lam}
