"""Influence of a single input symbol on the last activation of a soft-attention model.

Changing one symbol moves the final activation by O(1/N) for N positions:
soft attention spreads each query's weight over all positions and
``exp(2A) / N`` caps any single weight. :func:`analytic_bound` makes the
constants explicit in two forms:

* ``closed``: per layer ``C^{2k} D`` at the perturbed position and
  ``H^k C^{2k} D / N`` elsewhere, with ``C = 2 (1 + exp(2A) + L)``;
* ``rigorous``: a layer-by-layer recursion that also charges the change of the
  attention weights themselves (through the L1 Lipschitz constant of softmax).

:func:`decay_sweep` measures the actual effect and compares it with both.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import formal_langs as fl
from .transformer import LayerParams, ModelError, Transformer, final_activations, forward, positions

POWER_TOL = 1e-9
POWER_STEPS = 10_000
# power iteration approaches the norm from below; this relative margin keeps the result an upper bound
NORM_MARGIN = 1e-6


class ConvergenceError(ArithmeticError):
    pass


def op_norm(w: np.ndarray, tol: float = POWER_TOL, max_steps: int = POWER_STEPS) -> float:
    """Spectral norm upper bound: power iteration on ``w^T w``, inflated by ``NORM_MARGIN``.

    Power iteration approaches the top singular value from below and may stop
    short on near-degenerate spectra, so the result is also floored by the
    LAPACK singular value; the bound is then never below the true norm.
    """
    w = np.asarray(w, dtype=float)
    if w.size == 0 or not np.any(w):
        return 0.0
    scale = float(np.max(np.abs(w)))
    w = w / scale
    x = np.ones(w.shape[1]) + np.linspace(0.0, 1.0, w.shape[1])
    x /= np.linalg.norm(x)
    prev = 0.0
    for _ in range(max_steps):
        y = w.T @ (w @ x)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            # x landed in the null space; restart from the heaviest row of w
            x = w[np.argmax(np.abs(w).sum(axis=1))].copy()
            x /= np.linalg.norm(x)
            continue
        x = y / lam
        if abs(lam - prev) <= tol * lam:
            est = max(math.sqrt(lam), float(np.linalg.norm(w, 2)))
            return est * scale * (1 + NORM_MARGIN)
        prev = lam
    raise ConvergenceError(f"power iteration did not converge in {max_steps} steps")


def lipschitz_upper(layer: LayerParams) -> float:
    """Lipschitz bound of ``x -> y + W2 relu(W1 x + b1) + b2`` in its full input ``x = [y, b_1..b_H]``."""
    return 1.0 + op_norm(layer.w2) * op_norm(layer.w1)


# --- perturbation measurement ---------------------------------------------------------


def _require_soft(model: Transformer) -> None:
    if model.config.weighting != "soft":
        raise ModelError("the perturbation lemma concerns soft attention")


def perturb_pair(model: Transformer, word: str, i: int, replacement: str) -> np.ndarray:
    """Norms ``||y_j^(k) - y_j^(k)'||`` for every layer ``k`` (rows) and position ``j`` (columns).

    ``word`` is the full token sequence the model sees (for label models, ending
    in EOS). The final position may not be perturbed.
    """
    _require_soft(model)
    if not 0 <= i < len(word) - 1:
        raise ValueError(f"flip position must lie in [0, {len(word) - 1}); the final position is excluded")
    if replacement == word[i]:
        raise ValueError("replacement must differ from the original symbol")
    other = word[:i] + replacement + word[i + 1:]
    a, b = forward(model, word), forward(model, other)
    return np.stack([np.linalg.norm(x - y, axis=-1) for x, y in zip(a.activations, b.activations)])


# --- analytic bounds ------------------------------------------------------------------


@dataclass
class BoundConstants:
    n: int                          # number of positions, including the final one
    D: float
    F: list[float]                  # F[k] bounds ||y_j^(k)||
    A: list[float]                  # per layer, max over heads
    L_fact: float
    C: float
    attention_weight_bound: list[float]
    closed_perturbed: list[float]    # C^{2k} D
    closed_other: list[float]        # H^k C^{2k} D / n
    rigorous_perturbed: list[float]
    rigorous_other: list[float]

    @property
    def final(self) -> float:
        """Bound on the last-layer change at a position other than the flipped one."""
        return min(self.closed_other[-1], self.rigorous_other[-1])


def _exp(x: float) -> float:
    return math.exp(x) if x < 700 else math.inf


def _pow(x: float, k: int) -> float:
    try:
        return x ** k
    except OverflowError:
        return math.inf


def _head_constants(model: Transformer, hp, F: float) -> tuple[float, float]:
    """(A, G): score magnitude bound and score Lipschitz factor per unit change of either argument."""
    cfg = model.config
    s = abs(cfg.score_scale)
    nq, nk = op_norm(hp.query), op_norm(hp.key)
    if cfg.attention_kind == "dot":
        dh = hp.query.shape[0]
        c_att = s * nq * nk / math.sqrt(dh)
        return F * F * c_att, F * c_att
    c_att = s * float(np.linalg.norm(hp.score_vec)) * max(nq, nk)
    return 2 * F * c_att, c_att


def embedding_norm_bound(model: Transformer, n: int) -> float:
    """max over tokens and positions 0..n-1 of ``||y_j^(0)||``."""
    cfg, prm = model.config, model.params
    p = positions(cfg, prm, n)
    v = prm.token_emb
    if cfg.combine == "add":
        return float(np.max(np.linalg.norm(v[:, None, :] + p[None, :, :], axis=-1)))
    return float(math.sqrt(np.max(np.sum(v * v, axis=1)) + np.max(np.sum(p * p, axis=1))))


def embedding_gap(model: Transformer) -> float:
    """Largest ``||v_a - v_b||`` over word symbols (positions cancel for a flip)."""
    alpha = model.config.alpha
    rows = model.params.token_emb[[alpha.index(s) for s in alpha.word_symbols]]
    return float(np.max(np.linalg.norm(rows[:, None, :] - rows[None, :, :], axis=-1)))


def analytic_bound(model: Transformer, n: int, D: float | None = None) -> BoundConstants:
    """Constants and per-layer bounds for a flip at one of ``n`` positions (not the last).

    ``F`` carries the biases: ``F_k = F_{k-1} (1 + |W2||W1| sqrt(H + 1)) + |W2||b1| + |b2|``.
    """
    _require_soft(model)
    if n < 2:
        raise ValueError("need at least two positions")
    D = embedding_gap(model) if D is None else float(D)
    H = model.config.num_heads
    layers = model.params.layers
    F = [embedding_norm_bound(model, n)]
    for layer in layers:
        w1, w2 = op_norm(layer.w1), op_norm(layer.w2)
        F.append(F[-1] * (1 + w2 * w1 * math.sqrt(H + 1)) + w2 * float(np.linalg.norm(layer.b1))
                 + float(np.linalg.norm(layer.b2)))
    A, G, wbound = [], [], []
    for k, layer in enumerate(layers):
        consts = [_head_constants(model, hp, F[k]) for hp in layer.heads]
        A.append(max(a for a, _ in consts))
        G.append([g for _, g in consts])
        wbound.append(min(1.0, _exp(2 * A[-1]) / n))
    L_fact = max((lipschitz_upper(layer) for layer in layers), default=1.0)
    A_max = max(A, default=0.0)
    C = 2 * (1 + _exp(2 * A_max) + L_fact)
    K = len(layers)
    closed_p = [_pow(C, 2 * k) * D for k in range(K + 1)]
    closed_o = [0.0] + [_pow(H, k) * _pow(C, 2 * k) * D / n for k in range(1, K + 1)]

    # rigorous recursion: delta = perturbed position, eps = every other position
    rig_p, rig_o = [D], [0.0]
    for k, layer in enumerate(layers):
        d, e = rig_p[-1], rig_o[-1]
        m = max(d, e)
        w = wbound[k]
        Fk = F[k]
        b_other, b_self = [], []
        for g in G[k]:
            # |dw|_1 <= 2 max|da| over unperturbed keys + 2 w_max |da| at the perturbed key
            dw_other = 2 * g * 2 * e + 2 * w * g * (e + d)
            b_other.append(e + w * max(d - e, 0.0) + Fk * dw_other)
            b_self.append(m + Fk * 2 * g * (d + m))
        lw = op_norm(layer.w2) * op_norm(layer.w1)
        rig_p.append(d + lw * math.sqrt(d * d + sum(b * b for b in b_self)))
        rig_o.append(e + lw * math.sqrt(e * e + sum(b * b for b in b_other)))
    return BoundConstants(n, D, F, A, L_fact, C, wbound, closed_p, closed_o, rig_p, rig_o)


# --- decay sweep ----------------------------------------------------------------------


@dataclass
class DecayCurve:
    n_values: list[int]
    max_delta: list[float]
    closed_bound: list[float]
    rigorous_bound: list[float]
    slope: float
    flips_per_word: list[int] = field(default_factory=list)

    @property
    def sound(self) -> bool:
        return all(m <= p and m <= r for m, p, r in
                   zip(self.max_delta, self.closed_bound, self.rigorous_bound))

    def running_slopes(self) -> list[float]:
        return [loglog_slope(self.n_values[:k + 1], self.max_delta[:k + 1]) if k else math.nan
                for k in range(len(self.n_values))]


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Ordinary least-squares slope of log y on log x."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.maximum(np.asarray(ys, float), 1e-300))
    return float(np.polyfit(lx, ly, 1)[0])


def flip_positions(n: int, rng: np.random.Generator, spread: int = 16, extra: int = 8) -> np.ndarray:
    """Evenly spaced word positions (always including the first and last) plus a few random ones."""
    if n <= spread + extra:
        return np.arange(n)
    even = np.unique(np.linspace(0, n - 1, spread).round().astype(int))
    rand = rng.choice(n, size=extra, replace=False)
    return np.unique(np.concatenate([even, rand]))


def _measure(model: Transformer, n: int, trial_seeds: Sequence[int], fixed: Sequence[int] | None,
             chunk: int) -> tuple[float, int]:
    cfg = model.config
    alpha = cfg.alpha
    word_idx = np.array([alpha.index(s) for s in alpha.word_symbols])
    tail = [alpha.index(cfg.eos)] if cfg.head == "label" else []
    best = 0.0
    flips = 0
    for seed in trial_seeds:
        rng = fl.make_rng(seed)
        base = np.concatenate([rng.choice(word_idx, size=n), tail]).astype(np.int64)
        # the final position (EOS for label models, the last symbol otherwise) is never flipped
        pos = np.asarray(fixed) if fixed is not None else flip_positions(len(base) - 1, rng)
        rows = [base]
        for i in pos:
            alt = base.copy()
            choices = word_idx[word_idx != base[i]]
            alt[i] = choices[rng.integers(len(choices))]
            rows.append(alt)
        flips += len(pos)
        idx = np.stack(rows)
        y0 = final_activations(model, idx[:1])[0]
        for s in range(1, len(idx), chunk):
            y = final_activations(model, idx[s:s + chunk])
            best = max(best, float(np.max(np.linalg.norm(y - y0, axis=-1))))
    return best, flips


def decay_sweep(model: Transformer, n_grid: Sequence[int], trials: int = 4, rng_seed: int = 0,
                threads: int = 1, positions_: Sequence[int] | None = None,
                chunk: int = 8) -> DecayCurve:
    """Max ``||Δ y_last^(L)||`` over ``trials`` random words per length and a spread of flip positions.

    ``n_grid`` counts word symbols; label models add EOS, so the bound is taken at
    ``n + 1`` positions. ``positions_`` pins the flip positions instead. Each
    (length, trial) pair has its own seed, so results do not depend on ``threads``.
    """
    _require_soft(model)
    n_grid = list(n_grid)
    if n_grid != sorted(n_grid) or len(set(n_grid)) != len(n_grid):
        raise ValueError("n_grid must be strictly ascending")
    extra = 1 if model.config.head == "label" else 0
    jobs = [(n, [rng_seed * 1_000_003 + n * 1009 + t for t in range(trials)]) for n in n_grid]

    def run(job):
        n, seeds = job
        return _measure(model, n, seeds, positions_, chunk)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    deltas = [r[0] for r in results]
    bounds = [analytic_bound(model, n + extra) for n in n_grid]
    slope = loglog_slope(n_grid, deltas) if len(n_grid) > 1 else math.nan
    return DecayCurve(n_grid, deltas, [b.closed_other[-1] for b in bounds],
                      [b.rigorous_other[-1] for b in bounds], slope, [r[1] for r in results])
