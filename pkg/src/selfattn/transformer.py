"""Transformer semantics with hard or soft attention, implemented directly in numpy.

Activations keep one width throughout the stack (the skip connection needs it):
``model_dim`` under additive combination, ``2 * model_dim`` under concatenation.
Layer ``k`` reads ``y^(k-1)``, forms per-head attention scores, mixes
previous-layer activations by the attention weights, and applies a two-layer
ReLU network plus identity skip to ``[y_i, b_i1, ..., b_iH]``.

Everything is float64. Batched entry points take integer token-index arrays of
shape ``(batch, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .formal_langs import EOS, Alphabet, LanguageInputError, NextSymbolDist

ATTENTION_KINDS = ("dot", "additive")
WEIGHTINGS = ("hard", "soft")
COMBINES = ("add", "concat")
HEAD_KINDS = ("label", "next")


class ModelError(ValueError):
    """Inconsistent configuration or parameters."""


class NumericError(ArithmeticError):
    def __init__(self, layer: int, position: int, message: str = "non-finite activation"):
        super().__init__(f"{message} at layer {layer}, position {position + 1}")
        self.layer = layer
        self.position = position


# --- positional schemes ---------------------------------------------------------


def sinusoidal_positions(n: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Rows are positions 1..n; even channels sin, odd channels cos."""
    pos = np.arange(1, n + 1, dtype=float)[:, None]
    ch = np.arange(dim)
    freq = base ** (-(2 * (ch // 2)) / dim)
    angle = pos * freq[None, :]
    return np.where(ch % 2 == 0, np.sin(angle), np.cos(angle))


def _index_sign(n: int, dim: int) -> np.ndarray:
    # p_i = (i, 1, (-1)^i, 0, ...)
    out = np.zeros((n, dim))
    i = np.arange(1, n + 1)
    out[:, 0] = i
    if dim > 1:
        out[:, 1] = 1.0
    if dim > 2:
        out[:, 2] = np.where(i % 2 == 0, 1.0, -1.0)
    return out


CUSTOM_POSITIONS: dict[str, Callable[[int, int], np.ndarray]] = {
    "zero": lambda n, dim: np.zeros((n, dim)),
    "index_sign": _index_sign,
}


# --- configuration and parameters --------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    alphabet: tuple[str, ...]
    num_layers: int
    num_heads: int
    model_dim: int
    ff_hidden_dim: int
    attention_kind: str = "dot"
    weighting: str = "soft"
    combine: str = "add"
    positional: str = "sinusoidal"
    max_len: int | None = None
    head: str = "label"
    eos: str = EOS
    score_scale: float = 1.0
    tie_eps: float = 0.0
    sinusoid_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        Alphabet(self.alphabet, self.eos)
        for name in ("num_layers",):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be >= 0")
        for name in ("num_heads", "model_dim", "ff_hidden_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ModelError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.weighting not in WEIGHTINGS:
            raise ModelError(f"weighting must be one of {WEIGHTINGS}")
        if self.combine not in COMBINES:
            raise ModelError(f"combine must be one of {COMBINES}")
        if self.head not in HEAD_KINDS:
            raise ModelError(f"head must be one of {HEAD_KINDS}")
        if self.positional == "learned":
            if not self.max_len or self.max_len < 1:
                raise ModelError("learned positions need max_len")
        elif self.positional != "sinusoidal" and self.positional not in CUSTOM_POSITIONS:
            raise ModelError(f"unknown positional scheme {self.positional!r}")

    @property
    def width(self) -> int:
        return self.model_dim * (2 if self.combine == "concat" else 1)

    @property
    def out_dim(self) -> int:
        return 2 if self.head == "label" else len(self.alphabet)

    @property
    def alpha(self) -> Alphabet:
        return Alphabet(self.alphabet, self.eos)


@dataclass
class HeadParams:
    """Score parameters of one head.

    Dot-product: ``a_ij = scale * (Q y_i).(K y_j) / sqrt(dh)``.
    Additive: ``a_ij = scale * v . tanh(Q y_i + K y_j)``.
    """

    query: np.ndarray
    key: np.ndarray
    score_vec: np.ndarray | None = None


@dataclass
class LayerParams:
    heads: list[HeadParams]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelParams:
    token_emb: np.ndarray
    layers: list[LayerParams]
    out_w: np.ndarray
    out_b: np.ndarray
    pos_table: np.ndarray | None = None


@dataclass
class Transformer:
    config: ModelConfig
    params: ModelParams

    def __post_init__(self):
        validate(self.config, self.params)


def validate(cfg: ModelConfig, prm: ModelParams) -> None:
    def check(arr, shape, what):
        if arr is None or tuple(arr.shape) != tuple(shape):
            got = None if arr is None else tuple(arr.shape)
            raise ModelError(f"{what} has shape {got}, expected {tuple(shape)}")
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"{what} contains non-finite entries")

    d = cfg.width
    check(prm.token_emb, (len(cfg.alphabet), cfg.model_dim), "token_emb")
    if cfg.positional == "learned":
        check(prm.pos_table, (cfg.max_len, cfg.model_dim), "pos_table")
    if len(prm.layers) != cfg.num_layers:
        raise ModelError(f"{len(prm.layers)} layers given, config says {cfg.num_layers}")
    for k, layer in enumerate(prm.layers):
        if len(layer.heads) != cfg.num_heads:
            raise ModelError(f"layer {k + 1}: {len(layer.heads)} heads, config says {cfg.num_heads}")
        for h, hp in enumerate(layer.heads):
            dh = hp.query.shape[0]
            check(hp.query, (dh, d), f"layer {k + 1} head {h + 1} query")
            check(hp.key, (dh, d), f"layer {k + 1} head {h + 1} key")
            if cfg.attention_kind == "additive":
                check(hp.score_vec, (dh,), f"layer {k + 1} head {h + 1} score_vec")
        check(layer.w1, (cfg.ff_hidden_dim, d * (cfg.num_heads + 1)), f"layer {k + 1} w1")
        check(layer.b1, (cfg.ff_hidden_dim,), f"layer {k + 1} b1")
        check(layer.w2, (d, cfg.ff_hidden_dim), f"layer {k + 1} w2")
        check(layer.b2, (d,), f"layer {k + 1} b2")
    check(prm.out_w, (cfg.out_dim, d), "out_w")
    check(prm.out_b, (cfg.out_dim,), "out_b")


# --- trace ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer activations ``y[k]`` (n, width), scores ``a[k][h]`` and weights ``w[k][h]``
    (n, n), and head outputs ``b[k][h]`` (n, width). Layer index 0 in ``scores`` is layer 1."""

    tokens: tuple[str, ...]
    activations: list[np.ndarray]
    scores: list[list[np.ndarray]] = field(default_factory=list)
    weights: list[list[np.ndarray]] = field(default_factory=list)
    head_outputs: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.activations[-1][-1]

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "activations": [a.tolist() for a in self.activations],
            "scores": [[s.tolist() for s in layer] for layer in self.scores],
            "weights": [[w.tolist() for w in layer] for layer in self.weights],
            "head_outputs": [[b.tolist() for b in layer] for layer in self.head_outputs],
        }


# --- primitives ---------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def attention_weights(scores: np.ndarray, weighting: str, tie_eps: float = 0.0) -> np.ndarray:
    """Row-wise attention weights over the last axis.

    Hard weighting puts all mass on the row maximum, earliest position on ties.
    ``tie_eps`` > 0 treats scores within ``tie_eps * |max|`` of the maximum as tied.
    """
    scores = np.asarray(scores, dtype=float)
    if weighting == "soft":
        return softmax(scores)
    if weighting != "hard":
        raise ModelError(f"unknown weighting {weighting!r}")
    idx = hard_argmax(scores, tie_eps)
    out = np.zeros_like(scores)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def hard_argmax(scores: np.ndarray, tie_eps: float = 0.0) -> np.ndarray:
    """Index of the row maximum, earliest on ties (np.argmax already returns the first)."""
    if tie_eps > 0:
        top = scores.max(axis=-1, keepdims=True)
        return np.argmax(scores >= top - tie_eps * np.abs(top), axis=-1)
    return np.argmax(scores, axis=-1)


def head_scores(hp: HeadParams, cfg: ModelConfig, yq: np.ndarray, yk: np.ndarray) -> np.ndarray:
    """Scores between query rows ``yq`` (..., m, d) and key rows ``yk`` (..., n, d) -> (..., m, n)."""
    if cfg.weighting == "hard":
        # Elementwise products reduced along the last axis: every entry depends only on its
        # own pair of rows, never on batch shape or BLAS blocking, so argmax ties and
        # maxima computed elsewhere (restriction engine) agree bit-for-bit.
        q = _rowdot(yq, hp.query)
        k = _rowdot(yk, hp.key)
        s = None
        for c in range(q.shape[-1]):
            qc, kc = q[..., :, None, c], k[..., None, :, c]
            term = qc * kc if cfg.attention_kind == "dot" else np.tanh(qc + kc) * hp.score_vec[c]
            if s is None:
                s = term
            else:
                s += term
        if cfg.attention_kind == "dot" and q.shape[-1] > 1:
            s /= math.sqrt(q.shape[-1])
    else:
        q = yq @ hp.query.T
        k = yk @ hp.key.T
        if cfg.attention_kind == "dot":
            s = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(hp.query.shape[0])
        else:
            s = np.tanh(q[..., :, None, :] + k[..., None, :, :]) @ hp.score_vec
    return s * cfg.score_scale if cfg.score_scale != 1.0 else s


def _rowdot(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``y @ w.T`` accumulated column by column in a fixed order."""
    out = np.zeros(y.shape[:-1] + (w.shape[0],))
    for c in range(w.shape[1]):
        if np.any(w[:, c]):
            out += y[..., c:c + 1] * w[:, c]
    return out


def ffn(layer: LayerParams, y: np.ndarray, bs: Sequence[np.ndarray]) -> np.ndarray:
    x = np.concatenate([y, *bs], axis=-1)
    hidden = np.maximum(x @ layer.w1.T + layer.b1, 0.0)
    return y + hidden @ layer.w2.T + layer.b2


def positions(cfg: ModelConfig, prm: ModelParams, n: int) -> np.ndarray:
    if cfg.positional == "sinusoidal":
        return sinusoidal_positions(n, cfg.model_dim, cfg.sinusoid_base)
    if cfg.positional == "learned":
        if n > cfg.max_len:
            raise LanguageInputError(f"length {n} exceeds learned position table ({cfg.max_len})")
        return prm.pos_table[:n]
    if cfg.max_len is not None and n > cfg.max_len:
        raise LanguageInputError(f"length {n} exceeds positional capacity ({cfg.max_len})")
    return CUSTOM_POSITIONS[cfg.positional](n, cfg.model_dim)


def tokenize(cfg: ModelConfig, word: Sequence[str] | str) -> np.ndarray:
    alpha = cfg.alpha
    idx = np.array([alpha.index(t) for t in word], dtype=np.int64)
    if len(idx) == 0:
        raise LanguageInputError("empty input; label models need at least the EOS token")
    if cfg.head == "label" and word[-1] != cfg.eos:
        raise LanguageInputError("label models expect the input to end with EOS")
    return idx


def embed_indices(model: Transformer, idx: np.ndarray) -> np.ndarray:
    """Layer-0 activations for token indices of shape (batch, n) or (n,)."""
    cfg, prm = model.config, model.params
    n = idx.shape[-1]
    v = prm.token_emb[idx]
    p = np.broadcast_to(positions(cfg, prm, n), v.shape)
    if cfg.combine == "add":
        return v + p
    return np.concatenate([v, p], axis=-1)


def embed(model: Transformer, word: Sequence[str] | str) -> np.ndarray:
    return embed_indices(model, tokenize(model.config, word))


def run_layer(cfg: ModelConfig, layer: LayerParams, y: np.ndarray, rows=None, keep: bool = False):
    """Apply one layer to ``y`` (..., n, d). ``rows`` limits which query rows are computed.

    Returns the new activations (for ``rows`` only, when given) and, with
    ``keep``, the per-head (scores, weights, head outputs).
    """
    yq = y if rows is None else y[..., rows, :]
    bs, ss, ws = [], [], []
    for hp in layer.heads:
        s = head_scores(hp, cfg, yq, y)
        if cfg.weighting == "hard" and not keep:
            # gather the attended rows instead of multiplying by a one-hot matrix
            j = hard_argmax(s, cfg.tie_eps)
            b = np.take_along_axis(y, j[..., None], axis=-2)
        else:
            w = attention_weights(s, cfg.weighting, cfg.tie_eps)
            b = w @ y
        bs.append(b)
        if keep:
            ss.append(s)
            ws.append(w)
    out = ffn(layer, yq, bs)
    return out, (ss, ws, bs)


def _check_finite(y: np.ndarray, layer: int) -> None:
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(y))[0]
        raise NumericError(layer, int(bad[-2]))


def forward(model: Transformer, word: Sequence[str] | str) -> ForwardTrace:
    idx = tokenize(model.config, word)
    y = embed_indices(model, idx)
    _check_finite(y, 0)
    trace = ForwardTrace(tuple(word), [y])
    for k, layer in enumerate(model.params.layers, start=1):
        y, (ss, ws, bs) = run_layer(model.config, layer, y, keep=True)
        _check_finite(y, k)
        trace.activations.append(y)
        trace.scores.append(ss)
        trace.weights.append(ws)
        trace.head_outputs.append(bs)
    return trace


def final_activations(model: Transformer, idx: np.ndarray) -> np.ndarray:
    """``y_n^(L)`` for a batch of index arrays (batch, n); only the last row of the top layer is computed."""
    y = embed_indices(model, idx)
    layers = model.params.layers
    for k, layer in enumerate(layers, start=1):
        rows = [-1] if k == len(layers) else None
        y, _ = run_layer(model.config, layer, y, rows=rows)
        _check_finite(y, k)
    return y[..., -1, :]


def output_probs(prm: ModelParams, y_last: np.ndarray) -> np.ndarray:
    return softmax(y_last @ prm.out_w.T + prm.out_b)


def predict_label(trace: ForwardTrace, params: ModelParams) -> float:
    """Probability of label 1 from the last activation; accept when >= 0.5."""
    return float(output_probs(params, trace.final)[1])


def predict_next(trace: ForwardTrace, model: Transformer) -> NextSymbolDist:
    probs = output_probs(model.params, trace.final)
    probs = probs / math.fsum(probs)
    return NextSymbolDist(dict(zip(model.config.alphabet, probs.tolist())))


def label_probs(model: Transformer, words: Sequence[str]) -> np.ndarray:
    """P(label 1) for many same-length words (EOS appended here)."""
    cfg = model.config
    alpha = cfg.alpha
    idx = np.array([[alpha.index(c) for c in w] + [alpha.index(cfg.eos)] for w in words], dtype=np.int64)
    return output_probs(model.params, final_activations(model, idx))[:, 1]


def accepts(model: Transformer, word: str) -> bool:
    return bool(label_probs(model, [word])[0] >= 0.5)


def next_probs(model: Transformer, prefixes: Sequence[str]) -> np.ndarray:
    """Next-symbol distributions (rows follow ``config.alphabet``) for same-length prefixes."""
    cfg = model.config
    alpha = cfg.alpha
    idx = np.array([[alpha.index(c) for c in w] for w in prefixes], dtype=np.int64)
    return output_probs(model.params, final_activations(model, idx))


def parameter_count(model: Transformer) -> int:
    prm = model.params
    total = prm.token_emb.size + prm.out_w.size + prm.out_b.size
    if prm.pos_table is not None:
        total += prm.pos_table.size
    for layer in prm.layers:
        total += layer.w1.size + layer.b1.size + layer.w2.size + layer.b2.size
        for hp in layer.heads:
            total += hp.query.size + hp.key.size
            if hp.score_vec is not None:
                total += hp.score_vec.size
    return int(total)


def with_config(model: Transformer, **changes) -> Transformer:
    return Transformer(replace(model.config, **changes), model.params)


def random_model(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.5,
                 head_dim: int | None = None) -> Transformer:
    """Gaussian weights with standard deviation ``scale / sqrt(fan_in)``."""
    d = cfg.width
    dh = head_dim or d

    def g(*shape):
        fan_in = shape[-1] if len(shape) > 1 else 1
        return rng.normal(0.0, scale / math.sqrt(fan_in), size=shape)

    layers = []
    for _ in range(cfg.num_layers):
        heads = [
            HeadParams(g(dh, d), g(dh, d), g(dh) if cfg.attention_kind == "additive" else None)
            for _ in range(cfg.num_heads)
        ]
        layers.append(LayerParams(heads, g(cfg.ff_hidden_dim, d * (cfg.num_heads + 1)),
                                  g(cfg.ff_hidden_dim), g(d, cfg.ff_hidden_dim), g(d)))
    pos_table = rng.normal(0.0, 1.0, size=(cfg.max_len, cfg.model_dim)) if cfg.positional == "learned" else None
    prm = ModelParams(
        token_emb=rng.normal(0.0, 1.0, size=(len(cfg.alphabet), cfg.model_dim)),
        layers=layers,
        out_w=g(cfg.out_dim, d),
        out_b=g(cfg.out_dim),
        pos_table=pos_table,
    )
    return Transformer(cfg, prm)
