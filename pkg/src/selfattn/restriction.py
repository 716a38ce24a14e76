"""Input restrictions and depth reduction for hard-attention transformers.

A c-transformer computes each layer-0 activation from at most ``c`` input
symbols through a lookup table; a plain transformer is the ``c = 1`` case
(:func:`lift`). :func:`depth_reduce` fixes additional input symbols so that
every layer-1 head can only attend to a handful of positions, then folds layer 1
into new layer-0 tables and drops it. Repeating this until no attention layer
is left makes the output a function of a bounded set of free inputs, which is
what :func:`demonstrate_failure` exploits.

Indexing: word positions are ``0..n-1``; activation positions are ``0..n``, the
last one holding EOS. Restrictions cover word positions only.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import formal_langs as fl
from .transformer import (
    LayerParams,
    ModelConfig,
    Transformer,
    embed_indices,
    hard_argmax,
    head_scores,
    random_model,
    run_layer,
)

STAR = "*"
DENSE_MAX_INPUTS = 4
ENUM_MAX_INPUTS = 16


class UnsupportedModelError(ValueError):
    pass


class RestrictionError(ValueError):
    pass


class Stage3Failure(RuntimeError):
    def __init__(self, message: str, census: dict):
        super().__init__(message)
        self.census = census


# --- restrictions -------------------------------------------------------------------


@dataclass(frozen=True)
class Restriction:
    assignment: tuple[str, ...]

    @classmethod
    def free(cls, n: int) -> "Restriction":
        return cls((STAR,) * n)

    @classmethod
    def parse(cls, text: str) -> "Restriction":
        return cls(tuple(text))

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def free_positions(self) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a == STAR]

    @property
    def free_count(self) -> int:
        return sum(a == STAR for a in self.assignment)

    def is_free(self, i: int) -> bool:
        return self.assignment[i] == STAR

    def fix(self, values: dict[int, str]) -> "Restriction":
        out = list(self.assignment)
        for i, s in values.items():
            if out[i] != STAR and out[i] != s:
                raise RestrictionError(f"position {i + 1} already fixed to {out[i]!r}")
            out[i] = s
        return Restriction(tuple(out))

    def extends(self, other: "Restriction") -> bool:
        """True iff ``self`` only fixes positions that ``other`` leaves free."""
        return self.n == other.n and all(
            b == STAR or a == b for a, b in zip(self.assignment, other.assignment))

    def consistent(self, word: Sequence[str]) -> bool:
        return len(word) == self.n and all(a == STAR or a == w for a, w in zip(self.assignment, word))

    def overwrite(self, word: Sequence[str]) -> str:
        return "".join(w if a == STAR else a for a, w in zip(self.assignment, word))

    def __str__(self):
        return "".join(self.assignment)


# --- layer-0 tables ----------------------------------------------------------------------


class DenseTable:
    """All ``|Σ|^len(inputs)`` rows materialized; row index is the mixed-radix code
    with the first input as the least significant digit."""

    def __init__(self, values: np.ndarray):
        self.values = values

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        return self.values[codes]


class LazyTable:
    """Rows computed on first use by ``compute(codes) -> (len(codes), d)`` and memoized."""

    def __init__(self, compute: Callable[[np.ndarray], np.ndarray], width: int):
        self.compute = compute
        self.width = width
        self.memo: dict[int, np.ndarray] = {}

    def lookup(self, codes: np.ndarray, chunk: int = 2048) -> np.ndarray:
        uniq, inv = np.unique(codes, return_inverse=True)
        missing = np.array([u for u in uniq.tolist() if u not in self.memo], dtype=np.int64)
        for s in range(0, len(missing), chunk):
            part = missing[s:s + chunk]
            for code, row in zip(part.tolist(), self.compute(part)):
                self.memo[code] = row
        if not len(uniq):
            return np.empty((0, self.width))
        rows = np.stack([self.memo[u] for u in uniq.tolist()])
        return rows[inv.reshape(-1)]


@dataclass
class CTransformer:
    c: int
    symbols: tuple[str, ...]
    n: int
    inputs: list[tuple[int, ...]]
    tables: list[DenseTable | LazyTable | None]
    config: ModelConfig
    layers: list[LayerParams]
    out_w: np.ndarray
    out_b: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != self.n + 1 or len(self.tables) != self.n + 1:
            raise RestrictionError("need one input list and table per activation position (n + 1)")
        for j, inp in enumerate(self.inputs):
            if len(inp) > self.c:
                raise RestrictionError(f"position {j + 1} reads {len(inp)} > c = {self.c} inputs")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def base(self) -> int:
        return len(self.symbols)

    def codes(self, j: int, idx: np.ndarray) -> np.ndarray:
        code = np.zeros(idx.shape[0], dtype=np.int64)
        for s, i in enumerate(self.inputs[j]):
            code += idx[:, i].astype(np.int64) * self.base ** s
        return code

    def layer0(self, idx: np.ndarray, positions: Sequence[int] | None = None) -> np.ndarray:
        positions = range(self.n + 1) if positions is None else positions
        cols = []
        for j in positions:
            table = self.tables[j]
            if table is None:
                raise RestrictionError(f"layer-0 table for position {j + 1} was not materialized")
            cols.append(table.lookup(self.codes(j, idx)))
        return np.stack(cols, axis=1)

    def final_activation(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        if not self.layers:
            return self.layer0(idx, [self.n])[:, 0]
        y = self.layer0(idx)
        for k, layer in enumerate(self.layers, start=1):
            y, _ = run_layer(self.config, layer, y, rows=[-1] if k == len(self.layers) else None)
        return y[:, -1]

    def label_probs(self, idx: np.ndarray) -> np.ndarray:
        return output_probs_raw(self.out_w, self.out_b, self.final_activation(idx))[:, 1]

    def decisions(self, idx: np.ndarray) -> np.ndarray:
        return self.label_probs(idx) >= 0.5

    def encode(self, words: Sequence[str]) -> np.ndarray:
        return np.array([[self.symbols.index(ch) for ch in w] for w in words], dtype=np.int64).reshape(len(words), self.n)


def output_probs_raw(out_w, out_b, y):
    z = y @ out_w.T + out_b
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def lift(model: Transformer, n: int) -> CTransformer:
    """View a hard-attention transformer at input length ``n`` (+ EOS) as a 1-transformer."""
    cfg = model.config
    if cfg.weighting != "hard":
        raise UnsupportedModelError("hard attention required")
    if cfg.head != "label":
        raise UnsupportedModelError("restrictions act on label (recognizer) models")
    symbols = cfg.alpha.word_symbols
    eos = cfg.alpha.index(cfg.eos)
    sym_idx = np.array([cfg.alpha.index(s) for s in symbols])
    tables: list = []
    for j in range(n):
        idx = np.full((len(symbols), n + 1), eos)
        idx[:, j] = sym_idx
        tables.append(DenseTable(embed_indices(model, idx)[:, j]))
    eos_row = embed_indices(model, np.full((1, n + 1), eos))[:, n]
    tables.append(DenseTable(eos_row))
    inputs = [(j,) for j in range(n)] + [()]
    return CTransformer(1, symbols, n, inputs, tables, cfg, list(model.params.layers),
                        model.params.out_w, model.params.out_b)


def random_ctransformer(n: int, c: int, num_heads: int, rng: np.random.Generator,
                        symbols: tuple[str, ...] = fl.PARITY_SYMBOLS, model_dim: int = 4,
                        num_layers: int = 1) -> CTransformer:
    """Gaussian layer-0 tables where position ``j`` reads ``j`` and ``c - 1`` other random inputs;
    attention layers and output head from :func:`random_model`."""
    if not 1 <= c <= DENSE_MAX_INPUTS:
        raise RestrictionError(f"c must lie in [1, {DENSE_MAX_INPUTS}]")
    cfg = ModelConfig(alphabet=tuple(symbols) + (fl.EOS,), num_layers=num_layers, num_heads=num_heads,
                      model_dim=model_dim, ff_hidden_dim=model_dim, weighting="hard",
                      positional="zero", head="label")
    base = random_model(cfg, rng)
    inputs: list[tuple[int, ...]] = []
    tables: list = []
    for j in range(n):
        others = [x for x in range(n) if x != j]
        extra = rng.choice(others, size=min(c - 1, len(others)), replace=False).tolist()
        inputs.append(tuple([j] + sorted(extra)))
        tables.append(DenseTable(rng.normal(size=(len(symbols) ** len(inputs[-1]), model_dim))))
    inputs.append(())
    tables.append(DenseTable(rng.normal(size=(1, model_dim))))
    return CTransformer(c, tuple(symbols), n, inputs, tables, cfg, list(base.params.layers),
                        base.params.out_w, base.params.out_b)


def apply_restriction(ct: CTransformer, rho: Restriction) -> Callable[[np.ndarray], np.ndarray]:
    """Evaluator over index arrays (batch, n): fixed positions are overwritten before evaluation.

    Returns P(label 1) per row.
    """
    if rho.n != ct.n:
        raise RestrictionError(f"restriction length {rho.n} != model length {ct.n}")
    fixed = [(i, ct.symbols.index(a)) for i, a in enumerate(rho.assignment) if a != STAR]

    def evaluate(idx: np.ndarray) -> np.ndarray:
        idx = np.array(np.atleast_2d(idx), dtype=np.int64)
        if idx.shape[1] != ct.n:
            raise RestrictionError(f"word length {idx.shape[1]} != {ct.n}")
        for i, s in fixed:
            idx[:, i] = s
        return ct.label_probs(idx)

    return evaluate


# --- parameters --------------------------------------------------------------------------


@dataclass(frozen=True)
class StageParams:
    k: int = 2
    eta: float = 0.1
    q: float = 0.5
    delta: float = 0.5
    C_target: float = 0.25
    max_resamples: int = 5000

    def __post_init__(self):
        if self.k < 1:
            raise RestrictionError("k must be >= 1")
        if not 0 < self.eta < 0.5:
            raise RestrictionError("eta must lie in (0, 1/2)")
        if not 0 < self.q < 1:
            raise RestrictionError("q must lie in (0, 1)")
        if self.delta <= 0:
            raise RestrictionError("delta must be positive")
        if not (1 + self.delta) * self.q < 1:
            raise RestrictionError("(1 + delta) * q must be < 1")
        if not 0 < self.C_target < 1:
            raise RestrictionError("C_target must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str) -> "StageParams":
        kw = {}
        for part in filter(None, text.split(",")):
            key, _, val = part.partition("=")
            key = key.strip()
            if key not in cls.__dataclass_fields__:
                raise RestrictionError(f"unknown stage parameter {key!r}")
            kw[key] = int(val) if key in ("k", "max_resamples") else float(val)
        return cls(**kw)


# --- stage 1 ---------------------------------------------------------------------------


def fan_out(ct: CTransformer, rho: Restriction) -> dict[int, int]:
    """Number of layer-0 positions each free input feeds."""
    counts = {i: 0 for i in rho.free_positions}
    for inp in ct.inputs:
        for i in inp:
            if i in counts:
                counts[i] += 1
    return counts


def stage1_bound(ct: CTransformer, rho: Restriction, params: StageParams) -> int:
    C = max(rho.free_count / rho.n, 1.0 / rho.n)
    return math.ceil(ct.c / (params.eta * C))


def stage1(ct: CTransformer, rho: Restriction, params: StageParams) -> Restriction:
    """Fix every free input that feeds more than ``ceil(c / (eta C))`` layer-0 positions."""
    bound = stage1_bound(ct, rho, params)
    heavy = {i: ct.symbols[0] for i, cnt in fan_out(ct, rho).items() if cnt > bound}
    return rho.fix(heavy)


# --- max-attention analysis ------------------------------------------------------------------


@dataclass
class PositionCandidates:
    free: tuple[int, ...]
    assignments: list[tuple[int, ...]]   # symbol indices, aligned with ``free``
    values: np.ndarray                   # (len(assignments), d)


@dataclass
class PairInfo:
    """One (layer-1 head, query position, query value) triple under a fixed restriction."""

    head: int
    pos: int
    z: int
    zvec: np.ndarray
    zassign: list[tuple[int, ...]]
    maxima: np.ndarray
    order: list[int]
    cand_scores: list[np.ndarray]
    cand_ok: list[np.ndarray]
    selected: list[int]
    satisfied: bool
    cap: int | None

    @property
    def key(self):
        return (self.head, self.pos, self.z)


@dataclass
class Analysis:
    rho: Restriction
    k: int
    symbols: tuple[str, ...]
    cands: list[PositionCandidates]
    pairs: list[PairInfo]

    def unsatisfied(self) -> list[PairInfo]:
        return [p for p in self.pairs if not p.satisfied]


def position_candidates(ct: CTransformer, rho: Restriction, j: int) -> PositionCandidates:
    """Every value layer-0 position ``j`` can take under ``rho``, with the free-input assignment behind it."""
    inp = ct.inputs[j]
    free = tuple(i for i in inp if rho.is_free(i))
    if len(free) > ENUM_MAX_INPUTS:
        raise RestrictionError(f"position {j + 1} has {len(free)} free inputs; enumeration capped at {ENUM_MAX_INPUTS}")
    assigns = list(itertools.product(range(ct.base), repeat=len(free)))
    idx = np.zeros((len(assigns), ct.n), dtype=np.int64)
    for i in inp:
        if not rho.is_free(i):
            idx[:, i] = ct.symbols.index(rho.assignment[i])
    for s, i in enumerate(free):
        idx[:, i] = [a[s] for a in assigns]
    return PositionCandidates(free, assigns, ct.tables[j].lookup(ct.codes(j, idx)))


def _group_values(values: np.ndarray) -> list[list[int]]:
    groups: dict[bytes, list[int]] = {}
    for r, v in enumerate(values):
        groups.setdefault(np.ascontiguousarray(v).tobytes(), []).append(r)
    return list(groups.values())


def _scan(order, cands, k):
    covered: set[int] = set()
    selected: list[int] = []
    for j in order:
        free = cands[j].free
        if not free:
            return selected, True, j
        if set(free) - covered:
            selected.append(j)
            covered |= set(free)
            if len(selected) == k:
                return selected, False, None
    return selected, True, None


def analyze(ct: CTransformer, rho: Restriction, k: int) -> Analysis:
    """Max-attention tables, position orderings and top-k selections for every layer-1 head."""
    if not ct.layers:
        raise RestrictionError("no attention layer left to analyze")
    cands = [position_candidates(ct, rho, j) for j in range(ct.n + 1)]
    offsets = np.cumsum([0] + [len(c.assignments) for c in cands])
    Y = np.concatenate([c.values for c in cands], axis=0)
    layer = ct.layers[0]
    pairs = []
    for i in range(ct.n + 1):
        ci = cands[i]
        groups = _group_values(ci.values)
        Z = np.stack([ci.values[g[0]] for g in groups])
        for h, hp in enumerate(layer.heads):
            S = head_scores(hp, ct.config, Z, Y)
            for zi, g in enumerate(groups):
                zassign = [ci.assignments[r] for r in g]
                maxima = np.empty(ct.n + 1)
                cand_scores, cand_ok = [], []
                for j in range(ct.n + 1):
                    sc = S[zi, offsets[j]:offsets[j + 1]]
                    ok = _consistent_mask(ci, zassign, cands[j])
                    cand_scores.append(sc)
                    cand_ok.append(ok)
                    maxima[j] = sc[ok].max()
                order = sorted(range(ct.n + 1), key=lambda j: (-maxima[j], j))
                selected, sat, cap = _scan(order, cands, k)
                pairs.append(PairInfo(h, i, zi, Z[zi], zassign, maxima, order, cand_scores,
                                      cand_ok, selected, sat, cap))
    return Analysis(rho, k, ct.symbols, cands, pairs)


def _consistent_mask(ci: PositionCandidates, zassign, cj: PositionCandidates) -> np.ndarray:
    shared = [x for x in cj.free if x in ci.free]
    if not shared:
        return np.ones(len(cj.assignments), dtype=bool)
    si = [ci.free.index(x) for x in shared]
    sj = [cj.free.index(x) for x in shared]
    allowed = {tuple(a[s] for s in si) for a in zassign}
    return np.array([tuple(a[s] for s in sj) in allowed for a in cj.assignments])


@dataclass
class MaxAttention:
    maxima: np.ndarray
    order: list[int]


def max_attention_table(ct: CTransformer, rho: Restriction, head: int, pos: int,
                        z: np.ndarray) -> MaxAttention:
    """For each position ``j``: the largest head score reachable by inputs consistent with
    ``rho`` that give layer-0 position ``pos`` the value ``z``; plus the descending order
    (ties by position)."""
    ci = position_candidates(ct, rho, pos)
    rows = [r for r, v in enumerate(ci.values) if np.array_equal(v, z)]
    if not rows:
        raise RestrictionError(f"value z is not realizable at position {pos + 1} under {rho}")
    zassign = [ci.assignments[r] for r in rows]
    hp = ct.layers[0].heads[head]
    maxima = np.empty(ct.n + 1)
    for j in range(ct.n + 1):
        cj = position_candidates(ct, rho, j)
        sc = head_scores(hp, ct.config, np.asarray(z)[None, :], cj.values)[0]
        maxima[j] = sc[_consistent_mask(ci, zassign, cj)].max()
    return MaxAttention(maxima, sorted(range(ct.n + 1), key=lambda j: (-maxima[j], j)))


# --- stage 2 ------------------------------------------------------------------------------------


@dataclass
class Stage2Result:
    rho: Restriction
    analysis: Analysis | None
    iterations: int
    trivially_satisfied: bool = False
    fixed_positions: list[int] = field(default_factory=list)


def stage2_bound(ct: CTransformer, params: StageParams) -> int:
    return ct.base ** ct.c * params.k * ct.config.num_heads


def _k_dependents(analysis: Analysis) -> dict[int, set[tuple[int, int]]]:
    """layer-0 position -> unsatisfied layer-1 heads (h, i) that selected it."""
    dep: dict[int, set] = {}
    for p in analysis.unsatisfied():
        for j in p.selected:
            dep.setdefault(j, set()).add((p.head, p.pos))
    return dep


def stage2(ct: CTransformer, rho: Restriction, params: StageParams) -> Stage2Result:
    """Pigeonhole fixing until no layer-0 position is selected by more than
    ``|Σ|^c k H`` unsatisfied layer-1 heads."""
    if ct.n <= ct.c * params.k:
        return Stage2Result(rho, None, 0, trivially_satisfied=True)
    bound = stage2_bound(ct, params)
    iterations = 0
    fixed = []
    analysis = analyze(ct, rho, params.k)
    while True:
        dep = _k_dependents(analysis)
        over = [(len(v), -j, j) for j, v in dep.items() if len(v) > bound]
        if not over:
            return Stage2Result(rho, analysis, iterations, fixed_positions=fixed)
        j = max(over)[2]
        cj = analysis.cands[j]
        # pick the assignment that reaches the maximum for the most dependent pairs
        relevant = [p for p in analysis.unsatisfied() if j in p.selected]
        tally = np.zeros(len(cj.assignments), dtype=np.int64)
        for p in relevant:
            hit = (p.cand_scores[j] == p.maxima[j]) & p.cand_ok[j]
            tally += hit
        best = int(np.argmax(tally))
        rho = rho.fix({i: ct.symbols[s] for i, s in zip(cj.free, cj.assignments[best])})
        fixed.append(j)
        iterations += 1
        analysis = analyze(ct, rho, params.k)


# --- stage 3 -------------------------------------------------------------------------------


@dataclass
class Stage3Result:
    rho: Restriction
    resamples: int
    events: int
    fixed_fraction: float


def _event_holds(p: PairInfo, analysis: Analysis, sample: dict[int, int | None]) -> bool:
    """Bad event: z still realizable and no selected position is fully fixed to a maximizer."""
    ci = analysis.cands[p.pos]
    fixed_i = [(s, sample[x]) for s, x in enumerate(ci.free) if sample.get(x) is not None]
    if fixed_i and not any(all(a[s] == v for s, v in fixed_i) for a in p.zassign):
        return False
    for j in p.selected:
        cj = analysis.cands[j]
        vals = [sample.get(x) for x in cj.free]
        if any(v is None for v in vals):
            continue
        r = cj.assignments.index(tuple(vals))
        if p.cand_ok[j][r] and p.cand_scores[j][r] == p.maxima[j]:
            return False
    return True


def _event_vars(p: PairInfo, analysis: Analysis) -> set[int]:
    out = set(analysis.cands[p.pos].free)
    for j in p.selected:
        out |= set(analysis.cands[j].free)
    return out


def stage3(ct: CTransformer, analysis: Analysis, params: StageParams,
           rng: np.random.Generator) -> Stage3Result:
    """Moser-Tardos resampling over the bad events X0 and X_{i,h}^(z).

    Each free position is fixed with probability q (uniform symbol) and left
    free otherwise; violated events have their variables redrawn until none
    remains or ``max_resamples`` is exhausted.
    """
    rho2 = analysis.rho
    free = rho2.free_positions
    limit = (1 + params.delta) * params.q * len(free)
    events = analysis.unsatisfied()
    evars = [_event_vars(p, analysis) for p in events]
    by_var: dict[int, list[int]] = {}
    for e, vs in enumerate(evars):
        for v in vs:
            by_var.setdefault(v, []).append(e)

    def draw(var):
        return int(rng.integers(ct.base)) if rng.random() < params.q else None

    sample = {i: draw(i) for i in free}
    violated = {e for e in range(len(events)) if _event_holds(events[e], analysis, sample)}

    def x0():
        return sum(v is not None for v in sample.values()) > limit

    resamples = 0
    while True:
        if x0():
            target = set(free)
        elif violated:
            target = evars[min(violated)]
        else:
            break
        if resamples >= params.max_resamples:
            census = {"X0": bool(x0()), "violated_pairs": len(violated), "events": len(events),
                      "examples": [list(events[e].key) for e in sorted(violated)[:10]]}
            raise Stage3Failure(f"stage 3 exceeded {params.max_resamples} resamples", census)
        resamples += 1
        for v in sorted(target):
            sample[v] = draw(v)
        touched = {e for v in target for e in by_var.get(v, ())}
        for e in touched:
            if _event_holds(events[e], analysis, sample):
                violated.add(e)
            else:
                violated.discard(e)
    rho3 = rho2.fix({i: ct.symbols[s] for i, s in sample.items() if s is not None})
    nfixed = sum(v is not None for v in sample.values())
    return Stage3Result(rho3, resamples, len(events), nfixed / max(len(free), 1))


# --- folding layer 1 into new layer-0 tables -----------------------------------------------


def read_set(analysis: Analysis, rho3: Restriction, pair: PairInfo) -> tuple[set[int], int | None]:
    """Free inputs (under ``rho3``) of the positions the head can still attend to, and the cap.

    Walking the ``rho2`` order, the first position that is fully fixed under
    ``rho3`` at a value reaching its ``rho2`` maximum scores at least as high as
    every later position can, and wins ties against them; nothing after it can be
    attended.
    """
    cands = analysis.cands
    out: set[int] = set()
    for j in pair.order:
        cj = cands[j]
        vals = [rho3.assignment[x] for x in cj.free]
        if all(v != STAR for v in vals):
            r = cj.assignments.index(tuple(analysis.symbols.index(v) for v in vals))
            if pair.cand_ok[j][r] and pair.cand_scores[j][r] == pair.maxima[j]:
                return out, j
        out |= {x for x in cj.free if rho3.is_free(x)}
    return out, None


def _realizable(analysis: Analysis, rho3: Restriction, pair: PairInfo) -> bool:
    ci = analysis.cands[pair.pos]
    fixed = [(s, analysis.symbols.index(rho3.assignment[x])) for s, x in enumerate(ci.free)
             if not rho3.is_free(x)]
    return any(all(a[s] == v for s, v in fixed) for a in pair.zassign)


@dataclass
class ReductionReport:
    ct: CTransformer
    rho: Restriction
    stages: dict[str, str]
    c_new: int
    c_bound: int
    satisfied_census: dict
    stage3_resamples: int
    trivially_satisfied: bool
    params: StageParams
    free_bound: float
    read_sets: dict[int, list[int]]


def _fold_layer(ct: CTransformer, rho3: Restriction, reads: dict[int, tuple[int, ...]]) -> CTransformer:
    default = 0
    fixed = np.array([default if a == STAR else ct.symbols.index(a) for a in rho3.assignment], dtype=np.int64)
    layer = ct.layers[0]
    width = ct.config.width
    tables: list = [None] * (ct.n + 1)
    for i, inp in reads.items():
        def compute(codes, i=i, inp=inp):
            idx = np.tile(fixed, (len(codes), 1))
            rem = codes.copy()
            for x in inp:
                idx[:, x] = rem % ct.base
                rem //= ct.base
            y0 = ct.layer0(idx)
            out, _ = run_layer(ct.config, layer, y0, rows=[i])
            return out[:, 0]
        tables[i] = LazyTable(compute, width)
    inputs = [reads.get(j, ()) for j in range(ct.n + 1)]
    c_new = max((len(v) for v in inputs), default=0)
    cfg = replace(ct.config, num_layers=ct.config.num_layers - 1)
    return CTransformer(max(c_new, 1), ct.symbols, ct.n, inputs, tables, cfg, ct.layers[1:],
                        ct.out_w, ct.out_b)


def depth_reduce(ct: CTransformer, rho: Restriction, params: StageParams = StageParams(),
                 rng_seed: int = 0) -> ReductionReport:
    """Stages 1-3, then fold layer 1 into layer-0 tables (one fewer attention layer)."""
    if not ct.layers:
        raise RestrictionError("model has no attention layer to remove")
    rng = fl.make_rng(rng_seed)
    rho1 = stage1(ct, rho, params)
    s2 = stage2(ct, rho1, params)
    if s2.trivially_satisfied:
        # n <= ck: every position may read every free input
        rho3 = s2.rho
        resamples = 0
        everything = tuple(rho3.free_positions)
        reads = {i: everything for i in _needed_positions(ct)}
        census = {"pairs": 0, "satisfied_after_stage2": 0, "stage2_iterations": 0}
    else:
        analysis = s2.analysis
        s3 = stage3(ct, analysis, params, rng)
        rho3 = s3.rho
        resamples = s3.resamples
        reads = {}
        for i in _needed_positions(ct):
            r = {x for x in ct.inputs[i] if rho3.is_free(x)}
            for p in analysis.pairs:
                if p.pos == i and _realizable(analysis, rho3, p):
                    r |= read_set(analysis, rho3, p)[0]
            reads[i] = tuple(sorted(r))
        census = {
            "pairs": len(analysis.pairs),
            "satisfied_after_stage2": sum(p.satisfied for p in analysis.pairs),
            "stage2_iterations": s2.iterations,
        }
    new = _fold_layer(ct, rho3, reads)
    C = rho.free_count / rho.n
    return ReductionReport(
        ct=new, rho=rho3,
        stages={"input": str(rho), "stage1": str(rho1), "stage2": str(s2.rho), "stage3": str(rho3)},
        c_new=max((len(v) for v in reads.values()), default=0),
        c_bound=ct.c * (ct.base ** ct.c * params.k * ct.config.num_heads + 1),
        satisfied_census=census, stage3_resamples=resamples,
        trivially_satisfied=s2.trivially_satisfied, params=params,
        free_bound=(1 - 2 * params.eta) * (1 - (1 + params.delta) * params.q) * C * rho.n,
        read_sets={i: list(v) for i, v in reads.items()},
    )


def _needed_positions(ct: CTransformer) -> list[int]:
    # Once the last attention layer goes, only the EOS position feeds the output.
    return [ct.n] if len(ct.layers) == 1 else list(range(ct.n + 1))


DEFAULT_RETRIES = (
    StageParams(),
    StageParams(k=3),
    StageParams(k=4, q=0.6, delta=0.5),
    StageParams(k=6, q=0.6, delta=0.5),
)


def depth_reduce_with_retries(ct, rho, schedule=DEFAULT_RETRIES, rng_seed=0, attempts_per=3):
    """Try each parameter set in ``schedule`` (a few seeds each) until stage 3 succeeds."""
    last = None
    for params in schedule:
        for a in range(attempts_per):
            try:
                return depth_reduce(ct, rho, params, rng_seed=rng_seed * 1000 + a)
            except Stage3Failure as exc:
                last = exc
    raise last


def reduce_fully(ct: CTransformer, rho: Restriction, params: StageParams = StageParams(),
                 rng_seed: int = 0, retries: bool = True) -> list[ReductionReport]:
    reports = []
    while ct.layers:
        if retries:
            rep = depth_reduce_with_retries(ct, rho, rng_seed=rng_seed + len(reports),
                                            schedule=(params,) + tuple(s for s in DEFAULT_RETRIES if s != params))
        else:
            rep = depth_reduce(ct, rho, params, rng_seed=rng_seed + len(reports))
        reports.append(rep)
        ct, rho = rep.ct, rep.rho
    return reports


# --- verification ---------------------------------------------------------------------------


def consistent_inputs(ct: CTransformer, rho: Restriction, limit: int | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """All index arrays consistent with ``rho`` (or ``limit`` random ones)."""
    free = rho.free_positions
    base = np.array([0 if a == STAR else ct.symbols.index(a) for a in rho.assignment], dtype=np.int64)
    total = ct.base ** len(free)
    if limit is None or total <= limit:
        codes = np.arange(total, dtype=np.int64)
    else:
        codes = rng.integers(0, total, size=limit) if len(free) < 62 else None
    if codes is None:
        vals = rng.integers(0, ct.base, size=(limit, len(free)))
    else:
        vals = np.stack([(codes // ct.base ** s) % ct.base for s in range(len(free))], axis=1) \
            if free else np.zeros((len(codes), 0), dtype=np.int64)
    idx = np.tile(base, (len(vals), 1))
    idx[:, free] = vals
    return idx


@dataclass
class EquivalenceReport:
    checked: int
    mismatches: int
    max_prob_diff: float
    exhaustive: bool


def check_equivalence(original: CTransformer, reduced: CTransformer, rho: Restriction,
                      exhaustive_limit: int = 12, samples: int = 10_000, seed: int = 0,
                      batch: int = 4096) -> EquivalenceReport:
    exhaustive = rho.free_count <= exhaustive_limit
    idx = consistent_inputs(original, rho, None if exhaustive else samples, fl.make_rng(seed))
    f = apply_restriction(original, rho)
    mism = 0
    diff = 0.0
    for s in range(0, len(idx), batch):
        chunk = idx[s:s + batch]
        a = f(chunk)
        b = reduced.label_probs(chunk)
        mism += int(np.sum((a >= 0.5) != (b >= 0.5)))
        diff = max(diff, float(np.max(np.abs(a - b))))
    return EquivalenceReport(len(idx), mism, diff, exhaustive)


def audit_attention(ct: CTransformer, analysis: Analysis, rho3: Restriction, idx: np.ndarray) -> int:
    """Count (input, head, position) cases whose layer-1 attention lands outside the
    positions :func:`read_set` allows."""
    allowed: dict[tuple[int, int, int], set[int]] = {}
    for p in analysis.pairs:
        if not _realizable(analysis, rho3, p):
            continue
        ok = set()
        for j in p.order:
            ok.add(j)
            cj = analysis.cands[j]
            vals = [rho3.assignment[x] for x in cj.free]
            if all(v != STAR for v in vals):
                r = cj.assignments.index(tuple(ct.symbols.index(v) for v in vals))
                if p.cand_ok[j][r] and p.cand_scores[j][r] == p.maxima[j]:
                    break
        allowed[p.key] = ok
    y0 = ct.layer0(idx)
    violations = 0
    for h, hp in enumerate(ct.layers[0].heads):
        att = hard_argmax(head_scores(hp, ct.config, y0, y0), ct.config.tie_eps)
        for i in range(ct.n + 1):
            ci = analysis.cands[i]
            zs = {}
            for p in analysis.pairs:
                if p.head == h and p.pos == i:
                    zs[p.zvec.tobytes()] = p.z
            for b in range(len(idx)):
                z = zs[np.ascontiguousarray(y0[b, i]).tobytes()]
                if att[b, i] not in allowed[(h, i, z)]:
                    violations += 1
    return violations


@dataclass
class DependencyReport:
    depends_on: list[int]
    checked_contexts: int
    exhaustive: bool


def dependency_set(evaluator: Callable[[np.ndarray], np.ndarray], rho: Restriction,
                   symbols: Sequence[str], exhaustive_limit: int = 22, samples: int = 0,
                   seed: int = 0, chunk: int = 1 << 16) -> DependencyReport:
    """Free positions whose value can flip the accept decision for some context.

    Exhaustive mode enumerates every assignment of the free positions; with
    ``samples > 0`` random contexts are probed instead (a lower bound on the set).
    """
    free = rho.free_positions
    base = len(symbols)
    fixed = np.array([0 if a == STAR else list(symbols).index(a) for a in rho.assignment], dtype=np.int64)
    if samples:
        rng = fl.make_rng(seed)
        ctx = rng.integers(0, base, size=(samples, len(free)))
        dec0 = _decide(evaluator, fixed, free, ctx)
        dep = []
        for s, pos in enumerate(free):
            for alt in range(1, base):
                flipped = ctx.copy()
                flipped[:, s] = (flipped[:, s] + alt) % base
                if np.any(_decide(evaluator, fixed, free, flipped) != dec0):
                    dep.append(pos)
                    break
        return DependencyReport(dep, samples, False)
    if len(free) > exhaustive_limit:
        raise RestrictionError(f"{len(free)} free positions exceed the exhaustive limit {exhaustive_limit}")
    total = base ** len(free)
    dec = np.empty(total, dtype=bool)
    for s in range(0, total, chunk):
        codes = np.arange(s, min(s + chunk, total), dtype=np.int64)
        vals = np.stack([(codes // base ** t) % base for t in range(len(free))], axis=1) \
            if free else np.zeros((len(codes), 0), dtype=np.int64)
        dec[s:s + len(codes)] = _decide(evaluator, fixed, free, vals)
    # code digit t (least significant first) is axis -1 - t after reshape
    grid = dec.reshape((base,) * len(free)) if free else dec
    dep = []
    for t, pos in enumerate(free):
        axis = len(free) - 1 - t
        first = np.take(grid, [0], axis=axis)
        if np.any(grid != first):
            dep.append(pos)
    return DependencyReport(dep, total, True)


def _decide(evaluator, fixed, free, vals):
    idx = np.tile(fixed, (len(vals), 1))
    if free:
        idx[:, free] = vals
    return evaluator(idx) >= 0.5


# --- failure demonstrations -----------------------------------------------------------------


@dataclass
class Counterexample:
    language: str
    word_a: str
    word_b: str
    member_a: bool
    member_b: bool
    decision: bool
    restriction: str
    depends_on: list[int]
    reports: list[ReductionReport]

    @property
    def misclassified(self) -> str:
        return self.word_a if self.member_a != self.decision else self.word_b

    def to_json(self) -> dict:
        return {"language": self.language, "word_a": self.word_a, "word_b": self.word_b,
                "member_a": self.member_a, "member_b": self.member_b,
                "decision": self.decision, "misclassified": self.misclassified,
                "restriction": self.restriction, "depends_on": [d + 1 for d in self.depends_on]}


def dyck_prerestriction(n: int) -> Restriction:
    """First and last ``floor(0.2 n)`` positions fixed to '(' and ')' respectively."""
    m = int(0.2 * n)
    return Restriction(("(",) * m + (STAR,) * (n - 2 * m) + (")",) * m)


def demonstrate_failure(model: Transformer | CTransformer, language: str, n: int,
                        params: StageParams = StageParams(), rng_seed: int = 0,
                        retries: bool = True, attempts: int = 16) -> Counterexample:
    """Two words that the fully reduced model cannot tell apart but that differ in membership.

    At small ``n`` the random stages occasionally fix so much that no witness
    survives (for Dyck, every completion may be unbalanced); the whole
    reduction is then rerun with the next seed, up to ``attempts`` times.
    """
    for a in range(attempts):
        try:
            return _demonstrate(model, language, n, params, rng_seed + 7919 * a, retries)
        except _NoWitness as exc:
            last = exc
    raise last


def _demonstrate(model, language, n, params, rng_seed, retries):
    ct = lift(model, n) if isinstance(model, Transformer) else model
    if ct.n != n:
        raise RestrictionError(f"c-transformer length {ct.n} != n = {n}")
    if language == "parity":
        rho0 = Restriction.free(n)
        member = fl.parity_member
    elif language == "dyck1":
        rho0 = dyck_prerestriction(n)
        member = lambda w: fl.dyck_member(w, 1)
    else:
        raise RestrictionError(f"failure demonstrations cover parity and dyck1, not {language!r}")
    if set(ct.symbols) != set(fl.LANGUAGE_SYMBOLS[language]):
        raise RestrictionError(f"model alphabet {ct.symbols} does not match {language}")
    reports = reduce_fully(ct, rho0, params, rng_seed, retries) if ct.layers else []
    final = reports[-1].ct if reports else ct
    rho = reports[-1].rho if reports else rho0
    structural = sorted(final.inputs[n])
    free = rho.free_positions
    if len(free) <= 22:
        dep = dependency_set(final.label_probs, rho, ct.symbols).depends_on
    else:
        dep = [x for x in structural if rho.is_free(x)]
    rng = fl.make_rng(rng_seed + 7)
    word_a = word_b = None
    if language == "parity":
        spare = [x for x in free if x not in dep]
        if not spare:
            raise _NoWitness("every free position influences the output; no witness at this n")
        base = rho.overwrite("".join(ct.symbols[int(v)] for v in rng.integers(0, ct.base, n)))
        pos = spare[0]
        word_a = base
        word_b = base[:pos] + ("1" if base[pos] == "0" else "0") + base[pos + 1:]
    else:
        word_a, word_b = _dyck_pair(rho, dep, rng)
    dec = ct.decisions(ct.encode([word_a, word_b]))
    if dec[0] != dec[1]:
        raise RestrictionError("restricted model distinguishes the pair; reduction is unsound")
    return Counterexample(language, word_a, word_b, member(word_a), member(word_b), bool(dec[0]),
                          str(rho), dep, reports)


def _dyck_pair(rho: Restriction, dep: list[int], rng) -> tuple[str, str]:
    """Balanced and unbalanced completions of ``rho`` that agree on ``dep``."""
    free = rho.free_positions
    if len(free) <= 20:
        combos = itertools.product("()", repeat=len(free))
    else:
        combos = (tuple(rng.choice(["(", ")"], size=len(free))) for _ in range(1 << 16))
    dep_slots = [s for s, x in enumerate(free) if x in dep]
    seen: dict[tuple, dict[bool, str]] = {}
    template = list(rho.assignment)
    for combo in combos:
        for x, ch in zip(free, combo):
            template[x] = ch
        word = "".join(template)
        group = seen.setdefault(tuple(combo[s] for s in dep_slots), {})
        group.setdefault(fl.dyck_member(word, 1), word)
        if len(group) == 2:
            return group[True], group[False]
    raise _NoWitness("no balanced/unbalanced pair agrees on the depended-on positions")


class _NoWitness(RestrictionError):
    pass
