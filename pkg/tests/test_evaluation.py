import math

import numpy as np
import pytest

from selfattn import evaluation as ev
from selfattn import formal_langs as fl
from selfattn.transformer import ModelError

from fixtures import hard_model, soft_model


@pytest.mark.parametrize("language,n", [("parity", 8), ("dyck2", 10)])
def test_oracle_gap_zero(language, n):
    rep = ev.model_ce(ev.oracle_predictor(language, 0.4), language, n, samples=2000, p=0.4,
                      unigram=fl.unigram_dist(language, 0.4, n_symbols=20_000, seed=0).dist)
    assert rep.gap == 0.0
    assert rep.model_ce == rep.optimal_ce
    assert rep.capped == 0


def test_uniform_predictor_parity():
    rep = ev.model_ce(ev.uniform_predictor("parity"), "parity", 8, samples=500, p=0.3,
                      unigram=fl.NextSymbolDist({"0": 0.4, "1": 0.4, fl.EOS: 0.2}))
    assert rep.model_ce == pytest.approx(math.log(3), abs=1e-12)
    assert rep.stderr == pytest.approx(0.0, abs=1e-12)


def test_closed_form_values():
    p = 0.5
    h_even = -p * math.log(p) - (1 - p) * math.log((1 - p) / 2)
    assert ev.optimal_ce_closed_form("parity", 0, p) == pytest.approx(h_even)
    assert ev.optimal_ce_closed_form("parity", 7, p) == pytest.approx(0.5 * h_even + 0.5 * math.log(2))
    with pytest.raises(fl.ConfigError):
        ev.optimal_ce_closed_form("dyck2", 4, p)


def test_optimal_ce_matches_closed_form():
    got = ev.optimal_ce("parity", 16, 0.4, samples=20_000, rng_seed=3)
    assert abs(got.value - got.closed_form) <= 3 * got.stderr


def test_ce_gap_bound_arithmetic():
    assert ev.ce_gap_bound(0.5, 0.3) == pytest.approx(0.3 * 0.5 * math.log(2), rel=1e-15)
    assert ev.ce_gap_bound(0.5, 0.3) == pytest.approx(0.10397, abs=1e-5)
    assert ev.ce_gap_bound_bits(0.5, 0.3) == pytest.approx(0.15, rel=1e-12)
    with pytest.raises(ValueError):
        ev.ce_gap_bound(0.5, 1.5)


def test_class_type_decomposition():
    rng = fl.make_rng(0)
    probs = rng.dirichlet(np.ones(5), size=200)
    idx = rng.integers(0, 5, size=200)
    cls, typ = ev.class_type_split("dyck2", probs, idx)
    total = -np.log(probs[np.arange(200), idx])
    assert np.allclose(cls + typ, total, rtol=0, atol=1e-12)
    assert np.all(cls >= 0) and np.all(typ >= -1e-15)


@pytest.mark.parametrize("language,p", [("parity", 0.2), ("dyck2", 0.45)])
def test_optimal_below_unigram(language, p):
    rep = ev.model_ce(ev.uniform_predictor(language), language, 12, samples=4000, p=p)
    assert rep.optimal_ce <= rep.unigram_ce + 3 * rep.optimal_stderr
    assert rep.model_ce >= rep.optimal_ce - 3 * rep.stderr
    assert min(rep.model_ce, rep.optimal_ce, rep.unigram_ce) >= 0


def test_model_ce_with_transformer():
    m = soft_model(100)
    rep = ev.model_ce(m, "parity", 32, samples=1000, p=0.4,
                      unigram=fl.unigram_dist("parity", 0.4, n_symbols=20_000, seed=1).dist)
    assert rep.gap >= -3 * rep.gap_stderr
    js = rep.to_json()
    assert js["units"] == "nats" and js["gap_bits"] == pytest.approx(rep.gap / math.log(2))


def test_model_ce_requires_next_head():
    with pytest.raises(ModelError):
        ev.model_ce(soft_model(100, head="label"), "parity", 8, samples=10)


def test_draws_deterministic_across_threads():
    a = ev.draw("dyck2", 20, 0.4, 5000, seed=7, threads=1)
    b = ev.draw("dyck2", 20, 0.4, 5000, seed=7, threads=3)
    assert a.prefixes == b.prefixes and np.array_equal(a.next_idx, b.next_idx)


def test_zero_probability_is_capped():
    never_eos = lambda prefixes: np.tile([0.5, 0.5, 0.0], (len(prefixes), 1))
    rep = ev.model_ce(never_eos, "parity", 0, samples=400, p=0.5,
                      unigram=fl.NextSymbolDist({"0": 0.4, "1": 0.4, fl.EOS: 0.2}))
    assert rep.capped > 0 and math.isfinite(rep.model_ce)


# --- parity-pair TV ---------------------------------------------------------------------------


def test_tv_identical_pair_is_zero():
    m = soft_model(100)
    y = np.ones((2, 4))
    pr = ev._probs(m, y)
    assert 0.5 * np.abs(pr[0] - pr[1]).sum() == 0.0


def test_tv_chain_and_decay():
    m = soft_model(101)
    small = ev.parity_pair_tv(m, 16, trials=4)
    large = ev.parity_pair_tv(m, 512, trials=4)
    assert small.chain_ok and large.chain_ok
    assert large.mean_tv < small.mean_tv
    assert 0.0 <= small.max_tv <= 1.0


def test_tv_rejects_hard():
    with pytest.raises(ModelError):
        ev.parity_pair_tv(hard_model(0), 16)
