"""Seeded models shared by the unit and acceptance tests."""

from selfattn import formal_langs as fl
from selfattn import restriction as rs
from selfattn.transformer import ModelConfig, random_model

SOFT_SEEDS = (100, 101, 102, 103, 104)
HARD_COUNT = 20
HARD_LENGTHS = (16, 24, 32)


def soft_model(seed, head="next", layers=2, heads=2, dim=4, ff=8, attention_kind="dot"):
    cfg = ModelConfig(alphabet=("0", "1", fl.EOS), num_layers=layers, num_heads=heads, model_dim=dim,
                      ff_hidden_dim=ff, weighting="soft", head=head, attention_kind=attention_kind)
    return random_model(cfg, fl.make_rng(seed))


def soft_fixtures(head="next"):
    return [soft_model(s, head=head) for s in SOFT_SEEDS]


def hard_model(seed, heads=1, dim=4, layers=1, symbols=("0", "1")):
    cfg = ModelConfig(alphabet=tuple(symbols) + (fl.EOS,), num_layers=layers, num_heads=heads,
                      model_dim=dim, ff_hidden_dim=dim, weighting="hard", head="label", max_len=64)
    return random_model(cfg, fl.make_rng(seed))


def hard_case(index):
    """(ct, n, description) for the index-th seeded depth-reduction case.

    Lengths cycle through 16/24/32, head counts through 1/2, and every other
    case is a random 2-transformer instead of a lifted plain model.
    """
    n = HARD_LENGTHS[index % 3]
    heads = 1 + (index // 3) % 2
    c = 1 + index % 2
    if c == 1:
        ct = rs.lift(hard_model(1000 + index, heads=heads), n)
    else:
        ct = rs.random_ctransformer(n, 2, heads, fl.make_rng(2000 + index))
    return ct, n, f"case {index}: n={n} H={heads} c={c}"
