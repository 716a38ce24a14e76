"""Self-attention expressivity testbed: formal languages, a from-scratch transformer,
hand-built constructions, random restrictions for hard attention and sensitivity
analysis for soft attention."""

from .formal_langs import EOS, member, next_dist
from .modelio import load_model, save_model
from .transformer import ModelConfig, Transformer, forward, random_model

__all__ = ["EOS", "ModelConfig", "Transformer", "forward", "load_model", "member", "next_dist",
           "random_model", "save_model"]
