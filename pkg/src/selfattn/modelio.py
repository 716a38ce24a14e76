"""JSON model files: config plus row-major arrays with explicit shapes.

Floats are written with ``repr`` precision, so a save/load round trip is
bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .transformer import HeadParams, LayerParams, ModelConfig, ModelError, ModelParams, Transformer

FORMAT = "selfattn-model"
VERSION = 1


class SchemaError(ValueError):
    pass


class VersionError(SchemaError):
    pass


def _arr(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(obj, what: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed array {what}: {exc}") from None
    if data.size != int(np.prod(shape)):
        raise SchemaError(f"array {what}: {data.size} values for shape {shape}")
    return data.reshape(shape)


def model_to_dict(model: Transformer) -> dict:
    prm = model.params
    layers = []
    for layer in prm.layers:
        layers.append({
            "heads": [
                {"query": _arr(h.query), "key": _arr(h.key),
                 **({"score_vec": _arr(h.score_vec)} if h.score_vec is not None else {})}
                for h in layer.heads
            ],
            "w1": _arr(layer.w1), "b1": _arr(layer.b1),
            "w2": _arr(layer.w2), "b2": _arr(layer.b2),
        })
    params = {"token_emb": _arr(prm.token_emb), "layers": layers,
              "out_w": _arr(prm.out_w), "out_b": _arr(prm.out_b)}
    if prm.pos_table is not None:
        params["pos_table"] = _arr(prm.pos_table)
    cfg = dataclasses.asdict(model.config)
    cfg["alphabet"] = list(cfg["alphabet"])
    return {"format": FORMAT, "version": VERSION, "config": cfg, "params": params}


def model_from_dict(obj: dict) -> Transformer:
    if not isinstance(obj, dict) or obj.get("format") != FORMAT:
        raise SchemaError("not a selfattn model file")
    if obj.get("version") != VERSION:
        raise VersionError(f"model file version {obj.get('version')!r}, this build reads {VERSION}")
    try:
        cfg = ModelConfig(**obj["config"])
        p = obj["params"]
        layers = []
        for k, layer in enumerate(p["layers"]):
            heads = [
                HeadParams(_unarr(h["query"], f"l{k}.query"), _unarr(h["key"], f"l{k}.key"),
                           _unarr(h["score_vec"], f"l{k}.score_vec") if "score_vec" in h else None)
                for h in layer["heads"]
            ]
            layers.append(LayerParams(heads, _unarr(layer["w1"], "w1"), _unarr(layer["b1"], "b1"),
                                      _unarr(layer["w2"], "w2"), _unarr(layer["b2"], "b2")))
        prm = ModelParams(
            token_emb=_unarr(p["token_emb"], "token_emb"), layers=layers,
            out_w=_unarr(p["out_w"], "out_w"), out_b=_unarr(p["out_b"], "out_b"),
            pos_table=_unarr(p["pos_table"], "pos_table") if "pos_table" in p else None,
        )
        return Transformer(cfg, prm)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed model file: {exc!r}") from None
    except ModelError as exc:
        raise SchemaError(f"dimension inconsistency: {exc}") from None


def save_model(model: Transformer, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> Transformer:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc.msg})") from None
    return model_from_dict(obj)
