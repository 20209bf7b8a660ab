"""Parameter layouts and small building blocks shared by the scoring and aggregation stages.

Weights live in a flat ``name -> Tensor`` mapping. Each helper here knows the
names it owns under a prefix, both for declaring shapes and for applying them.
"""

from __future__ import annotations

from typing import Mapping

from . import tensor as T
from .tensor import AttentionWeights, Tensor

# init kinds understood by model.init_weights
PROJ, BIAS, GAIN, QUERY = "proj", "bias", "gain", "query"


def attention_shapes(prefix: str, c: int) -> dict:
    out = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.w{p}"] = ((c, c), PROJ)
        out[f"{prefix}.b{p}"] = ((c,), BIAS)
    return out


def norm_shapes(prefix: str, c: int) -> dict:
    return {f"{prefix}.gain": ((c,), GAIN), f"{prefix}.bias": ((c,), BIAS)}


def ffn_shapes(prefix: str, c: int, mult: int) -> dict:
    h = c * mult
    return {
        f"{prefix}.w1": ((c, h), PROJ),
        f"{prefix}.b1": ((h,), BIAS),
        f"{prefix}.w2": ((h, c), PROJ),
        f"{prefix}.b2": ((c,), BIAS),
    }


def attention_weights(w: Mapping[str, Tensor], prefix: str) -> AttentionWeights:
    return AttentionWeights(*(w[f"{prefix}.{n}"] for n in
                              ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")))


def norm(x, w: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, w[f"{prefix}.gain"], w[f"{prefix}.bias"])


def ffn(x, w: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(x @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"])
    return h @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


def attend(q, kv, w: Mapping[str, Tensor], prefix: str, heads: int, return_attn=False):
    return T.multi_head_attention(q, kv, heads, attention_weights(w, prefix), return_attn)
