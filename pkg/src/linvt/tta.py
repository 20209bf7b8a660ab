"""Query refinement and residual-free linear aggregation.

Queries are refined by attention blocks (self, visual, text). Visual tokens
are only *read* by those blocks; the output tokens come from a single
softmax-weighted sum of the visual tokens themselves, so each one is a convex
combination of its scale's tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import layers, svr
from . import tensor as T
from .errors import ChannelMismatchError
from .svr import MultiScaleTokens, Provenance, ScaleTokens, SelectedTokens, SignificanceScores
from .tensor import Tensor


@dataclass(frozen=True)
class AggregationOutput:
    tokens: Tensor              # [sum(q), C]
    attn: list                  # per group, W_attn as an array [q_s, M_s]
    provenance: Provenance      # over the flattened input stream
    group_sizes: list
    selection: SelectedTokens | None = None
    scores: SignificanceScores | None = None

    def dense_provenance(self) -> np.ndarray:
        return self.provenance.dense()


def block_shapes(prefix: str, c: int, ffn_mult: int) -> dict:
    out = {}
    for name in ("self", "vis", "text"):
        out.update(layers.norm_shapes(f"{prefix}.ln_{name}", c))
        out.update(layers.attention_shapes(f"{prefix}.{name}_attn", c))
    out.update(layers.norm_shapes(f"{prefix}.ln_ffn", c))
    out.update(layers.ffn_shapes(f"{prefix}.ffn", c, ffn_mult))
    return out


def aggregation_shapes(c: int) -> dict:
    return {"tta.agg.wq": ((c, c), layers.PROJ), "tta.agg.wk": ((c, c), layers.PROJ)}


def query_bank(weights: Mapping[str, Tensor], groups: int) -> list[Tensor]:
    return [weights[f"tta.queries.{i}"] for i in range(groups)]


def run_block(q: Tensor, visual: Tensor, text: Tensor | None, weights, prefix: str, heads: int) -> Tensor:
    z = layers.norm(q, weights, f"{prefix}.ln_self")
    q = q + layers.attend(z, z, weights, f"{prefix}.self_attn", heads)
    z = layers.norm(q, weights, f"{prefix}.ln_vis")
    q = q + layers.attend(z, visual, weights, f"{prefix}.vis_attn", heads)
    if text is not None and text.shape[0] > 0:
        z = layers.norm(q, weights, f"{prefix}.ln_text")
        q = q + layers.attend(z, text, weights, f"{prefix}.text_attn", heads)
    z = layers.norm(q, weights, f"{prefix}.ln_ffn")
    return q + layers.ffn(z, weights, f"{prefix}.ffn")


def run_blocks(queries: Sequence[Tensor], visual: Sequence[Tensor], text: Tensor | None,
               weights: Mapping[str, Tensor], depth: int, heads: int) -> list[Tensor]:
    """Refine each query group against its own visual tokens.

    Groups never see each other: group ``i`` attends only to itself,
    ``visual[i]`` and the shared text. Block weights are shared across groups.
    """
    if len(queries) != len(visual):
        raise ValueError(f"{len(queries)} query groups for {len(visual)} visual groups")
    refined = []
    for q, v in zip(queries, visual):
        if q.shape[-1] != v.shape[-1] or (text is not None and text.shape[0] and text.shape[-1] != q.shape[-1]):
            text_c = None if text is None else text.shape[-1]
            raise ChannelMismatchError(
                f"query width {q.shape[-1]}, visual width {v.shape[-1]}, text width {text_c}")
        for d in range(depth):
            q = run_block(q, v, text, weights, f"tta.block.{d}", heads)
        refined.append(q)
    return refined


def aggregation_map(refined: Tensor, visual: Tensor, weights: Mapping[str, Tensor],
                    scale: float | None = None) -> Tensor:
    c = visual.shape[-1]
    scale = 1.0 / math.sqrt(c) if scale is None else scale
    keys = visual @ weights["tta.agg.wk"]
    logits = (refined @ weights["tta.agg.wq"]) @ T.transpose(keys) * scale
    return T.softmax(logits, axis=-1)


def linear_aggregate(vis: MultiScaleTokens | Sequence[ScaleTokens], refined: Sequence[Tensor],
                     weights: Mapping[str, Tensor], scale: float | None = None) -> AggregationOutput:
    """``W_attn @ T_v`` per group: no value projection, no residual, no norm."""
    groups = list(vis.scales if isinstance(vis, MultiScaleTokens) else vis)
    if len(groups) != len(refined):
        raise ValueError(f"{len(refined)} refined query groups for {len(groups)} scales")
    outs, maps, provs = [], [], []
    for g, q in zip(groups, refined):
        w_attn = aggregation_map(q, g.tokens, weights, scale)
        outs.append(w_attn @ g.tokens)
        maps.append(w_attn.data)
        provs.append(g.provenance.compose(w_attn.data))
    return AggregationOutput(
        tokens=T.concat(outs) if len(outs) > 1 else outs[0],
        attn=maps,
        provenance=Provenance.stack(provs),
        group_sizes=[o.shape[0] for o in outs],
    )


def forward(stream: svr.FrameTokenStream, text: Tensor | None, cfg, weights) -> AggregationOutput:
    """Score, select, pool per scale, refine scale-specific queries and aggregate."""
    from .model import forward_weights

    return forward_weights(cfg.with_variant("MultiC"), weights, stream, text)
