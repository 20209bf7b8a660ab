"""Token scoring, top-k selection and multi-scale pooling.

Scores only decide *which* tokens survive; the surviving values are the
original stream values, so every pooled token is an exact convex combination
of input tokens. That combination is tracked explicitly in :class:`Provenance`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import layers
from . import tensor as T
from .errors import DimensionError, SelectionError, WindowError
from .tensor import Tensor


@dataclass(frozen=True)
class FrameTokenStream:
    """``tokens`` is ``[T, N, C]``; the flat index of (frame t, position p) is ``t*N + p``."""

    tokens: Tensor

    def __post_init__(self):
        tok = T.as_tensor(self.tokens)
        if tok.ndim != 3 or min(tok.shape) < 1:
            raise DimensionError(f"stream must be [T, N, C] with positive extents, got {tok.shape}")
        object.__setattr__(self, "tokens", tok)

    @classmethod
    def from_array(cls, arr) -> "FrameTokenStream":
        return cls(Tensor(arr))

    @property
    def frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def per_frame(self) -> int:
        return self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    @property
    def total(self) -> int:
        return self.frames * self.per_frame

    def flat(self) -> Tensor:
        return T.reshape(self.tokens, (self.total, self.channels))

    def clip(self, start: int, stop: int) -> "FrameTokenStream":
        return FrameTokenStream(Tensor._wrap(self.tokens.data[start:stop]))


@dataclass(frozen=True)
class Provenance:
    """Row-stochastic map from a subset of stream tokens to derived tokens.

    ``weights[i, j]`` is the share of stream token ``columns[j]`` in derived
    token ``i``; ``total`` is the stream length ``T*N``.
    """

    weights: np.ndarray
    columns: np.ndarray
    total: int

    def dense(self) -> np.ndarray:
        out = np.zeros((self.weights.shape[0], self.total))
        out[:, self.columns] = self.weights
        return out

    def compose(self, mix: np.ndarray) -> "Provenance":
        """Provenance of ``mix @ tokens`` given this provenance for ``tokens``."""
        return Provenance(np.asarray(mix) @ self.weights, self.columns, self.total)

    @staticmethod
    def stack(parts: Sequence["Provenance"]) -> "Provenance":
        first = parts[0]
        if all(np.array_equal(p.columns, first.columns) for p in parts):
            return Provenance(np.concatenate([p.weights for p in parts]), first.columns, first.total)
        dense = np.concatenate([p.dense() for p in parts])
        return Provenance(dense, np.arange(first.total), first.total)


@dataclass(frozen=True)
class SignificanceScores:
    spatial: Tensor        # [T, N], rows sum to 1
    frame_weight: Tensor   # [T], sums to 1
    combined: Tensor       # [T, N], sums to 1


@dataclass(frozen=True)
class SelectedTokens:
    tokens: Tensor               # [k, C], values equal the stream rows at global_indices
    global_indices: np.ndarray   # ascending
    scores: np.ndarray           # combined scores of the kept tokens
    total: int                   # T*N of the source stream
    reference: np.ndarray = field(repr=False, default=None)

    @property
    def k(self) -> int:
        return len(self.global_indices)

    def provenance(self) -> Provenance:
        return Provenance(np.eye(self.k), self.global_indices, self.total)


@dataclass(frozen=True)
class ScaleTokens:
    scale_id: int
    window: int
    stride: int
    tokens: Tensor
    provenance: Provenance


@dataclass(frozen=True)
class MultiScaleTokens:
    scales: list

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, i) -> ScaleTokens:
        return self.scales[i]

    def merged(self) -> ScaleTokens:
        """All scales as one token set, in scale order."""
        return ScaleTokens(
            -1, 0, 0,
            T.concat([s.tokens for s in self.scales]),
            Provenance.stack([s.provenance for s in self.scales]),
        )


def scoring_shapes(prefix: str, c: int, n_layers: int, ffn_mult: int) -> dict:
    """Shapes of one scoring stack. The final layer has no feed-forward since
    only its attention map is consumed."""
    out = {}
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        out.update(layers.norm_shapes(f"{p}.ln1", c))
        out.update(layers.attention_shapes(f"{p}.attn", c))
        if i < n_layers - 1:
            out.update(layers.norm_shapes(f"{p}.ln2", c))
            out.update(layers.ffn_shapes(f"{p}.ffn", c, ffn_mult))
    return out


def received_attention(x, weights: Mapping[str, Tensor], prefix: str, n_layers: int, heads: int) -> Tensor:
    """Run a pre-norm self-attention stack over ``x [..., n, C]`` and return the
    mean attention each position receives in the final layer, ``[..., n]``."""
    if n_layers < 1:
        raise ValueError("scoring needs at least one layer")
    h = x
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        z = layers.norm(h, weights, f"{p}.ln1")
        a, attn = layers.attend(z, z, weights, f"{p}.attn", heads, return_attn=True)
        if i == n_layers - 1:
            return T.mean(attn, axis=-2)
        h = h + a
        h = h + layers.ffn(layers.norm(h, weights, f"{p}.ln2"), weights, f"{p}.ffn")


def score_spatial(stream: FrameTokenStream, weights, heads: int, n_layers: int = 2) -> Tensor:
    return received_attention(stream.tokens, weights, "svr.spatial", n_layers, heads)


def score_temporal(stream: FrameTokenStream, spatial: Tensor, weights, heads: int,
                   n_layers: int = 2) -> SignificanceScores:
    if spatial.shape != stream.tokens.shape[:2]:
        raise DimensionError(f"spatial scores {spatial.shape} do not match stream {stream.tokens.shape}")
    t = stream.frames
    summaries = T.tsum(T.reshape(spatial, (t, stream.per_frame, 1)) * stream.tokens, axis=1)
    frame_weight = received_attention(summaries, weights, "svr.temporal", n_layers, heads)
    combined = spatial * T.reshape(frame_weight, (t, 1))
    return SignificanceScores(spatial, frame_weight, combined)


def score(stream: FrameTokenStream, weights, heads: int, spatial_layers: int = 2,
          temporal_layers: int = 2) -> SignificanceScores:
    spatial = score_spatial(stream, weights, heads, spatial_layers)
    return score_temporal(stream, spatial, weights, heads, temporal_layers)


def select_topk(stream: FrameTokenStream, scores: SignificanceScores, k: int,
                frozen: SelectedTokens | None = None) -> SelectedTokens:
    """Keep the ``k`` highest combined scores over the whole video.

    The kept rows are multiplied by ``1 + s - stop_grad(s)``, which is exactly
    1.0 in value, so tokens are unchanged while the scorer still receives a
    gradient through the token values. ``frozen`` replays an earlier
    selection (indices and stop-grad reference), which makes that surrogate a
    plain differentiable function for finite-difference checking.
    """
    total = stream.total
    if not 1 <= k <= total:
        raise SelectionError(f"cannot select k={k} of {total} tokens")
    flat_scores = T.reshape(scores.combined, (total,))
    if frozen is None:
        idx = np.asarray(T.topk_indices(flat_scores, k), dtype=np.intp)
        reference = None
    else:
        idx = np.asarray(frozen.global_indices, dtype=np.intp)
        reference = frozen.reference
        if len(idx) != k:
            raise SelectionError(f"frozen selection has {len(idx)} indices, expected {k}")
    kept_scores = T.take(flat_scores, idx)
    if reference is None:
        reference = kept_scores.data.copy()
    gate = 1.0 + (kept_scores - Tensor._wrap(reference))
    tokens = T.take(stream.flat(), idx) * T.reshape(gate, (k, 1))
    return SelectedTokens(tokens, idx, kept_scores.data.copy(), total, reference)


def pool_provenance(sel_prov: Provenance, n: int, window: int, stride: int) -> Provenance:
    m = T.pooled_count(n, window, stride)
    mix = np.zeros((m, n))
    for j in range(m):
        mix[j, j * stride: j * stride + window] = 1.0 / window
    return sel_prov.compose(mix)


def multi_scale_pool(sel: SelectedTokens, scales: Sequence[tuple]) -> MultiScaleTokens:
    """Shifted-window mean pooling of the selected sequence at each ``(window, stride)``."""
    base = sel.provenance()
    out = []
    for i, (w, r) in enumerate(scales):
        if w > sel.k:
            raise WindowError(f"scale {i}: window {w} exceeds the {sel.k} selected tokens")
        tokens = T.mean_pool(sel.tokens, w, r)
        out.append(ScaleTokens(i, w, r, tokens, pool_provenance(base, sel.k, w, r)))
    return MultiScaleTokens(out)
