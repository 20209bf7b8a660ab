import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linvt import svr
from linvt import tensor as T
from linvt.errors import SelectionError, WindowError
from linvt.model import Config, build
from linvt.svr import FrameTokenStream

from conftest import random_stream, scaled_weights


# -- plain numpy oracle of the scoring stack -----------------------------------

def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def np_attention(x, w, p, heads):
    """Self-attention over rows of 2-d ``x``; returns output and head-averaged map."""
    n, c = x.shape
    d = c // heads
    Q = x @ w[f"{p}.wq"] + w[f"{p}.bq"]
    K = x @ w[f"{p}.wk"] + w[f"{p}.bk"]
    V = x @ w[f"{p}.wv"] + w[f"{p}.bv"]
    ctx = np.zeros((n, c))
    maps = np.zeros((n, n))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(n):
            logits = np.array([Q[i, sl] @ K[j, sl] for j in range(n)]) / math.sqrt(d)
            e = np.exp(logits - logits.max())
            a = e / e.sum()
            maps[i] += a / heads
            ctx[i, sl] = a @ V[:, sl]
    return ctx @ w[f"{p}.wo"] + w[f"{p}.bo"], maps


def np_received(x, w, prefix, n_layers, heads):
    h = x
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        z = np_layer_norm(h, w[f"{p}.ln1.gain"], w[f"{p}.ln1.bias"])
        a, maps = np_attention(z, w, f"{p}.attn", heads)
        if i == n_layers - 1:
            return maps.mean(axis=0)
        h = h + a
        z = np_layer_norm(h, w[f"{p}.ln2.gain"], w[f"{p}.ln2.bias"])
        h = h + np_gelu(z @ w[f"{p}.ffn.w1"] + w[f"{p}.ffn.b1"]) @ w[f"{p}.ffn.w2"] + w[f"{p}.ffn.b2"]


def arrays(weights):
    return {n: t.data for n, t in weights.items()}


@pytest.fixture
def scorer(rng):
    cfg = Config(channels=8, k=4, scales=((1, 1),), queries=(2,), depth=1, heads=2)
    return scaled_weights(build(cfg), rng, 0.6)


class TestSpatialScores:
    def test_single_token_frames_score_one(self, scorer, rng):
        stream = random_stream(rng, 3, 1, 8)
        assert np.array_equal(svr.score_spatial(stream, scorer.weights, 2).data, np.ones((3, 1)))

    def test_identical_tokens_split_evenly(self, scorer, rng):
        tok = rng.standard_normal(8)
        stream = FrameTokenStream.from_array(np.tile(tok, (1, 2, 1)))
        assert np.allclose(svr.score_spatial(stream, scorer.weights, 2).data, [[0.5, 0.5]], atol=1e-15)

    def test_against_numpy_oracle(self, scorer, rng):
        x = rng.standard_normal((1, 4, 8))
        got = svr.score_spatial(FrameTokenStream.from_array(x), scorer.weights, 2).data[0]
        oracle = np_received(x[0], arrays(scorer.weights), "svr.spatial", 2, 2)
        assert np.max(np.abs(got - oracle)) < 1e-10

    def test_rows_sum_to_one(self, scorer, rng):
        s = svr.score_spatial(random_stream(rng, 5, 7, 8), scorer.weights, 2).data
        assert s.min() >= 0
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)


class TestTemporalScores:
    def test_single_frame(self, scorer, rng):
        stream = random_stream(rng, 1, 5, 8)
        spatial = svr.score_spatial(stream, scorer.weights, 2)
        s = svr.score_temporal(stream, spatial, scorer.weights, 2)
        assert np.array_equal(s.frame_weight.data, [1.0])
        assert np.array_equal(s.combined.data, spatial.data)

    def test_identical_frames(self, scorer, rng):
        frame = rng.standard_normal((1, 4, 8))
        stream = FrameTokenStream.from_array(np.concatenate([frame, frame]))
        s = svr.score(stream, scorer.weights, 2)
        assert np.allclose(s.frame_weight.data, [0.5, 0.5], atol=1e-15)

    def test_against_numpy_oracle(self, scorer, rng):
        x = rng.standard_normal((3, 4, 8))
        w = arrays(scorer.weights)
        spatial = np.stack([np_received(f, w, "svr.spatial", 2, 2) for f in x])
        summaries = (spatial[:, :, None] * x).sum(axis=1)
        fw = np_received(summaries, w, "svr.temporal", 2, 2)
        got = svr.score(FrameTokenStream.from_array(x), scorer.weights, 2)
        assert np.max(np.abs(got.frame_weight.data - fw)) < 1e-10
        assert np.max(np.abs(got.combined.data - spatial * fw[:, None])) < 1e-10

    def test_total_mass(self, scorer, rng):
        for seed in range(20):
            r = np.random.default_rng(seed)
            s = svr.score(random_stream(r, int(r.integers(1, 6)), int(r.integers(1, 9)), 8), scorer.weights, 2)
            assert abs(s.combined.data.sum() - 1.0) < 1e-10
            assert abs(s.frame_weight.data.sum() - 1.0) < 1e-12


def planted_model():
    """Scorer whose logits are alpha * <u, LN(x_j)> in both stacks: the token
    parallel to ``u`` takes almost all attention in its frame, and so does its
    frame among the frame summaries."""
    cfg = Config(channels=8, k=4, scales=((1, 1),), queries=(2,), depth=1, heads=1,
                 spatial_layers=1, temporal_layers=1)
    model = build(cfg)
    u = np.array([1.0, -1.0, 2.0, -2.0, 0.5, -0.5, 1.5, -1.5])
    for stack in ("spatial", "temporal"):
        model.weights.set(f"svr.{stack}.0.attn.wq", np.zeros((8, 8)))
        model.weights.set(f"svr.{stack}.0.attn.bq", 40.0 * u / np.linalg.norm(u))
        model.weights.set(f"svr.{stack}.0.attn.wk", np.eye(8))
    return model, u


class TestSelection:
    def test_keep_everything(self, scorer, rng):
        stream = random_stream(rng, 3, 4, 8)
        sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 12)
        assert list(sel.global_indices) == list(range(12))
        assert np.array_equal(sel.tokens.data, stream.flat().data)

    def test_too_many(self, scorer, rng):
        stream = random_stream(rng, 2, 2, 8)
        with pytest.raises(SelectionError):
            svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 5)

    def test_planted_token_is_selected(self):
        model, u = planted_model()
        for seed in range(10):
            r = np.random.default_rng(seed)
            x = r.standard_normal((6, 5, 8))
            t, p = int(r.integers(6)), int(r.integers(5))
            x[t, p] = 3.0 * u
            stream = FrameTokenStream.from_array(x)
            scores = svr.score(stream, model.weights, 1, 1, 1)
            sel = svr.select_topk(stream, scores, 2)
            assert t * 5 + p in sel.global_indices
            assert scores.spatial.data[t, p] > 0.9
            assert scores.frame_weight.data[t] > 0.9

    def test_selection_copies_exactly(self, scorer, rng):
        stream = random_stream(rng, 4, 6, 8)
        sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 9)
        assert np.array_equal(sel.tokens.data, stream.flat().data[sel.global_indices])
        assert list(sel.global_indices) == sorted(sel.global_indices)

    def test_selection_copies_exactly_under_tape(self, scorer, rng):
        stream = random_stream(rng, 4, 6, 8)
        with T.Tape():
            sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 9)
        assert np.array_equal(sel.tokens.data, stream.flat().data[sel.global_indices])

    def test_indices_are_top_scores(self, scorer, rng):
        stream = random_stream(rng, 4, 6, 8)
        scores = svr.score(stream, scorer.weights, 2)
        sel = svr.select_topk(stream, scores, 7)
        flat = scores.combined.data.ravel()
        assert flat[sel.global_indices].min() >= np.delete(flat, sel.global_indices).max()
        assert np.array_equal(sel.scores, flat[sel.global_indices])

    def test_monotone_inclusion(self, scorer, rng):
        stream = random_stream(rng, 4, 6, 8)
        scores = svr.score(stream, scorer.weights, 2)
        prev = set()
        for k in range(1, 25):
            cur = set(svr.select_topk(stream, scores, k).global_indices)
            assert prev <= cur
            prev = cur


class TestPooling:
    def test_unit_scale(self, scorer, rng):
        stream = random_stream(rng, 2, 4, 8)
        sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 5)
        ms = svr.multi_scale_pool(sel, [(1, 1)])
        assert np.array_equal(ms[0].tokens.data, sel.tokens.data)
        dense = ms[0].provenance.dense()
        assert np.array_equal(dense, np.eye(8)[sel.global_indices])

    def test_hand_arithmetic(self):
        tokens = T.Tensor([[1.0], [2.0], [3.0], [4.0]])
        sel = svr.SelectedTokens(tokens, np.arange(4), np.full(4, 0.25), 4)
        ms = svr.multi_scale_pool(sel, [(2, 2)])
        assert np.array_equal(ms[0].tokens.data.ravel(), [1.5, 3.5])

    def test_window_error(self, scorer, rng):
        stream = random_stream(rng, 2, 2, 8)
        sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 3)
        with pytest.raises(WindowError):
            svr.multi_scale_pool(sel, [(1, 1), (4, 1)])

    def test_default_counts(self, scorer, rng):
        stream = random_stream(rng, 8, 8, 8)
        sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 64)
        ms = svr.multi_scale_pool(sel, [(1, 1), (4, 2), (16, 8)])
        assert [s.tokens.shape[0] for s in ms] == [64, 31, 7]

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), t=st.integers(1, 5), n=st.integers(1, 8), data=st.data())
    def test_provenance_is_convex_and_exact(self, seed, t, n, data):
        rng = np.random.default_rng(seed)
        cfg = Config(channels=8, k=1, scales=((1, 1),), queries=(1,), depth=1, heads=2)
        weights = scaled_weights(build(cfg), rng, 0.5).weights
        stream = random_stream(rng, t, n, 8)
        k = data.draw(st.integers(1, t * n))
        scales = [(data.draw(st.integers(1, k)), data.draw(st.integers(1, 4))) for _ in range(3)]
        sel = svr.select_topk(stream, svr.score(stream, weights, 2), k)
        ms = svr.multi_scale_pool(sel, scales)
        flat = stream.flat().data
        for s, (w, r) in zip(ms, scales):
            dense = s.provenance.dense()
            assert dense.shape == (T.pooled_count(k, w, r), t * n)
            assert dense.min() >= 0
            assert np.max(np.abs(dense.sum(axis=1) - 1)) < 1e-12
            assert ((dense > 0).sum(axis=1) <= w).all()
            assert np.max(np.abs(dense @ flat - s.tokens.data)) < 1e-12

    def test_merged_keeps_scale_order(self, scorer, rng):
        stream = random_stream(rng, 3, 4, 8)
        sel = svr.select_topk(stream, svr.score(stream, scorer.weights, 2), 8)
        ms = svr.multi_scale_pool(sel, [(1, 1), (2, 2)])
        merged = ms.merged()
        assert merged.tokens.shape[0] == 12
        assert np.array_equal(merged.tokens.data[8:], ms[1].tokens.data)
