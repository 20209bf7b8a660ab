"""Invariant suite shared by ``linvt selftest`` and the test-suite.

Each check returns ``(ok, detail)``. A check that trips over non-finite
values reports a numeric-input failure instead of passing silently.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import checks, svr, train
from . import tensor as T
from .errors import NumericInputError
from .model import LEARNED_VARIANTS, Config, LinVT, LinVTWeights, build
from .svr import FrameTokenStream
from .text import embed_text

GRAD_TOL = 1e-4
RECON_TOL = 1e-9
ROW_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _random_stream(rng, cfg: Config, frames: int = 4, per_frame: int = 8) -> FrameTokenStream:
    return FrameTokenStream.from_array(rng.standard_normal((frames, per_frame, cfg.channels)))


def grad_config(seed: int = 0) -> Config:
    return Config(channels=8, heads=2, k=6, scales=((1, 1), (3, 2)), queries=(2, 1), depth=1, seed=seed)


def perturbed(model: LinVT, rng, std: float = 0.5, bias_std: float = 0.1) -> LinVT:
    """Push weights away from the small init so every path carries a gradient."""
    for name, t in list(model.weights.items()):
        leaf = name.split(".")[-1]
        if leaf.startswith("w") or ".queries." in name:
            model.weights.set(name, rng.normal(0.0, std, t.shape))
        elif leaf.startswith("b"):
            model.weights.set(name, rng.normal(0.0, bias_std, t.shape))
        else:
            model.weights.set(name, 1.0 + rng.normal(0.0, bias_std, t.shape))
    return model


def gradient_errors(seed: int, variant: str = "MultiC") -> dict[str, float]:
    """Directional finite-difference error of every parameter of the full loss."""
    rng = np.random.default_rng([0x96AD, seed])
    model = perturbed(build(grad_config(seed).matched(variant)), rng)
    task = train.gen_task(seed, frames=3, per_frame=4, channels=8, n_classes=3)
    params = {n: t.data for n, t in model.weights.items()}
    return checks.directional_check(train.frozen_objective(model, task), params, rng)


def check_gradients(seeds=range(3)) -> tuple[bool, str]:
    worst, where = 0.0, ""
    for seed in seeds:
        for variant in LEARNED_VARIANTS:
            errs = gradient_errors(seed, variant)
            name, err = max(errs.items(), key=lambda kv: kv[1])
            if not err <= worst:
                worst, where = err, f"{variant}:{name}"
    return worst < GRAD_TOL, f"max rel err {worst:.2e} at {where}"


def provenance_error(out, stream: FrameTokenStream) -> tuple[float, float, float]:
    """Reconstruction error, worst row-sum deviation and most negative weight."""
    dense = out.dense_provenance()
    if not (np.isfinite(dense).all() and np.isfinite(out.tokens.data).all()):
        raise NumericInputError("non-finite values in output tokens or provenance")
    recon = float(np.max(np.abs(dense @ stream.flat().data - out.tokens.data)))
    rows = float(np.max(np.abs(dense.sum(axis=1) - 1.0)))
    return recon, rows, float(dense.min())


def check_convexity(model: LinVT, trials: int = 20) -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    worst_r = worst_s = 0.0
    for i in range(trials):
        stream = _random_stream(rng, model.cfg, int(rng.integers(1, 6)), int(rng.integers(1, 12)))
        text = embed_text(" ".join(rng.choice(train.CLASS_NAMES, int(rng.integers(0, 4)))), model.cfg.channels)
        recon, rows, low = provenance_error(model.forward(stream, text), stream)
        if low < 0:
            return False, f"negative provenance weight {low:.2e}"
        worst_r, worst_s = max(worst_r, recon), max(worst_s, rows)
    ok = worst_r < RECON_TOL and worst_s < ROW_TOL
    return ok, f"recon {worst_r:.1e}, row sums {worst_s:.1e}"


def check_no_residual(model: LinVT) -> tuple[bool, str]:
    if model.cfg.variant != "MultiC":
        model = build(model.cfg.with_variant("MultiC"))
    weights = model.weights.copy()
    c = model.cfg.channels
    weights.set("tta.agg.wq", np.zeros((c, c)))
    weights.set("tta.agg.wk", np.zeros((c, c)))
    probe = LinVT(model.cfg.with_variant("MultiC"), weights)
    rng = np.random.default_rng(5)
    stream = _random_stream(rng, probe.cfg)
    out = probe.forward(stream, embed_text("find the alpha", c))
    pooled = svr.multi_scale_pool(out.selection, _scales(probe.cfg, out.selection.k))
    worst, start = 0.0, 0
    for group, q in zip(pooled, probe.cfg.queries):
        worst = max(worst, float(np.max(np.abs(out.tokens.data[start:start + q] - group.tokens.data.mean(axis=0)))))
        start += q
    if not np.isfinite(worst):
        raise NumericInputError("non-finite aggregation output")
    return worst < 1e-12, f"max diff from scale mean {worst:.1e}"


def _scales(cfg: Config, k: int):
    return [(min(w, k), r) for w, r in cfg.scales]


def check_topk(trials: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    for _ in range(trials):
        n = int(rng.integers(1, 64))
        x = rng.integers(0, 5, n).astype(float)
        k = int(rng.integers(1, n + 1))
        ranked = sorted(range(n), key=lambda i: (-x[i], i))[:k]
        got = list(T.topk_indices(T.Tensor(x), k))
        if got != sorted(ranked):
            return False, f"mismatch on n={n}, k={k}"
    return True, f"{trials} tied vectors"


def check_pooling(limit: int = 64) -> tuple[bool, str]:
    for n in range(1, limit + 1):
        for w in range(1, n + 1):
            for r in range(1, n + 1):
                if T.pooled_count(n, w, r) != (n - w) // r + 1:
                    return False, f"count wrong at n={n}, w={w}, r={r}"
    x = T.Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    ok = np.array_equal(T.mean_pool(x, 2, 2).data.ravel(), [1.5, 3.5])
    return ok, f"counts exhaustive to n={limit}"


def check_parity(configs: int = 10) -> tuple[bool, str]:
    rng = np.random.default_rng(17)
    for i in range(configs):
        groups = int(rng.integers(1, 4))
        queries = tuple(int(q) for q in rng.integers(1, 9, groups))
        scales = tuple((int(rng.integers(1, 6)), int(rng.integers(1, 4))) for _ in range(groups))
        cfg = Config(channels=8, heads=2, k=int(rng.integers(4, 24)), queries=queries, scales=scales,
                     depth=1, seed=i)
        stream = _random_stream(rng, cfg)
        counts = {v: build(cfg.matched(v)).forward(stream).tokens.shape[0] for v in LEARNED_VARIANTS}
        if set(counts.values()) != {sum(queries)}:
            return False, f"counts {counts} for queries {queries}"
    return True, f"{configs} random configs"


def suite(model: LinVT, grad_seeds=range(3)) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    return [
        ("gradients", lambda: check_gradients(grad_seeds)),
        ("convex provenance", lambda: check_convexity(model)),
        ("no residual", lambda: check_no_residual(model)),
        ("top-k oracle", check_topk),
        ("pooling arithmetic", check_pooling),
        ("variant parity", check_parity),
    ]


def run(model: LinVT | None = None, weights: LinVTWeights | None = None,
        grad_seeds=range(3)) -> list[CheckResult]:
    model = model or build(Config.desk())
    if weights is not None:
        model = LinVT(model.cfg, weights)
    results = []
    for name, fn in suite(model, grad_seeds):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except NumericInputError as exc:
            ok, detail = False, f"numeric input: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.ok else 'FAIL':<6}  {r.detail} ({r.seconds:.1f}s)")
    return "\n".join(lines)
