"""Configuration, weights, variant assembly and the LVTW weight format."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import layers, svr, tta
from . import tensor as T
from .errors import ConfigError, CorruptFileError, ShapeMismatchError, VersionMismatchError
from .svr import FrameTokenStream, Provenance, ScaleTokens, SelectedTokens
from .tensor import Tensor
from .tta import AggregationOutput

log = logging.getLogger(__name__)

VARIANTS = ("Avg", "SingleA", "MultiA", "MultiB", "MultiC")
LEARNED_VARIANTS = VARIANTS[1:]

WEIGHTS_MAGIC = b"LVTW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class Config:
    """Tokenizer hyper-parameters.

    ``scales`` are ``(window, stride)`` pairs for pooling the selected tokens and
    ``queries`` the per-scale query counts. MultiA ignores ``scales``: it pools
    the aggregated tokens instead, with windows derived from ``queries``.
    ``agg_scale`` is the logit scale of the linear aggregation (``None`` means
    ``1/sqrt(channels)``).
    """

    channels: int = 64
    k: int = 64
    scales: tuple = ((1, 1), (4, 2), (16, 8))
    queries: tuple = (8, 4, 2)
    depth: int = 2
    heads: int = 4
    variant: str = "MultiC"
    seed: int = 0
    spatial_layers: int = 2
    temporal_layers: int = 2
    ffn_mult: int = 4
    agg_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(tuple(int(v) for v in s) for s in self.scales))
        object.__setattr__(self, "queries", tuple(int(q) for q in self.queries))

    @classmethod
    def desk(cls, **overrides) -> "Config":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "Config":
        # channels=1536 is solved so the parameter count lands on a 267M target
        base = dict(channels=1536, k=2048, queries=(64, 32, 16), depth=4, heads=8)
        base.update(overrides)
        return cls(**base)

    @property
    def output_tokens(self) -> int:
        return sum(self.queries)

    def bank_sizes(self) -> list[int]:
        if self.variant == "MultiC":
            return list(self.queries)
        if self.variant == "MultiA":
            return [max(self.queries)]
        if self.variant == "Avg":
            return []
        return [sum(self.queries)]

    def validate(self) -> "Config":
        problems = []
        for name in ("channels", "k", "depth", "heads", "spatial_layers", "temporal_layers", "ffn_mult"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {', '.join(VARIANTS)}")
        if self.heads >= 1 and self.channels % self.heads:
            problems.append(f"channels {self.channels} not divisible by heads {self.heads}")
        if not self.queries or any(q < 1 for q in self.queries):
            problems.append("queries must be a non-empty list of positive counts")
        if not self.scales or any(w < 1 or r < 1 for w, r in self.scales):
            problems.append("scales must be a non-empty list of positive (window, stride)")
        if self.variant in ("MultiB", "MultiC") and len(self.scales) != len(self.queries):
            problems.append(f"{len(self.scales)} scales but {len(self.queries)} query groups")
        if self.variant == "SingleA" and (len(self.scales) != 1 or self.scales[0][0] != 1):
            problems.append("SingleA needs exactly one scale with window 1")
        if self.agg_scale is not None and not self.agg_scale > 0:
            problems.append("agg_scale must be positive")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        return self

    def with_variant(self, variant: str) -> "Config":
        return dataclasses.replace(self, variant=variant)

    def matched(self, variant: str) -> "Config":
        """The configuration of ``variant`` with the same total output size."""
        if variant == "SingleA":
            return dataclasses.replace(self, variant=variant, scales=((1, 1),),
                                       queries=(self.output_tokens,))
        return dataclasses.replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = [list(s) for s in self.scales]
        d["queries"] = list(self.queries)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        return cls.from_dict(json.loads(text))


def multia_pooling(queries, produced: int) -> list[tuple[int, int]]:
    """Windows over ``produced`` aggregated tokens giving exactly ``q`` outputs each."""
    out = []
    for q in queries:
        stride = max(1, produced // q)
        window = produced - (q - 1) * stride
        out.append((window, stride))
    return out


def parameter_shapes(cfg: Config) -> dict:
    """Ordered ``name -> (shape, init kind)`` for every learnable tensor."""
    cfg.validate()
    if cfg.variant == "Avg":
        return {}
    c = cfg.channels
    shapes = {}
    shapes.update(svr.scoring_shapes("svr.spatial", c, cfg.spatial_layers, cfg.ffn_mult))
    shapes.update(svr.scoring_shapes("svr.temporal", c, cfg.temporal_layers, cfg.ffn_mult))
    for i, q in enumerate(cfg.bank_sizes()):
        shapes[f"tta.queries.{i}"] = ((q, c), layers.QUERY)
    for d in range(cfg.depth):
        shapes.update(tta.block_shapes(f"tta.block.{d}", c, cfg.ffn_mult))
    shapes.update(tta.aggregation_shapes(c))
    return shapes


def count_parameters(cfg: Config) -> int:
    return sum(math.prod(shape) for shape, _ in parameter_shapes(cfg).values())


class LinVTWeights(Mapping):
    """Flat ordered mapping of parameter name to leaf tensor."""

    version = WEIGHTS_VERSION

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.set(name, value)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def set(self, name: str, value) -> None:
        data = value.data if isinstance(value, Tensor) else value
        self._params[name] = Tensor(data, requires_grad=True)

    def shapes(self) -> dict:
        return {n: t.shape for n, t in self._params.items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy(self) -> "LinVTWeights":
        return LinVTWeights(self._params)

    def equals(self, other: "LinVTWeights") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[n].data, other[n].data) for n in self)


def init_weights(cfg: Config) -> LinVTWeights:
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    params = {}
    for name, (shape, kind) in parameter_shapes(cfg).items():
        if kind == layers.PROJ:
            params[name] = rng.normal(0.0, 0.02, shape)
        elif kind == layers.QUERY:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(c), shape)
        elif kind == layers.GAIN:
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return LinVTWeights(params)


@dataclass
class LinVT:
    cfg: Config
    weights: LinVTWeights = field(repr=False)

    @property
    def num_parameters(self) -> int:
        return self.weights.num_parameters()

    def forward(self, stream: FrameTokenStream, text: Tensor | None = None,
                frozen: SelectedTokens | None = None) -> AggregationOutput:
        return forward_weights(self.cfg, self.weights, stream, text, frozen)


def build(cfg: Config) -> LinVT:
    cfg.validate()
    model = LinVT(cfg, init_weights(cfg))
    log.info("built %s with %d parameters", cfg.variant, model.num_parameters)
    return model


def check_weights(cfg: Config, weights: LinVTWeights) -> None:
    expected = {n: tuple(s) for n, (s, _) in parameter_shapes(cfg).items()}
    got = weights.shapes()
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
        raise ShapeMismatchError(
            f"weights do not match config (missing={missing[:3]}, extra={extra[:3]}, wrong shape={wrong[:3]})")


def average_baseline(stream: FrameTokenStream) -> AggregationOutput:
    """One token per frame: the plain mean of that frame's tokens."""
    t, n = stream.frames, stream.per_frame
    tokens = T.mean(stream.tokens, axis=1)
    weights = np.kron(np.eye(t), np.full((1, n), 1.0 / n))
    prov = Provenance(weights, np.arange(t * n), t * n)
    return AggregationOutput(tokens, [], prov, [t])


def _effective_k(k: int, total: int) -> int:
    if k > total:
        log.warning("k=%d exceeds the %d tokens in the stream; keeping all of them", k, total)
        return total
    return k


def _clamp_scales(scales, k: int) -> list[tuple[int, int]]:
    out = []
    for w, r in scales:
        if w > k:
            log.warning("pooling window %d exceeds %d selected tokens; clamping", w, k)
            w = k
        out.append((w, r))
    return out


def forward_weights(cfg: Config, weights: Mapping[str, Tensor], stream: FrameTokenStream,
                    text: Tensor | None = None, frozen: SelectedTokens | None = None) -> AggregationOutput:
    if cfg.variant == "Avg":
        return average_baseline(stream)
    if text is not None and text.shape[0] and text.shape[-1] != stream.channels:
        raise ShapeMismatchError(f"text width {text.shape[-1]} does not match stream width {stream.channels}")
    if stream.channels != cfg.channels:
        raise ShapeMismatchError(f"stream has {stream.channels} channels, config expects {cfg.channels}")
    scores = svr.score(stream, weights, cfg.heads, cfg.spatial_layers, cfg.temporal_layers)
    k = _effective_k(cfg.k, stream.total)
    sel = svr.select_topk(stream, scores, k, frozen)

    if cfg.variant == "MultiA":
        base = ScaleTokens(0, 1, 1, sel.tokens, sel.provenance())
        bank = tta.query_bank(weights, 1)
        refined = tta.run_blocks(bank, [sel.tokens], text, weights, cfg.depth, cfg.heads)
        agg = tta.linear_aggregate([base], refined, weights, cfg.agg_scale)
        produced = agg.tokens.shape[0]
        outs, provs = [], []
        for w, r in multia_pooling(cfg.queries, produced):
            outs.append(T.mean_pool(agg.tokens, w, r))
            provs.append(svr.pool_provenance(agg.provenance, produced, w, r))
        out = AggregationOutput(T.concat(outs), agg.attn, Provenance.stack(provs),
                                [o.shape[0] for o in outs])
    else:
        pooled = svr.multi_scale_pool(sel, _clamp_scales(cfg.scales, k))
        groups = pooled.scales if cfg.variant == "MultiC" else [pooled.merged()]
        bank = tta.query_bank(weights, len(groups))
        refined = tta.run_blocks(bank, [g.tokens for g in groups], text, weights, cfg.depth, cfg.heads)
        out = tta.linear_aggregate(groups, refined, weights, cfg.agg_scale)
        if cfg.variant != "MultiC":
            out = dataclasses.replace(out, group_sizes=[out.tokens.shape[0]])
    return dataclasses.replace(out, selection=sel, scores=scores)


def forward_variant(model: LinVT, stream: FrameTokenStream, text: Tensor | None = None) -> AggregationOutput:
    return model.forward(stream, text)


# -- LVTW ---------------------------------------------------------------------

def encode_weights(weights: LinVTWeights) -> bytes:
    head = [WEIGHTS_MAGIC, struct.pack("<HI", WEIGHTS_VERSION, len(weights))]
    body = []
    for name, t in weights.items():
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)) + raw)
        head.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        body.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(head + body)


def decode_weights(buf: bytes) -> LinVTWeights:
    if len(buf) < 10 or buf[:4] != WEIGHTS_MAGIC:
        raise CorruptFileError("not an LVTW weight file (bad magic)")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(f"LVTW version {version}, expected {WEIGHTS_VERSION}")
    pos = 10
    table = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise CorruptFileError("truncated name in shape table")
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            table.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"truncated or malformed shape table: {exc}") from exc
    need = sum(8 * math.prod(s) for _, s in table)
    if len(buf) - pos != need:
        raise CorruptFileError(f"payload is {len(buf) - pos} bytes, shape table needs {need}")
    params = {}
    for name, shape in table:
        size = math.prod(shape)
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
    if len(params) != len(table):
        raise CorruptFileError("duplicate parameter names")
    return LinVTWeights(params)


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(weights: LinVTWeights, path) -> None:
    atomic_write(path, encode_weights(weights))


def load(path, cfg: Config | None = None) -> LinVTWeights:
    weights = decode_weights(Path(path).read_bytes())
    if cfg is not None:
        check_weights(cfg, weights)
    return weights
