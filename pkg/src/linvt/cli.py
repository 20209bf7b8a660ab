"""``linvt`` command line.

Exit codes: 0 ok, 1 self-test failure, 2 unparseable input, 3 config or shape
mismatch, 4 I/O error, 5 training divergence, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import formats, selftest, svr, train
from .errors import ConfigError, DivergenceError, FormatError, LinVTError, NumericInputError
from .model import LEARNED_VARIANTS, VARIANTS, Config, LinVT, atomic_write, build, load, save
from .svr import FrameTokenStream
from .text import embed_text

EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2, 3, 4, 5, 64
SEGMENT_THRESHOLD = 0.5

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def default_seed() -> int | None:
    raw = os.environ.get("LINVT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"LINVT_SEED must be an integer, got {raw!r}") from None


def load_config(spec: str | None, seed: int | None = None) -> Config:
    """A preset name (``desk``, ``full``) or a path to a JSON config."""
    if spec in (None, "desk"):
        cfg = Config.desk()
    elif spec == "full":
        cfg = Config.full()
    else:
        try:
            text = Path(spec).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {spec}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {spec} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {spec} must be a JSON object")
        cfg = Config.from_dict(data)
    if seed is not None:
        cfg = Config.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg.validate()


def load_model(args) -> LinVT:
    cfg = load_config(args.config, args.seed)
    if getattr(args, "weights", None):
        return LinVT(cfg, load(args.weights, cfg))
    return build(cfg)


def read_input(path) -> tuple[FrameTokenStream, int]:
    arr, code = formats.read_stream(path)
    return FrameTokenStream.from_array(np.array(arr, dtype=np.float64)), code


def segment(stream: FrameTokenStream, threshold: float = SEGMENT_THRESHOLD) -> list[FrameTokenStream]:
    """Split where the cosine distance between consecutive frame means exceeds ``threshold``."""
    means = stream.tokens.data.mean(axis=1)
    norms = np.maximum(np.linalg.norm(means, axis=1), 1e-300)
    cos = np.sum(means[1:] * means[:-1], axis=1) / (norms[1:] * norms[:-1])
    cuts = [0] + [i + 1 for i, c in enumerate(cos) if 1.0 - c > threshold] + [stream.frames]
    return [stream.clip(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def _emit_lines(records, output) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if output:
        atomic_write(output, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def cmd_tokenize(args) -> int:
    model = load_model(args)
    stream, code = read_input(args.input)
    text = embed_text(args.text, model.cfg.channels)
    clips = segment(stream, args.threshold) if args.segment else [stream]
    outs = [model.forward(clip, text).tokens.data for clip in clips]
    tokens = np.concatenate(outs, axis=0)[None]
    formats.write_stream(args.output, tokens, code)
    print(f"wrote {tokens.shape[1]} tokens from {len(clips)} clip(s) to {args.output}", file=sys.stderr)
    return EXIT_OK


def mask_dump(model: LinVT, stream: FrameTokenStream, k: int) -> list[dict]:
    scores = svr.score(stream, model.weights, model.cfg.heads, model.cfg.spatial_layers,
                       model.cfg.temporal_layers)
    sel = svr.select_topk(stream, scores, min(k, stream.total))
    n = stream.per_frame
    records = []
    combined = scores.combined.data
    for t in range(stream.frames):
        picked = [int(g - t * n) for g in sel.global_indices if t * n <= g < (t + 1) * n]
        records.append({
            "frame": t,
            "frame_weight": float(scores.frame_weight.data[t]),
            "scores": [float(v) for v in combined[t]],
            "selected": picked,
            "selected_scores": [float(combined[t, p]) for p in picked],
        })
    return records


def cmd_inspect(args) -> int:
    model = load_model(args)
    stream, _ = read_input(args.input)
    k = args.top if args.top is not None else model.cfg.k
    if k < 1:
        raise UsageError("--top must be positive")
    _emit_lines(mask_dump(model, stream, k), args.output)
    return EXIT_OK


def cmd_selftest(args) -> int:
    model = build(load_config(args.config, args.seed))
    weights = load(args.weights, model.cfg) if args.weights else None
    results = selftest.run(model, weights, grad_seeds=range(args.grad_seeds))
    print(selftest.format_table(results))
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _task_spec(cfg: Config) -> train.TaskSpec:
    return train.TaskSpec(channels=cfg.channels)


def cmd_train(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    model = load_model(args)
    records = []
    result = train.train_loop(model, args.steps, seed=model.cfg.seed, spec=_task_spec(model.cfg),
                              eval_every=args.eval_every, on_record=records.append, prefetch=args.prefetch)
    _emit_lines(records, args.log)
    if args.out:
        save(result.weights, args.out)
    final = [r["eval_acc"] for r in records if r["eval_acc"] is not None]
    if final:
        print(f"final eval_acc {final[-1]:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be nonnegative")
    base = load_config(args.config, args.seed)
    spec = _task_spec(base)
    held_out = train.eval_tasks(spec, args.tasks)
    rows = []
    for variant in args.variants or VARIANTS:
        model = build(base.matched(variant))
        untrained = train.retrieval_accuracy(model, held_out)
        trained = untrained
        if variant in LEARNED_VARIANTS and args.steps:
            train.train_loop(model, args.steps, seed=base.seed, spec=spec, eval_every=0)
            trained = train.retrieval_accuracy(model, held_out)
        rows.append({"variant": variant, "steps": args.steps if variant != "Avg" else 0,
                     "untrained_acc": untrained, "accuracy": trained})
    _emit_lines(rows, args.output)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be at least 1")
    model = load_model(args)
    if args.input:
        stream, _ = read_input(args.input)
    else:
        rng = np.random.default_rng(model.cfg.seed)
        stream = FrameTokenStream.from_array(rng.standard_normal((args.frames, args.per_frame, model.cfg.channels)))
    text = embed_text(args.text, model.cfg.channels)
    times = []
    out = None
    for _ in range(args.iters):
        t0 = time.perf_counter()
        out = model.forward(stream, text)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    produced = out.tokens.shape[0]
    report = {
        "frames": stream.frames,
        "per_frame": stream.per_frame,
        "input_tokens": stream.total,
        "output_tokens": produced,
        "compression": stream.total / produced,
        "iters": args.iters,
        "latency_ms": {f"p{p}": float(np.percentile(times, p) * 1e3) for p in (50, 90, 99)},
        "tokens_per_sec": float(stream.total / np.median(times)),
    }
    _emit_lines([report], None)
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="linvt", description="Linear video tokenizer on synthetic token streams.")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, weights=True):
        sp.add_argument("--config", help="preset (desk, full) or JSON config path; default desk")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed (env LINVT_SEED)")
        if weights:
            sp.add_argument("--weights", help="LVTW weight file; default is a fresh build from the seed")

    sp = sub.add_parser("tokenize", help="condense an LVT1 stream into output tokens")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--text", default="")
    sp.add_argument("--segment", action="store_true", help="split into clips at frame-mean jumps")
    sp.add_argument("--threshold", type=float, default=SEGMENT_THRESHOLD, help="cosine distance for --segment")
    sp.set_defaults(func=cmd_tokenize)

    sp = sub.add_parser("inspect", help="dump per-frame scores and top-k membership as JSON lines")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--top", type=int, default=None, help="selection size; default the config k")
    sp.add_argument("--output", help="JSON-lines path; default stdout")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("selftest", help="run the invariant suite")
    common(sp)
    sp.add_argument("--grad-seeds", type=int, default=2)
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("train", help="train on synthetic needle tasks")
    common(sp)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", help="where to write trained LVTW weights")
    sp.add_argument("--log", help="JSON-lines metric log; default stdout")
    sp.add_argument("--eval-every", type=int, default=100)
    sp.add_argument("--prefetch", type=int, default=0, help="tasks generated ahead on a worker thread")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="train and score every variant at matched size")
    common(sp, weights=False)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--tasks", type=int, default=train.EVAL_TASKS)
    sp.add_argument("--variants", nargs="+", choices=VARIANTS)
    sp.add_argument("--output", help="JSON-lines path; default stdout")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="forward latency and compression")
    common(sp)
    sp.add_argument("--input", help="LVT1 stream; default a random stream")
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--per-frame", type=int, default=16)
    sp.add_argument("--text", default="find the alpha")
    sp.add_argument("--iters", type=int, default=10)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = default_seed()
        return args.func(args)
    except UsageError as exc:
        print(f"linvt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, NumericInputError) as exc:
        print(f"linvt: cannot parse input: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as exc:
        print(f"linvt: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except LinVTError as exc:
        print(f"linvt: config/shape mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"linvt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
