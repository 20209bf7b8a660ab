"""Synthetic needle-retrieval task, contrastive loss, Adam and the training loop."""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import CapacityError, DivergenceError
from .model import LinVT, LinVTWeights, forward_weights
from .svr import FrameTokenStream
from .tensor import Tape, Tensor
from .text import embed_text

CLASS_NAMES = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")
TEMPERATURE = 0.1
# sharpness of the soft best-token choice in the loss
MATCH_TEMPERATURE = 0.05
EVAL_TASKS = 64
# eval seeds live far above any training seed (run_seed * TRAIN_STRIDE + step)
EVAL_SEED_BASE = 10 ** 12
TRAIN_STRIDE = 10 ** 6
_CLASS_TAG = 0xC1A55
_TASK_TAG = 0x7A5C


def class_name(i: int) -> str:
    return CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}"


@lru_cache(maxsize=16)
def class_vectors(channels: int, n_classes: int) -> np.ndarray:
    """Fixed orthonormal class directions shared by every task of this shape."""
    if n_classes > channels:
        raise CapacityError(f"{n_classes} orthonormal classes do not fit in {channels} channels")
    rng = np.random.default_rng([_CLASS_TAG, channels, n_classes])
    q, _ = np.linalg.qr(rng.standard_normal((channels, n_classes)))
    q = q.T.copy()
    q.setflags(write=False)
    return q


@dataclass(frozen=True)
class TaskSpec:
    frames: int = 16
    per_frame: int = 16
    channels: int = 64
    n_classes: int = 4
    noise_scale: float = 1.0
    needle_scale: float = 1.0


@dataclass(frozen=True)
class SyntheticTask:
    stream: FrameTokenStream
    text: str
    text_tokens: Tensor
    class_id: int
    target: np.ndarray          # planted vector of the named class
    needles: np.ndarray         # global index of each class's needle
    classes: np.ndarray = field(repr=False)

    def with_class(self, class_id: int) -> "SyntheticTask":
        text = f"find the {class_name(class_id)}"
        return SyntheticTask(self.stream, text, embed_text(text, self.stream.channels), class_id,
                             self.stream.flat().data[self.needles[class_id]].copy(),
                             self.needles, self.classes)


def gen_task(seed: int, frames: int = 16, per_frame: int = 16, channels: int = 64,
             n_classes: int = 4, noise_scale: float = 1.0, needle_scale: float = 1.0) -> SyntheticTask:
    """Plant one needle per class in a stream of isotropic noise and name one class.

    Noise rows are ``N(0, noise_scale**2 / C)`` per coordinate, so their norm is
    about ``noise_scale`` and their cosine with any class direction is about
    ``N(0, 1/C)``.
    """
    total = frames * per_frame
    if n_classes > total:
        raise CapacityError(f"{n_classes} needles do not fit in {total} token slots")
    classes = class_vectors(channels, n_classes)
    rng = np.random.default_rng([_TASK_TAG, int(seed)])
    flat = rng.standard_normal((total, channels)) * (noise_scale / math.sqrt(channels))
    needles = rng.choice(total, size=n_classes, replace=False)
    flat[needles] = needle_scale * classes
    class_id = int(rng.integers(n_classes))
    text = f"find the {class_name(class_id)}"
    stream = FrameTokenStream(Tensor._wrap(flat.reshape(frames, per_frame, channels)))
    return SyntheticTask(stream, text, embed_text(text, channels), class_id,
                         flat[needles[class_id]].copy(), needles, classes)


def gen_from_spec(seed: int, spec: TaskSpec) -> SyntheticTask:
    return gen_task(seed, spec.frames, spec.per_frame, spec.channels, spec.n_classes,
                    spec.noise_scale, spec.needle_scale)


def _cosines(tokens: np.ndarray, v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=-1) * np.linalg.norm(v)
    return tokens @ v / np.maximum(norms, 1e-300)


def match_weights(tokens: np.ndarray, target: np.ndarray, temperature: float = MATCH_TEMPERATURE) -> np.ndarray:
    """Soft choice of the output token that best matches the target; a constant to the loss."""
    z = _cosines(tokens, target) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def needle_target(task: SyntheticTask) -> np.ndarray:
    tgt = np.zeros(task.stream.total)
    tgt[task.needles] = 1.0 / len(task.needles)
    return tgt


def loss(out, task: SyntheticTask, temperature: float = TEMPERATURE,
         match: np.ndarray | None = None) -> Tensor:
    """Contrastive loss on the best-matching output token plus a score term.

    Each output token gets InfoNCE of its class cosines (the named class is the
    positive, the other classes are negatives) plus ``1 - cos`` to the target.
    Tokens are mixed with ``match`` weights, a sharp softmax over their cosine
    to the target that is held constant. When ``out`` carries significance
    scores, ``KL(u || scores)`` is added, with ``u`` uniform over the needle
    positions. Every term is nonnegative.
    """
    tokens = out.tokens
    if match is None:
        match = match_weights(tokens.data, task.target)
    norms = T.sqrt(T.tsum(tokens * tokens, axis=1) + 1e-12)
    classes = Tensor._wrap(task.classes / np.linalg.norm(task.classes, axis=1, keepdims=True))
    cls_cos = (tokens @ T.transpose(classes)) / T.reshape(norms, (-1, 1))
    nce = -T.log_softmax(cls_cos * (1.0 / temperature), axis=1)[:, task.class_id]
    t_unit = (task.target / np.linalg.norm(task.target)).reshape(-1, 1)
    cos_t = T.reshape(tokens @ Tensor._wrap(t_unit), (-1,)) / norms
    value = T.tsum((nce + (1.0 - cos_t)) * Tensor._wrap(match))
    if getattr(out, "scores", None) is not None:
        tgt = needle_target(task)
        on = tgt > 0
        kept = T.take(T.reshape(out.scores.combined, (-1,)), np.flatnonzero(on))
        value = value + T.tsum(Tensor._wrap(tgt[on]) * (Tensor._wrap(np.log(tgt[on])) - T.log(kept + 1e-300)))
    return value


def frozen_objective(model: LinVT, task: SyntheticTask) -> Callable[[dict], Tensor]:
    """The loss as a smooth function of the weights around their current value.

    Selection indices and match weights are taken from one reference forward
    pass and held fixed, so central differences see the same surrogate that
    the tape differentiates.
    """
    ref = model.forward(task.stream, task.text_tokens)
    match = match_weights(ref.tokens.data, task.target)

    def objective(params) -> Tensor:
        out = forward_weights(model.cfg, params, task.stream, task.text_tokens, frozen=ref.selection)
        return loss(out, task, match=match)

    return objective


def retrieved(out, task: SyntheticTask, threshold: float = 0.9) -> bool:
    """Does the output token nearest the named class direction match the planted needle?"""
    tokens = out.tokens.data
    nearest = tokens[int(np.argmax(_cosines(tokens, task.classes[task.class_id])))]
    return bool(_cosines(nearest[None, :], task.target)[0] > threshold)


def eval_tasks(spec: TaskSpec, n: int = EVAL_TASKS) -> list[SyntheticTask]:
    return [gen_from_spec(EVAL_SEED_BASE + i, spec) for i in range(n)]


def retrieval_accuracy(model: LinVT, tasks) -> float:
    hits = [retrieved(model.forward(t.stream, t.text_tokens), t) for t in tasks]
    return float(np.mean(hits))


def text_swap_accuracy(model: LinVT, tasks) -> float:
    """Fraction of tasks where renaming the class moves retrieval to that class's needle."""
    hits = []
    for t in tasks:
        other = t.with_class((t.class_id + 1) % len(t.needles))
        hits.append(retrieved(model.forward(other.stream, other.text_tokens), other))
    return float(np.mean(hits))


@dataclass
class Adam:
    """Adam with bias correction; the moment buffers are the optimizer state."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, weights: LinVTWeights, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            weights.set(name, weights[name].data - update)


def compute_grads(model: LinVT, task: SyntheticTask) -> tuple[float, dict]:
    with Tape() as tape:
        out = model.forward(task.stream, task.text_tokens)
        value = loss(out, task)
    if not math.isfinite(float(value.data)):
        return float(value.data), {}
    tape.backward(value)
    return float(value.data), {n: tape.grad(w) for n, w in model.weights.items()}


class TaskSource:
    """Training tasks for one run, optionally generated ahead on a worker thread."""

    def __init__(self, spec: TaskSpec, seed: int, steps: int, prefetch: int = 0):
        self.spec, self.seed, self.steps, self.prefetch = spec, seed, steps, prefetch

    def seed_for(self, step: int) -> int:
        return self.seed * TRAIN_STRIDE + step

    def __iter__(self) -> Iterator[SyntheticTask]:
        if self.prefetch <= 0:
            for step in range(self.steps):
                yield gen_from_spec(self.seed_for(step), self.spec)
            return
        q: queue.Queue = queue.Queue(maxsize=self.prefetch)

        def produce():
            for step in range(self.steps):
                q.put(gen_from_spec(self.seed_for(step), self.spec))

        threading.Thread(target=produce, daemon=True).start()
        for _ in range(self.steps):
            yield q.get()


@dataclass
class TrainResult:
    weights: LinVTWeights
    log: list
    opt: Adam


def train_loop(model: LinVT, steps: int, seed: int = 0, opt: Adam | None = None,
               spec: TaskSpec | None = None, eval_every: int = 100, n_eval: int = EVAL_TASKS,
               on_record: Callable[[dict], None] | None = None, prefetch: int = 0) -> TrainResult:
    """Train ``model.weights`` in place for ``steps`` single-task steps.

    One record per step: ``step``, ``loss`` (before that step's update) and
    ``eval_acc`` on held-out tasks every ``eval_every`` steps and after the
    last update (``None`` otherwise).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    spec = spec or TaskSpec(channels=model.cfg.channels)
    opt = opt or Adam()
    held_out = eval_tasks(spec, n_eval) if eval_every else []
    records = []
    for step, task in enumerate(TaskSource(spec, seed, steps, prefetch)):
        value, grads = compute_grads(model, task)
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        acc = None
        if eval_every and step % eval_every == 0:
            acc = retrieval_accuracy(model, held_out)
        opt.step(model.weights, grads)
        rec = {"step": step, "loss": value, "eval_acc": acc}
        records.append(rec)
        if on_record:
            on_record(rec)
    if eval_every:
        final = {"step": steps, "loss": None, "eval_acc": retrieval_accuracy(model, held_out)}
        records.append(final)
        if on_record:
            on_record(final)
    return TrainResult(model.weights, records, opt)
