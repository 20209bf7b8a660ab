"""Finite-difference gradient checking and reconstruction checks."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

FD_STEP = 1e-5
# denominators below this are treated as this; keeps round-off in near-zero
# gradients from reading as large relative error
REL_FLOOR = 1e-5


def relative_error(a, b, floor: float = REL_FLOOR) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return g


def autodiff_grads(fn: Callable[..., Tensor], *arrays) -> tuple[float, list[np.ndarray]]:
    """Value and tape gradients of ``fn(*leaves)`` with respect to each leaf."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return float(out.data), [tape.grad(leaf) for leaf in leaves]


def check_function(fn: Callable[..., Tensor], *arrays, h: float = FD_STEP) -> float:
    """Worst relative error between autodiff and central differences over all inputs."""
    _, grads = autodiff_grads(fn, *arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f_i(x, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(x)
            return float(fn(*args).data)
        worst = max(worst, relative_error(grads[i], numeric_grad(f_i, a, h)))
    return worst


def directional_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
                      rng: np.random.Generator, h: float = FD_STEP) -> dict[str, float]:
    """Per-parameter relative error of ``<grad, d>`` against the central difference
    of the loss along a random unit direction ``d`` for that parameter."""
    leaves = {n: Tensor(a, requires_grad=True) for n, a in params.items()}
    with Tape() as tape:
        out = loss_fn(leaves)
    tape.backward(out)
    errors = {}
    for name, a in params.items():
        d = rng.standard_normal(a.shape)
        d /= np.linalg.norm(d) or 1.0
        analytic = float(np.sum(tape.grad(leaves[name]) * d))

        def at(sign):
            moved = {n: Tensor(b) for n, b in params.items()}
            moved[name] = Tensor(a + sign * h * d)
            return float(loss_fn(moved).data)

        numeric = (at(1) - at(-1)) / (2 * h)
        errors[name] = relative_error(analytic, numeric)
    return errors
