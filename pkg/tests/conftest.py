import numpy as np
import pytest

from linvt.model import Config, build
from linvt.svr import FrameTokenStream


def random_stream(rng, t, n, c, scale=1.0):
    return FrameTokenStream.from_array(rng.standard_normal((t, n, c)) * scale)


def scaled_weights(model, rng, std):
    """Re-draw every projection with a larger std so attention is far from uniform."""
    for name, t in list(model.weights.items()):
        if name.split(".")[-1].startswith("w") or ".queries." in name:
            model.weights.set(name, rng.normal(0.0, std, t.shape))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return Config(channels=8, k=12, scales=((1, 1), (3, 2), (6, 3)), queries=(3, 2, 1), depth=1, heads=2)


@pytest.fixture
def desk_model():
    return build(Config.desk())


# -- shared training runs --------------------------------------------------------

EFFICACY_SEEDS = range(5)
EFFICACY_STEPS = 2000
_runs: dict = {}


def trained_run(seed: int, variant: str = "MultiC", steps: int = EFFICACY_STEPS) -> dict:
    """One desk-scale training run, computed once per session."""
    from linvt import train

    key = (seed, variant, steps)
    if key not in _runs:
        import time

        t0 = time.perf_counter()
        model = build(Config.desk(seed=seed).matched(variant))
        held_out = train.eval_tasks(train.TaskSpec())
        untrained = train.retrieval_accuracy(model, held_out)
        result = train.train_loop(model, steps, seed=seed, eval_every=0)
        _runs[key] = {
            "untrained": untrained,
            "trained": train.retrieval_accuracy(model, held_out),
            "swap": train.text_swap_accuracy(model, held_out),
            "log": result.log,
            "seconds": time.perf_counter() - t0,
        }
    return _runs[key]


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
