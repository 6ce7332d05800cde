import numpy as np
import pytest

from drasmil.model import ModelParams
from drasmil.slide import Bag, synthetic_dataset


def grid_bag(width, height, M=4, seed=0, label=0):
    rows, cols = np.divmod(np.arange(width * height), width)
    rng = np.random.default_rng(seed)
    return Bag(f"g{seed}", f"p{seed}", label, np.stack([cols, rows], 1),
               rng.normal(size=(width * height, M)))


def random_params(M, L, seed, hidden=None):
    """Parameters with nonzero biases, unlike ModelParams.init."""
    p = ModelParams.init(M=M, L=L, seed=seed, hidden=hidden)
    rng = np.random.default_rng(seed + 1000)
    layers = [(W, rng.normal(scale=0.3, size=b.shape)) for W, b in p.head_layers]
    return ModelParams(p.attn_V, p.attn_U, p.attn_w, layers)


@pytest.fixture
def small_model():
    return ModelParams.init(M=8, L=4, seed=3)


@pytest.fixture(scope="session")
def toy_bags():
    return synthetic_dataset(12, 2, seed=5, width=20, height=20, M=8, shift=3.0)


ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
