import numpy as np
import pytest

from morphopc.tensor import Parameter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tie_free(rng, shape, spread=1.0):
    """Random doubles with distinct values, so max/min have unique argmax."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) / n * spread
    return vals.reshape(shape) + rng.uniform(0, 0.1 / n, n).reshape(shape)


def param(a, name="p"):
    return Parameter(np.asarray(a, dtype=np.float64), name)


def as64(module):
    module.astype(np.float64)
    return module


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
