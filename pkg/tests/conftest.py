import numpy as np
import pytest

from facegen import nn
from facegen.data import default_schema


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def schema():
    return default_schema()


def tiny_spec(trunk, input_shape=(2, 6, 6), heads=((3,), (2,))):
    return nn.NetworkSpec(input_shape, tuple(trunk), tuple(nn.Head(f"g{i}", k) for i, (k,) in enumerate(heads)))


@pytest.fixture
def small_net():
    """Every layer type, small enough for exhaustive checks."""
    spec = tiny_spec([
        nn.Conv(3, 3, 1, 1), nn.ReLU(), nn.MaxPool(2, 2),
        nn.Conv(4, 2, 1, 0), nn.ReLU(), nn.Flatten(),
        nn.Dense(5), nn.ReLU(), nn.Dropout(0.3), nn.Dense(4),
    ], input_shape=(2, 8, 8))
    return spec, nn.init_params(spec, seed=7)


# acceptance results, printed once at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(key: str, line: str) -> None:
    ACCEPTANCE_LINES[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
