import numpy as np
import pytest

from fisherdet import nn
from fisherdet.selfcheck import fixtures, tiny_cnn

# hand-picked 2-3-2 MLP used by several frozen-value tests
W1 = [[0.5, -0.3, 0.8], [0.1, 0.7, -0.6]]
B1 = [0.05, -0.1, 0.2]
W2 = [[0.4, -0.9], [-0.2, 0.6], [1.1, 0.3]]
B2 = [0.0, 0.1]


def fixed_mlp():
    net = nn.mlp([2, 3, 2])
    params = np.concatenate([np.ravel(W1), B1, np.ravel(W2), B2])
    return net.with_params(params)


@pytest.fixture
def mlp232():
    return fixed_mlp()


@pytest.fixture(scope="session")
def tiny_nets():
    return fixtures(10)


@pytest.fixture(scope="session")
def small_cnn():
    return tiny_cnn(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
