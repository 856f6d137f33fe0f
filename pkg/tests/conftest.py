import numpy as np
import pytest

from rankshield.model import Activation, DenseNet, linear_model, quadratic_test_model


def random_softplus_net(seed, n=None, hidden=None, rho=5.0, head="softmax", depth=1):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9)) if n is None else n
    h = int(rng.integers(3, 9)) if hidden is None else hidden
    dims = (n,) + (h,) * depth + (2,)
    return DenseNet.initialize(dims, Activation("softplus", rho), seed=seed, head=head)


@pytest.fixture
def quad():
    return quadratic_test_model()


@pytest.fixture
def x11():
    return np.array([1.0, 1.0])


@pytest.fixture
def lin3():
    return linear_model(np.array([3.0, 2.0, 1.0]), -4.0)


@pytest.fixture
def small_net():
    return random_softplus_net(7, n=5, hidden=6)


# criterion number -> PASS/FAIL line, filled by the acceptance module
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for num in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[num])
