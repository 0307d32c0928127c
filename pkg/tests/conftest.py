import numpy as np
import pytest

from mclc_lab.prior import GmmPrior, circle_prior
from mclc_lab.schedule import make_linear_schedule


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or end-to-end test")


@pytest.fixture(scope="session")
def sched():
    return make_linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def circle2():
    return circle_prior(2)


@pytest.fixture(scope="session")
def aniso3():
    """Three-component, anisotropic mixture in d=4."""
    rng = np.random.default_rng(11)
    means = rng.normal(scale=2.0, size=(3, 4))
    covs = []
    for _ in range(3):
        a = rng.normal(size=(4, 4))
        covs.append(a @ a.T / 4 + 0.3 * np.eye(4))
    return GmmPrior(np.array([0.2, 0.3, 0.5]), means, np.array(covs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for r in RESULTS:
            terminalreporter.write_line(r.line())
