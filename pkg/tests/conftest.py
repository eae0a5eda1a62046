import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tensormix.model import Dataset, MixtureParams
from tensormix.tensor_core import Shape

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def random_theta(rng, p, dims, R, scale=1.0, intercept=False):
    delta = rng.dirichlet(np.ones(R))
    coef = rng.normal(0.0, scale, size=(p, R, sum(dims)))
    return MixtureParams(delta, coef, Shape(tuple(dims)), intercept)


def random_data(rng, theta, n, intercept=False):
    """Draw (X, Y) from ``theta`` with standard normal predictors."""
    from tensormix.simgen import gen_responses

    X = rng.normal(size=(n, theta.p))
    if intercept:
        X[:, 0] = 1.0
    Y = gen_responses(theta, X, rng)
    return Dataset(X, Y, theta.shape, intercept)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
