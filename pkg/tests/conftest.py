import sys

import numpy as np
import pytest

from relaxed_fbsde.builtins import builtin
from relaxed_fbsde.problem import ActionGrid, DimensionSignature, FbsdeProblem, TimeGrid


def _zeros(*trail):
    def fn(*args):
        x = args[1] if len(args) > 1 and isinstance(args[1], np.ndarray) else args[0]
        return np.zeros((x.shape[0],) + trail)
    return fn


def scalar_problem(x0=0.0, **overrides) -> FbsdeProblem:
    """Scalar problem (n = m = d = k = 1) whose callbacks default to zero."""
    base = dict(
        b=_zeros(1), sigma=_zeros(1, 1), f=_zeros(1), phi=lambda x: np.zeros((x.shape[0], 1)),
        g=lambda x: np.zeros(x.shape[0]), h=lambda y: np.zeros(y.shape[0]), l=_zeros(),
        b_x=_zeros(1, 1), sigma_x=_zeros(1, 1, 1), f_x=_zeros(1, 1), f_y=_zeros(1, 1), f_z=_zeros(1, 1, 1),
        phi_x=lambda x: np.zeros((x.shape[0], 1, 1)), g_x=lambda x: np.zeros_like(x), h_y=lambda y: np.zeros_like(y),
        l_x=_zeros(1), l_y=_zeros(1), l_z=_zeros(1, 1),
    )
    base.update(overrides)
    return FbsdeProblem(dims=DimensionSignature(1, 1, 1, 1), x0=np.array([x0]), **base)


@pytest.fixture
def make_problem():
    return scalar_problem


@pytest.fixture(scope="session")
def lq():
    return builtin("lq")


@pytest.fixture
def two_point():
    return ActionGrid(np.array([[0.0], [1.0]]), 0.0, 1.0)


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 10)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full-scale acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
