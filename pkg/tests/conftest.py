import numpy as np
import pytest

from graphmfg import cycle_graph, make_game
from graphmfg.solver import picard_solve

BASELINE_MU = np.array([0.4, 0.3, 0.2, 0.1])


@pytest.fixture(scope="session")
def c4():
    return cycle_graph(4)


@pytest.fixture(scope="session")
def baseline_spec(c4):
    """C4, unit weights, quadratic family, cF = cT = 1, T = 1."""
    return make_game(c4, family="quadratic", c_f=1.0, c_t=1.0, horizon=1.0)


@pytest.fixture(scope="session")
def baseline_mu():
    return BASELINE_MU.copy()


@pytest.fixture(scope="session")
def baseline_solution(baseline_spec):
    """Converged baseline solve shared by read-only tests."""
    return picard_solve(baseline_spec, 0.0, BASELINE_MU, n_steps=512, tol=1e-10)
