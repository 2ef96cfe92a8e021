import numpy as np
import pytest

from msurv.measure import ModelParams
from msurv.statespace import Partition, build_graph, validate


@pytest.fixture
def survival():
    return validate(build_graph("survival"))


@pytest.fixture
def harmonic(survival):
    # nu = 1, rho = 1, gamma = 1: the self-similar harmonic survival process
    return ModelParams.create(survival, nu=1.0, rho=1.0)


@pytest.fixture(scope="session")
def study_structure():
    return validate(build_graph("bidirectional_illness_death"), Partition(((1, 2), (3,))))


@pytest.fixture(scope="session")
def study_params(study_structure):
    return ModelParams.create(study_structure, nu={(1, 1): 0.5, (1, 2): 0.2},
                              gamma={(2, 1): 0.7, (2, 2): 1.71})


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
