import numpy as np
import pytest

from mipdeco import fem
from mipdeco.model import MipdecoProblem


@pytest.fixture(scope="session")
def poisson_small():
    return fem.assemble_poisson(fem.build_mesh(2.0**-3), fem.GaussianSourceGrid(3))


@pytest.fixture(scope="session")
def poisson16():
    return fem.assemble_poisson(fem.build_mesh(2.0**-4), fem.GaussianSourceGrid(4))


@pytest.fixture(scope="session")
def nonlinear_small():
    return fem.assemble_nonlinear_poisson(fem.build_mesh(2.0**-3), fem.GaussianSourceGrid(3))


@pytest.fixture(scope="session")
def convdiff_small():
    return fem.assemble_convection_diffusion(fem.build_mesh(2.0**-3), fem.PatchGrid(4))


def exact_problem(system, on, S=None):
    u = np.zeros(system.n_controls)
    u[list(on)] = 1.0
    S = len(on) if S is None else S
    return MipdecoProblem(system, fem.solve_state(system, u), S), u


@pytest.fixture
def make_exact_problem():
    return exact_problem


# one summary line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
