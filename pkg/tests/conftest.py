import numpy as np
import pytest

from qsdiff.model import brownian_model, logistic_feller_model, polynomial_drift_model
from qsdiff.spectral import build_grid, build_spectral_data, discretize_generator

ACCEPTANCE_RESULTS: dict = {}


class Spectral:
    def __init__(self, model, eps, R, N, spacing="log", right="neumann"):
        self.model = model
        self.grid = build_grid(model, eps, R, N, spacing)
        self.gen = discretize_generator(model, self.grid, right=right)
        self.spec = build_spectral_data(model, self.grid, self.gen)


@pytest.fixture(scope="session")
def logistic():
    return logistic_feller_model(1.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def cubic():
    return polynomial_drift_model([(3, 1.0)], name="cubic")


@pytest.fixture(scope="session")
def brownian():
    return brownian_model()


@pytest.fixture(scope="session")
def lf2000(logistic):
    return Spectral(logistic, 1e-3, 6.0, 2000)


@pytest.fixture(scope="session")
def lf400(logistic):
    return Spectral(logistic, 1e-3, 6.0, 400)


@pytest.fixture(scope="session")
def cubic1500(cubic):
    return Spectral(cubic, 1e-3, 4.0, 1500)


def node_near(grid, x):
    return float(grid.points[int(np.argmin(np.abs(grid.points - x)))])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
