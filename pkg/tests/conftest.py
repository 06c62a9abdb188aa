import numpy as np
import pytest

from kyle_feedback.equilibrium import solve_pontryagin
from kyle_feedback.model import CovMatrix, ModelParams

_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    if not item.name.startswith("test_ac") or "test_acceptance" not in item.nodeid:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        detail = dict(item.user_properties).get("detail", "")
        _ACCEPTANCE[item.name] = (call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[name]
        label = name[len("test_"):]
        line = f"{'PASS' if ok else 'FAIL'}  {label}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def classical_params():
    return ModelParams()


@pytest.fixture(scope="session")
def classical_solution(classical_params):
    return solve_pontryagin(classical_params, tol=1e-10, n_steps=1000)


@pytest.fixture(scope="session")
def correlated_params():
    return ModelParams(sigma_m=0.2, sigma_c=0.1, gamma_F=0.1, kappa_m=0.2, kappa_c=0.1)


@pytest.fixture(scope="session")
def correlated_sigma0():
    return CovMatrix.from_array([1.0, 0.2, 0.0, 0.1, 0.0, 0.1])


def random_psd(rng, scale=1.0):
    a = rng.standard_normal((3, 3))
    return CovMatrix.from_matrix(scale * a @ a.T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
