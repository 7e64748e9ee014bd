"""Shared fixtures and hypothesis settings."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from thinbingham.geometry import RoughProfile, build_cell_mesh

settings.register_profile("thinbingham", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("thinbingham")


@pytest.fixture(scope="session")
def flat():
    return RoughProfile.flat()


@pytest.fixture(scope="session")
def wavy():
    return RoughProfile.sinusoidal(0.25)


@pytest.fixture(scope="session")
def flat_cell(flat):
    return build_cell_mesh(flat, (3, 3, 4))


@pytest.fixture(scope="session")
def wavy_cell(wavy):
    return build_cell_mesh(wavy, (4, 4, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary ----------------------------------------------------------
# Each acceptance test records one line; the terminal summary prints them in order,
# and a test that errors before recording is listed as a failure.

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)
    return record


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    number = int(report.nodeid.split("test_criterion_")[1][:2])
    if report.failed and number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = (False, f"error: {report.longrepr.reprcrash.message if report.longrepr else ''}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def slit_oracle():
    """Brute-force convex minimisation of the 1D slit Bingham energy; returns the flux."""
    import cvxpy as cp

    def flux(H=1.0, mu=1.0, g=0.1, xi=1.0, n=400):
        h = H / n
        u = cp.Variable(n + 1)
        du = cp.diff(u) / h
        energy = h * (0.5 * mu * cp.sum_squares(du) + g * cp.norm1(du)) - xi * h * cp.sum(u)
        cp.Problem(cp.Minimize(energy), [u[0] == 0, u[n] == 0]).solve()
        return h * float(np.sum(u.value))
    return flux
