import numpy as np
import pytest

from ctribim.kernels import KernelParams
from ctribim.weights import build_table


@pytest.fixture(scope="session")
def small_table():
    """Weight table with 8 modes on a 9 x 9 shift grid (builds in seconds)."""
    return build_table(N=8, P=9, tol=1e-8)


@pytest.fixture(scope="session")
def tiny_table():
    """Coarse table used where only the plumbing matters."""
    return build_table(N=4, P=5, tol=1e-6)


@pytest.fixture
def params():
    return KernelParams(eps_i=1.0, eps_e=80.0, kappa=0.125)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def emit(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
