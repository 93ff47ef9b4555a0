import numpy as np
import pytest

from sfmott import fock, lattice
from sfmott import mps as mpslib

U_SF = 1.9456288892160638  # U/J_x at 3 E_R for the default lattice
U_MOTT = 35.749748746482055  # U/J_x at 13 E_R
U_BOUNDS = (1.32, 40.18)


@pytest.fixture(scope="session")
def table():
    return lattice.build_table()


@pytest.fixture(scope="session")
def dense_pair4():
    """Dense ground states (superfluid side, Mott side) for 4 sites at unit filling."""
    basis = fock.FockBasis(4, 4)
    return fock.ground_state(basis, U_SF)[1], fock.ground_state(basis, U_MOTT)[1]


def dense_pair(n):
    basis = fock.FockBasis(n, n)
    return fock.ground_state(basis, U_SF)[1], fock.ground_state(basis, U_MOTT)[1]


def random_dense(basis, rng):
    v = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    return fock.DenseState(basis, v / np.linalg.norm(v))


def as_mps(state, **kw):
    return mpslib.from_dense(state, state.basis.local_dim, **kw)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion, at the end of the run."""
    import sys

    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
