import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from sfmott import fock

from .conftest import random_dense


@given(st.integers(1, 5), st.integers(0, 6), st.integers(0, 4))
@settings(max_examples=60, deadline=None)
def test_basis_dimension_matches_brute_force(n_sites, n_particles, n_max):
    brute = sum(1 for occ in itertools.product(range(n_max + 1), repeat=n_sites)
                if sum(occ) == n_particles)
    assert fock.basis_dimension(n_sites, n_particles, n_max) == brute


def test_basis_dimension_unrestricted_is_stars_and_bars():
    assert fock.basis_dimension(20, 20) == 68_923_264_410
    assert fock.basis_dimension(4, 4) == 35


def test_basis_order_and_index():
    b = fock.FockBasis(3, 2)
    assert b.states[0].tolist() == [2, 0, 0]
    assert b.states[-1].tolist() == [0, 0, 2]
    for i, s in enumerate(b.states.tolist()):
        assert b.product_index(s) == i


def test_hamiltonian_hermitian_and_particle_conserving():
    b = fock.FockBasis(4, 4)
    h = fock.build_hamiltonian(b, 3.3).toarray()
    assert np.allclose(h, h.conj().T)
    assert h.shape == (35, 35)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_free_boson_ground_energy(n):
    # all particles in the lowest open-chain orbital, energy -2 cos(pi/(N+1)) each
    b = fock.FockBasis(n, n, n)
    e, _ = fock.ground_state(b, 0.0)
    assert e == pytest.approx(-2 * n * np.cos(np.pi / (n + 1)), abs=1e-10)


def test_two_site_two_particle_analytic():
    # |2,0>, |1,1>, |0,2> with hopping sqrt(2): E0 = (u - sqrt(u^2 + 16)) / 2
    b = fock.FockBasis(2, 2)
    for u in (0.5, 3.0, 20.0):
        e, _ = fock.ground_state(b, u)
        assert e == pytest.approx((u - np.sqrt(u**2 + 16)) / 2, abs=1e-12)


def test_deep_lattice_ground_state_is_mott():
    b = fock.FockBasis(4, 4)
    _, gs = fock.ground_state(b, 1e4)
    assert abs(gs.amplitudes[b.product_index([1, 1, 1, 1])]) ** 2 > 1 - 1e-6


def test_evolve_exact_matches_expm():
    rng = np.random.default_rng(3)
    b = fock.FockBasis(3, 3)
    psi = random_dense(b, rng)
    h = fock.build_hamiltonian(b, 2.7).toarray()
    out = fock.evolve_exact(psi, 2.7, 0.83)
    assert np.allclose(out.amplitudes, expm(-1j * 0.83 * h) @ psi.amplitudes, atol=1e-12)


def test_dense_st_unitary_and_adjoint():
    b = fock.FockBasis(4, 4)
    prop = fock.DenseST(b, 0.05, split=True)
    op = prop.operator(2.0, 5.0)
    assert np.allclose(op.conj().T @ op, np.eye(b.dim), atol=1e-12)
    rng = np.random.default_rng(0)
    psi = random_dense(b, rng).amplitudes
    assert np.allclose(prop.step_adjoint(prop.step(psi, 2.0, 5.0), 2.0, 5.0), psi, atol=1e-12)


def test_unsplit_st_exact_for_constant_control():
    # with exact drift and constant u the symmetric split is second order; halving dt
    # reduces the one-unit-time error by about four
    b = fock.FockBasis(3, 3)
    rng = np.random.default_rng(1)
    psi = random_dense(b, rng)
    exact = fock.evolve_exact(psi, 4.0, 1.0).amplitudes

    class Grid:
        def __init__(self, dt):
            self.dt, self.values = dt, np.full(int(round(1 / dt)) + 1, 4.0)

    errs = [np.linalg.norm(fock.evolve_trotter_dense(psi, Grid(dt)).amplitudes - exact)
            for dt in (0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_finite_difference_gradient_of_quadratic():
    class Grid:
        dt, values = 1.0, np.array([1.0, -2.0, 0.5])

    g = fock.finite_difference_gradient(lambda x: float(np.sum(x**3)), Grid, step=1e-4)
    assert np.allclose(g, 3 * Grid.values**2, atol=1e-7)
    with pytest.raises(ValueError):
        fock.finite_difference_gradient(lambda x: 0.0, Grid, step=1e-2)


def test_finite_difference_reports_non_finite_index():
    class Grid:
        dt, values = 1.0, np.array([1.0, 2.0])

    def cost(x):
        return np.inf if x[1] > 2.0 else 0.0

    with pytest.raises(FloatingPointError, match="1"):
        fock.finite_difference_gradient(cost, Grid)


def test_mott_state_requires_unit_filling():
    with pytest.raises(ValueError):
        fock.mott_state(fock.FockBasis(3, 2))
    m = fock.mott_state(fock.FockBasis(3, 3))
    assert m.norm() == pytest.approx(1.0)
