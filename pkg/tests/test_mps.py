import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfmott import fock
from sfmott import mps as mpslib

from .conftest import as_mps, random_dense


@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 6), st.sampled_from([0.0, 1e-3, 0.3]))
@settings(max_examples=50, deadline=None)
def test_truncated_svd_rule(m, n, cap, thr):
    rng = np.random.default_rng(m * 100 + n)
    a = rng.normal(size=(m, n)) + 1j * rng.normal(size=(m, n))
    s_full = np.linalg.svd(a, compute_uv=False)
    u, s, vh, disc = mpslib.truncated_svd(a, cap, thr)
    keep = min(cap, int(np.count_nonzero(s_full >= thr * s_full[0])))
    assert len(s) == keep
    assert disc == pytest.approx(np.sum(s_full[keep:] ** 2) / np.sum(s_full**2), abs=1e-12)
    # kept spectrum rescaled to the original norm
    assert np.sum(s**2) == pytest.approx(np.sum(s_full**2), rel=1e-12)
    assert np.allclose(u.conj().T @ u, np.eye(keep), atol=1e-12)
    first = np.argmax(np.abs(u) > 1e-12 * np.abs(u).max(axis=0), axis=0)
    lead = u[first, np.arange(keep)]
    assert np.allclose(lead.imag, 0, atol=1e-12) and np.all(lead.real > 0)
    if keep == len(s_full):
        assert np.allclose((u * s) @ vh, a, atol=1e-10)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_dense_roundtrip(n):
    rng = np.random.default_rng(n)
    b = fock.FockBasis(n, n)
    psi = random_dense(b, rng)
    m = as_mps(psi)
    assert m.center == 0
    assert m.canonical_error() < 1e-12
    assert np.allclose(mpslib.to_dense(m, b).amplitudes, psi.amplitudes, atol=1e-12)


def test_overlap_and_cross_elements_match_dense():
    rng = np.random.default_rng(5)
    b = fock.FockBasis(4, 4)
    x, y = random_dense(b, rng), random_dense(b, rng)
    mx, my = as_mps(x), as_mps(y)
    assert mpslib.overlap(mx, my) == pytest.approx(np.vdot(x.amplitudes, y.amplitudes), abs=1e-12)
    diag = 0.5 * b.states * (b.states - 1)
    got = mpslib.cross_matrix_elements(mx, my, 0.5 * np.arange(5) * (np.arange(5) - 1))
    expected = [np.vdot(x.amplitudes, diag[:, i] * y.amplitudes) for i in range(4)]
    assert np.allclose(got, expected, atol=1e-12)
    for i in range(4):
        single = mpslib.cross_matrix_element(mx, my, i, np.diag(np.arange(5.0) ** 2))
        assert single == pytest.approx(np.vdot(x.amplitudes, b.states[:, i] ** 2 * y.amplitudes),
                                       abs=1e-12)


def test_move_center_preserves_state_and_gauge():
    rng = np.random.default_rng(2)
    b = fock.FockBasis(5, 5)
    psi = random_dense(b, rng)
    m = as_mps(psi)
    for site in (4, 1, 3, 0):
        m.move_center(site)
        assert m.center == site
        assert m.canonical_error() < 1e-12
        assert np.allclose(mpslib.to_dense(m, b).amplitudes, psi.amplitudes, atol=1e-12)


def test_two_site_gate_matches_dense_and_needs_center():
    rng = np.random.default_rng(7)
    b = fock.FockBasis(4, 4)
    psi = random_dense(b, rng)
    m = as_mps(psi)
    g = np.linalg.qr(rng.normal(size=(25, 25)) + 1j * rng.normal(size=(25, 25)))[0]
    with pytest.raises(mpslib.GaugeError):
        mpslib.apply_two_site_gate(m, 2, g)
    m.move_center(1)
    mpslib.apply_two_site_gate(m, 1, g, "right")
    full = mpslib.to_full_vector(as_mps(psi)).reshape(5, 25, 5)
    expected = np.einsum("ij,ajb->aib", g, full).ravel()
    assert np.allclose(mpslib.to_full_vector(m), expected, atol=1e-12)
    assert m.center == 2 and m.canonical_error() < 1e-12


def test_one_site_diagonal_off_center_unitary():
    m = mpslib.product_state([1, 2, 0, 1], 5)
    ph = np.exp(1j * np.arange(5.0))
    mpslib.apply_one_site_diagonal(m, 1, ph)
    assert mpslib.overlap(mpslib.product_state([1, 2, 0, 1], 5), m) == pytest.approx(np.exp(2j))


def test_local_expectations_product_state():
    m = mpslib.product_state([2, 0, 1, 1], 5)
    n = mpslib.local_expectations(m, np.diag(np.arange(5.0)))
    assert np.allclose(n, [2, 0, 1, 1])


def test_truncation_weight_accumulates():
    rng = np.random.default_rng(9)
    b = fock.FockBasis(5, 5)
    psi = random_dense(b, rng)
    m = as_mps(psi, max_bond=3)
    assert max(m.bond_dims) <= 3
    assert m.truncation_weight > 0
    assert m.norm() == pytest.approx(1.0, abs=1e-12)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    m = as_mps(random_dense(fock.FockBasis(3, 3), rng), max_bond=7)
    m.truncation_weight = 1.5e-9
    path = tmp_path / "state.npz"
    m.save(path)
    again = mpslib.Mps.load(path)
    assert again.max_bond == 7 and again.truncation_weight == 1.5e-9
    assert all(np.array_equal(a, b) for a, b in zip(m.tensors, again.tensors))


def test_load_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, version=np.array("other/9"))
    with pytest.raises(ValueError):
        mpslib.Mps.load(path)


def test_invalid_occupation_rejected():
    with pytest.raises(ValueError):
        mpslib.product_state([5, 0], 5)
