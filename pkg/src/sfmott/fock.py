"""Exact-diagonalization oracle in the occupation-number basis.

Everything here works on full state vectors and is meant for desk-scale
systems (a few sites). It provides the reference the MPS engine is checked
against: Hamiltonians, ground states, exact propagation, a dense version of
the split-operator (ST) time step, its exact gradient, and central finite
differences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, expm
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, expm_multiply

DEFAULT_LOCAL_DIM = 5
EIG_PROPAGATION_LIMIT = 4000
DENSE_LIMIT = 1_000_000


def basis_dimension(n_sites: int, n_particles: int, max_occupation: int | None = None) -> int:
    """Number of occupation vectors with ``sum == n_particles`` and entries ``<= max_occupation``.

    Uses the stars-and-bars formula when the cap is inactive and
    inclusion-exclusion otherwise. Python integers do not overflow, so the
    count is always exact.
    """
    if n_sites < 1 or n_particles < 0:
        raise ValueError("need n_sites >= 1 and n_particles >= 0")
    if max_occupation is None or max_occupation >= n_particles:
        return math.comb(n_sites + n_particles - 1, n_particles)
    if max_occupation < 0:
        raise ValueError("max_occupation must be >= 0")
    c = max_occupation + 1
    total = 0
    for j in range(n_sites + 1):
        rest = n_particles - j * c
        if rest < 0:
            break
        total += (-1) ** j * math.comb(n_sites, j) * math.comb(rest + n_sites - 1, n_sites - 1)
    return total


class FockBasis:
    """Fixed-particle-number occupation basis, ordered lexicographically descending."""

    def __init__(self, n_sites: int, n_particles: int, max_occupation: int | None = None):
        if max_occupation is None:
            max_occupation = min(n_particles, DEFAULT_LOCAL_DIM - 1)
        dim = basis_dimension(n_sites, n_particles, max_occupation)
        if dim > DENSE_LIMIT:
            raise MemoryError(
                f"basis dimension {dim} exceeds the dense limit {DENSE_LIMIT}; "
                "use basis_dimension() for counting only")
        self.n_sites = n_sites
        self.n_particles = n_particles
        self.max_occupation = max_occupation
        self.states = np.array(list(self._enumerate(n_sites, n_particles, max_occupation)),
                               dtype=np.int64).reshape(-1, n_sites)
        self.index = {tuple(s): i for i, s in enumerate(self.states.tolist())}

    @staticmethod
    def _enumerate(n_sites, n_particles, n_max):
        if n_sites == 1:
            if n_particles <= n_max:
                yield (n_particles,)
            return
        for first in range(min(n_particles, n_max), -1, -1):
            for rest in FockBasis._enumerate(n_sites - 1, n_particles - first, n_max):
                yield (first,) + rest

    @property
    def dim(self) -> int:
        return len(self.states)

    @property
    def local_dim(self) -> int:
        return self.max_occupation + 1

    def __len__(self):
        return self.dim

    def __repr__(self):
        return f"FockBasis(n_sites={self.n_sites}, n_particles={self.n_particles}, " \
               f"max_occupation={self.max_occupation}, dim={self.dim})"

    def product_index(self, occupations) -> int:
        return self.index[tuple(int(n) for n in occupations)]

    def flat_indices(self, local_dim: int) -> np.ndarray:
        """Row-major positions of the basis states inside the full ``local_dim**n_sites`` tensor."""
        weights = local_dim ** np.arange(self.n_sites - 1, -1, -1)
        return self.states @ weights


@dataclass
class DenseState:
    basis: FockBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.basis.dim,):
            raise ValueError("amplitude vector does not match the basis")

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def copy(self) -> "DenseState":
        return DenseState(self.basis, self.amplitudes.copy())

    def to_text(self) -> str:
        lines = ["# index, occupations, real, imag"]
        for i, (occ, a) in enumerate(zip(self.basis.states, self.amplitudes)):
            lines.append(f"{i}, {' '.join(map(str, occ))}, {a.real:.16e}, {a.imag:.16e}")
        return "\n".join(lines) + "\n"


def fock_state(basis: FockBasis, occupations) -> DenseState:
    amp = np.zeros(basis.dim, dtype=complex)
    amp[basis.product_index(occupations)] = 1.0
    return DenseState(basis, amp)


def mott_state(basis: FockBasis) -> DenseState:
    if basis.n_particles != basis.n_sites:
        raise ValueError("the unit-filling Mott state needs n_particles == n_sites")
    return fock_state(basis, [1] * basis.n_sites)


# ---------------------------------------------------------------------------
# Hamiltonian pieces
# ---------------------------------------------------------------------------

def interaction_diagonal(basis: FockBasis) -> np.ndarray:
    """Diagonal of dH^c/du = (1/2) sum_i n_i (n_i - 1)."""
    n = basis.states
    return 0.5 * np.sum(n * (n - 1), axis=1).astype(float)


def hopping_matrix(basis: FockBasis, bonds=None) -> sp.csr_matrix:
    """Sum over ``bonds`` of ``-(a_{i+1}^dag a_i + h.c.)``; all bonds by default.

    Bond ``b`` couples sites ``b`` and ``b + 1`` (0-based).
    """
    if bonds is None:
        bonds = range(basis.n_sites - 1)
    rows, cols, vals = [], [], []
    nmax = basis.max_occupation
    for col, occ in enumerate(basis.states):
        for b in bonds:
            for src, dst in ((b, b + 1), (b + 1, b)):
                if occ[src] == 0 or occ[dst] == nmax:
                    continue
                new = occ.copy()
                amp = math.sqrt(occ[src] * (occ[dst] + 1))
                new[src] -= 1
                new[dst] += 1
                rows.append(basis.index[tuple(new.tolist())])
                cols.append(col)
                vals.append(-amp)
    return sp.csr_matrix((vals, (rows, cols)), shape=(basis.dim, basis.dim))


def build_hamiltonian(basis: FockBasis, u: float) -> sp.csr_matrix:
    """``H(u) = H^d + u * (1/2) sum_i n_i (n_i - 1)`` in units of J_x."""
    if not np.isfinite(u):
        raise ValueError("control value must be finite")
    return (hopping_matrix(basis) + sp.diags(u * interaction_diagonal(basis))).tocsr()


def _fix_phase(v: np.ndarray) -> np.ndarray:
    k = np.argmax(np.abs(v))
    return v * (abs(v[k]) / v[k])


def ground_state(basis: FockBasis, u: float) -> tuple[float, DenseState]:
    """Lowest eigenpair, phase-fixed so the largest amplitude is real positive."""
    H = build_hamiltonian(basis, u)
    if basis.dim <= 2000:
        w, v = eigh(H.toarray(), subset_by_index=(0, 0))
        e, vec = w[0], v[:, 0]
    else:
        try:
            w, v = eigsh(H, k=1, which="SA", tol=1e-12)
        except ArpackNoConvergence as exc:
            raise RuntimeError(f"eigensolver did not converge for u={u}") from exc
        e, vec = w[0], v[:, 0]
    vec = _fix_phase(vec.astype(complex))
    return float(e), DenseState(basis, vec / np.linalg.norm(vec))


def evolve_exact(state: DenseState, u: float, duration: float) -> DenseState:
    """``exp(-i H(u) duration) |state>`` at fixed control."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if duration == 0:
        return state.copy()
    H = build_hamiltonian(state.basis, u)
    if state.basis.dim <= EIG_PROPAGATION_LIMIT:
        w, v = _eig_cache(state.basis, u, H)
        amp = v @ (np.exp(-1j * w * duration) * (v.conj().T @ state.amplitudes))
    else:
        amp = expm_multiply(-1j * duration * H.astype(complex), state.amplitudes)
    return DenseState(state.basis, amp)


_EIG_MEMO: dict = {}


def _eig_cache(basis, u, H):
    key = (basis.n_sites, basis.n_particles, basis.max_occupation, float(u))
    if key not in _EIG_MEMO:
        if len(_EIG_MEMO) > 64:
            _EIG_MEMO.clear()
        _EIG_MEMO[key] = np.linalg.eigh(H.toarray())
    return _EIG_MEMO[key]


def evolve_piecewise_linear(state: DenseState, times, values, substeps: int = 200) -> DenseState:
    """High-accuracy propagation under a control linearly interpolated between samples.

    Each interval is cut into ``substeps`` midpoint exponentials (second order),
    so the result serves as the time-continuous reference for Trotter scans.
    """
    basis = state.basis
    hop = hopping_matrix(basis).toarray()
    diag = interaction_diagonal(basis)
    psi = state.amplitudes.copy()
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    for j in range(len(times) - 1):
        h = (times[j + 1] - times[j]) / substeps
        for s in range(substeps):
            frac = (s + 0.5) / substeps
            u = values[j] + frac * (values[j + 1] - values[j])
            w, v = np.linalg.eigh(hop + np.diag(u * diag))
            psi = v @ (np.exp(-1j * w * h) * (v.conj().T @ psi))
    return DenseState(basis, psi)


# ---------------------------------------------------------------------------
# Dense split-operator propagation and its exact gradient
# ---------------------------------------------------------------------------

@dataclass
class DenseST:
    """Dense realization of the ST step ``U_n = C_{n+1}^{1/2} U^d C_n^{1/2}``.

    ``split=False`` uses the exact drift exponential; ``split=True`` uses the
    even/odd bond factorization ``exp(-i H_even dt) exp(-i H_odd dt)`` that
    the MPS sweeps implement (odd bonds are 1-based, i.e. 0-based even).
    """

    basis: FockBasis
    dt: complex
    split: bool = False
    drift: np.ndarray = field(init=False, repr=False)
    diag: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.basis.n_sites
        if self.split:
            odd = hopping_matrix(self.basis, range(0, n - 1, 2)).toarray()
            even = hopping_matrix(self.basis, range(1, n - 1, 2)).toarray()
            self.drift = expm(-1j * self.dt * even) @ expm(-1j * self.dt * odd)
        else:
            self.drift = expm(-1j * self.dt * hopping_matrix(self.basis).toarray())
        self.diag = interaction_diagonal(self.basis)

    def half_control(self, u: float) -> np.ndarray:
        return np.exp(-0.5j * self.dt * u * self.diag)

    def step(self, psi: np.ndarray, u_n: float, u_np1: float) -> np.ndarray:
        return self.half_control(u_np1) * (self.drift @ (self.half_control(u_n) * psi))

    def step_adjoint(self, psi: np.ndarray, u_n: float, u_np1: float) -> np.ndarray:
        return self.half_control(u_n).conj() * (
            self.drift.conj().T @ (self.half_control(u_np1).conj() * psi))

    def operator(self, u_n: float, u_np1: float) -> np.ndarray:
        return self.half_control(u_np1)[:, None] * self.drift * self.half_control(u_n)[None, :]


def evolve_trotter_dense(state: DenseState, controls, split: bool = False,
                         propagator: DenseST | None = None) -> DenseState:
    """Apply ``n_t - 1`` dense ST steps for a control grid (``dt``, ``values``)."""
    prop = propagator or DenseST(state.basis, controls.dt, split)
    u = np.asarray(controls.values, float)
    psi = state.amplitudes.copy()
    for n in range(len(u) - 1):
        psi = prop.step(psi, u[n], u[n + 1])
    return DenseState(state.basis, psi)


def dense_fidelity_gradient(initial: DenseState, target: DenseState, controls,
                            split: bool = True, propagator: DenseST | None = None):
    """Fidelity cost ``(1 - F)/2`` and its exact gradient under dense ST dynamics.

    Returns ``(cost, fidelity, gradient, overlap)``; gradient entries at the
    two end points carry the extra factor 1/2.
    """
    prop = propagator or DenseST(initial.basis, controls.dt, split)
    u = np.asarray(controls.values, float)
    nt = len(u)
    dt = float(np.real(controls.dt))
    psis = [initial.amplitudes.copy()]
    for n in range(nt - 1):
        psis.append(prop.step(psis[-1], u[n], u[n + 1]))
    chi = target.amplitudes.copy()
    overlap = np.vdot(chi, psis[-1])
    grad = np.empty(nt)
    for n in range(nt - 1, -1, -1):
        m = np.vdot(chi, prop.diag * psis[n])
        grad[n] = np.real(1j * np.conj(overlap) * m) * dt
        if n > 0:
            chi = prop.step_adjoint(chi, u[n - 1], u[n])
    grad[0] *= 0.5
    grad[-1] *= 0.5
    fid = float(abs(overlap) ** 2)
    return 0.5 * (1 - fid), fid, grad, overlap


def finite_difference_gradient(problem: Callable[[np.ndarray], float], controls,
                               step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of a scalar cost over the control values.

    ``problem`` maps a control-value array to the total cost.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ValueError("probe step must lie in [1e-7, 1e-3]")
    u0 = np.array(controls.values, dtype=float)
    idx = range(len(u0)) if indices is None else indices
    grad = np.zeros(len(u0))
    for n in idx:
        up = u0.copy()
        dn = u0.copy()
        up[n] += step
        dn[n] -= step
        fp, fm = problem(up), problem(dn)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite cost while probing control index {n}")
        grad[n] = (fp - fm) / (2 * step)
    return grad


def symbolic_hop_apply(occupations, site: int, local_cap: int) -> dict:
    """Apply ``-(a_{i+1}^dag a_i + a_i^dag a_{i+1})`` to a Fock state by ladder algebra.

    Independent of :func:`hopping_matrix`; used for spot checks.
    """
    out = {}
    occ = list(occupations)
    for src, dst in ((site, site + 1), (site + 1, site)):
        if occ[src] == 0 or occ[dst] + 1 > local_cap:
            continue
        amp = math.sqrt(occ[src])  # a |n> = sqrt(n) |n-1>
        new = occ.copy()
        new[src] -= 1
        amp *= math.sqrt(new[dst] + 1)  # a^dag |n> = sqrt(n+1) |n+1>
        new[dst] += 1
        out[tuple(new)] = out.get(tuple(new), 0.0) - amp
    return out


def all_occupations(n_sites: int, local_dim: int):
    """Every occupation vector of the full tensor space (no number constraint)."""
    return itertools.product(range(local_dim), repeat=n_sites)
