"""Figures of merit: fidelity, density of defects, rescaled variance, phase imprint."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fock
from . import mps as mpslib
from .fock import DenseState
from .mps import Mps

FIDELITY_TOL = 1e-12


def overlap(a, b) -> complex:
    """``<a|b>`` for two states of the same kind."""
    if isinstance(a, Mps) and isinstance(b, Mps):
        if a.n_sites != b.n_sites or a.local_dim != b.local_dim:
            raise ValueError("MPS shapes differ")
        return complex(mpslib.overlap(a, b))
    if isinstance(a, DenseState) and isinstance(b, DenseState):
        if a.amplitudes.shape != b.amplitudes.shape:
            raise ValueError("dense state shapes differ")
        return complex(np.vdot(a.amplitudes, b.amplitudes))
    raise TypeError("states must both be Mps or both DenseState")


def fidelity(state, target) -> float:
    """``|<target|state>|^2``, clipped to [0, 1] against roundoff.

    Raises
    ------
    ValueError
        If the value lies more than 1e-12 outside [0, 1]; that means an
        unnormalized or corrupted state rather than roundoff.
    """
    f = abs(overlap(target, state)) ** 2
    if f > 1 + FIDELITY_TOL or f < -FIDELITY_TOL:
        raise ValueError(f"fidelity {f!r} outside [0, 1]")
    return float(min(max(f, 0.0), 1.0))


def occupations(state) -> tuple[np.ndarray, np.ndarray]:
    """Per-site ``<n_i>`` and variance ``<n_i^2> - <n_i>^2``."""
    if isinstance(state, Mps):
        d = state.local_dim
        n = np.arange(d, dtype=float)
        psi = state.copy()
        norm2 = psi.norm() ** 2
        mean = mpslib.local_expectations(psi, np.diag(n)).real / norm2
        sq = mpslib.local_expectations(psi, np.diag(n**2)).real / norm2
    elif isinstance(state, DenseState):
        occ = np.asarray(state.basis.states, dtype=float)
        p = np.abs(state.amplitudes) ** 2
        p = p / p.sum()
        mean = p @ occ
        sq = p @ occ**2
    else:
        raise TypeError("expected Mps or DenseState")
    return mean, np.maximum(sq - mean**2, 0.0)


def density_of_defects(state) -> float:
    """``rho = (1/N_s) sum_i |<n_i> - 1|`` for unit filling."""
    mean, _ = occupations(state)
    return float(np.mean(np.abs(mean - 1.0)))


def rescaled_variance(state, reference_variances) -> float:
    """``eta = (1/N_s) sum_i var_i / var_i(0)``."""
    ref = np.asarray(reference_variances, float)
    if np.any(ref <= 0):
        raise ValueError("reference variances must be positive (degenerate initial state)")
    _, var = occupations(state)
    if var.shape != ref.shape:
        raise ValueError("reference variances do not match the number of sites")
    return float(np.mean(var / ref))


@dataclass
class MeritSeries:
    times: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    occupations: list = field(default_factory=list)
    variances: list = field(default_factory=list)
    reference_variances: np.ndarray | None = None

    def append(self, t: float, state, target) -> None:
        mean, var = occupations(state)
        if self.reference_variances is None:
            self.reference_variances = var.copy()
        self.times.append(float(t))
        self.fidelity.append(fidelity(state, target))
        self.rho.append(float(np.mean(np.abs(mean - 1.0))))
        self.eta.append(rescaled_variance(state, self.reference_variances))
        self.occupations.append(mean)
        self.variances.append(var)

    @classmethod
    def from_states(cls, times, states, target) -> "MeritSeries":
        series = cls()
        for t, s in zip(times, states):
            series.append(t, s, target)
        return series

    def to_csv(self, path, occupation_path=None) -> None:
        """Write ``t,F,rho,eta``; optionally a ``t,n_0..n_{N-1}`` occupation matrix."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "F", "rho", "eta"])
            for row in zip(self.times, self.fidelity, self.rho, self.eta):
                w.writerow([f"{v:.12g}" for v in row])
        if occupation_path is not None:
            n_sites = len(self.occupations[0]) if self.occupations else 0
            with open(occupation_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"n_{i}" for i in range(n_sites)])
                for t, occ in zip(self.times, self.occupations):
                    w.writerow([f"{t:.12g}"] + [f"{v:.12g}" for v in occ])


@dataclass
class PhaseImprint:
    """Comparison of one ST step on a Fock product state with the pure-phase prediction.

    ``deviation`` is ``|<n|U|n> - exp(-i u dt/2 sum n_i(n_i-1))|`` per step
    on the input component (maximum over steps); ``phase_error`` the
    corresponding angle; ``leakage`` the largest amplitude the step moves
    into any other Fock component.
    """

    deviation: float
    phase_error: float
    leakage: float


def phase_imprint_check(occupations_in, u: float, dt: float, steps: int = 1,
                        max_occupation: int | None = None) -> PhaseImprint:
    """Evolve a Fock product state by ``steps`` dense ST steps at constant ``u``."""
    occ = [int(x) for x in occupations_in]
    basis = fock.FockBasis(len(occ), sum(occ), max_occupation)
    prop = fock.DenseST(basis, dt, split=True)
    idx = basis.product_index(occ)
    psi = fock.fock_state(basis, occ).amplitudes
    e = 0.5 * sum(n * (n - 1) for n in occ)
    dev = phase = leak = 0.0
    for k in range(1, steps + 1):
        psi = prop.step(psi, u, u)
        predicted = np.exp(-1j * u * dt * e * k)
        amp = psi[idx]
        dev = max(dev, abs(amp - predicted))
        phase = max(phase, abs(np.angle(amp / predicted)))
        others = np.abs(np.delete(psi, idx))
        leak = max(leak, float(others.max()) if len(others) else 0.0)
    return PhaseImprint(float(dev), float(phase), leak)
