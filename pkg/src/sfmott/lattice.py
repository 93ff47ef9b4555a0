"""Optical-lattice constitutive relations for the Bose-Hubbard parameters.

The lowest Bloch band of ``V(x) = v sin^2(k_l x)`` is obtained from the
plane-wave (central) equation, Wannier functions are built from the
phase-fixed Bloch states, and the Hubbard energies follow from real-space
quadrature:

* ``J_x = -<w_i | H_1p | w_{i+1}>``
* ``U = g_3D * prod_q int |w_q|^4 dq``

Energies are expressed in units of the recoil energy
``E_R = hbar^2 pi^2 / (2 m a^2)``; real-space coordinates are expressed in
units of the lattice spacing ``a`` (site ``i`` sits at ``x = i``).
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import constants
from scipy.interpolate import PchipInterpolator
from scipy.linalg import LinAlgError, eigh_tridiagonal

VX_MIN = 2.0
VX_MAX = 13.5
VX_SF = 3.0
VX_MOTT = 13.0

N_PLANE_WAVES = 21
N_K = 64
GRID_SITES = 12
POINTS_PER_SITE = 512

CACHE_HEADER = "# vx_ER, Jx_ER, U_ER"


class LatticeError(RuntimeError):
    """Band-structure or constitutive-relation failure."""


class OutOfRangeError(ValueError):
    """A lattice depth or control value outside the modelled window."""


@dataclass(frozen=True)
class LatticeParams:
    """Physical parameters of the cubic optical lattice (SI units).

    Defaults are Rb-87 in a 1064 nm lattice with 20 E_R transverse depths.
    """

    laser_wavelength: float = 1064e-9
    atom_mass: float = 87 * constants.atomic_mass
    scattering_length: float = 101 * constants.physical_constants["Bohr radius"][0]
    transverse_depths: tuple[float, float] = (20.0, 20.0)

    @property
    def lattice_spacing(self) -> float:
        return self.laser_wavelength / 2

    @property
    def wavenumber(self) -> float:
        return np.pi / self.lattice_spacing

    @property
    def recoil_energy(self) -> float:
        """E_R in joules, built on the lattice spacing."""
        return constants.hbar**2 * np.pi**2 / (2 * self.atom_mass * self.lattice_spacing**2)

    @property
    def coupling_3d(self) -> float:
        return 4 * np.pi * constants.hbar**2 * self.scattering_length / self.atom_mass

    def content_hash(self) -> str:
        payload = json.dumps(
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class BandSolution:
    """Bloch bands of a 1D lattice at a fixed depth.

    ``quasimomenta`` are in units of ``k_l`` over ``[-1, 1)``;
    ``bloch_coefficients[ik, m, n]`` multiplies ``exp(i (k + 2 m') pi x)`` for
    band ``n``, with ``m' = m - n_plane_waves // 2``.
    """

    depth: float
    quasimomenta: np.ndarray
    band_energies: np.ndarray
    bloch_coefficients: np.ndarray

    @property
    def n_plane_waves(self) -> int:
        return self.bloch_coefficients.shape[1]

    @property
    def orders(self) -> np.ndarray:
        return np.arange(self.n_plane_waves) - self.n_plane_waves // 2


@dataclass
class WannierFunction:
    depth: float
    site_index: int
    grid: np.ndarray
    values: np.ndarray
    # H_1p applied to the function, sampled on the same grid (E_R units)
    hamiltonian_values: np.ndarray = field(repr=False)


def solve_bands(depth: float, n_plane_waves: int = N_PLANE_WAVES, n_k: int = N_K,
                n_bands: int = 3) -> BandSolution:
    """Diagonalize the central equation at each quasimomentum.

    The Hamiltonian in the plane-wave basis is tridiagonal:
    ``(k + 2m)^2 + v/2`` on the diagonal and ``-v/4`` off it.
    """
    if depth < 0:
        raise ValueError(f"lattice depth must be non-negative, got {depth}")
    if n_plane_waves < 7 or n_plane_waves % 2 == 0:
        raise ValueError("n_plane_waves must be odd and >= 7")
    if n_k < 2:
        raise ValueError("n_k must be >= 2")
    n_bands = max(3, n_bands)

    orders = np.arange(n_plane_waves) - n_plane_waves // 2
    ks = -1.0 + 2.0 * np.arange(n_k) / n_k
    off = np.full(n_plane_waves - 1, -depth / 4)
    energies = np.empty((n_k, n_bands))
    coeffs = np.empty((n_k, n_plane_waves, n_bands))
    for ik, k in enumerate(ks):
        diag = (k + 2 * orders) ** 2 + depth / 2
        try:
            e, c = eigh_tridiagonal(diag, off, select="i", select_range=(0, n_bands - 1))
        except LinAlgError as exc:
            raise LatticeError(f"central equation failed at depth={depth} E_R, k={k} k_l") from exc
        energies[ik] = e
        coeffs[ik] = c
    return BandSolution(depth, ks, energies, coeffs)


def _site_grid(sites: int = GRID_SITES, points_per_site: int = POINTS_PER_SITE) -> np.ndarray:
    return np.linspace(-sites / 2, sites / 2, sites * points_per_site + 1)


def build_wannier(band: BandSolution, site_index: int = 0,
                  grid: np.ndarray | None = None) -> WannierFunction:
    """Lowest-band Wannier function centered on ``site_index``.

    Each Bloch function is phase-fixed so that it is real and positive at
    the site center ``x = 0``; the resulting Wannier function is real and
    even about its center.
    """
    x = _site_grid() if grid is None else np.asarray(grid, dtype=float)
    ks = band.quasimomenta
    c = band.bloch_coefficients[:, :, 0].copy()
    at_center = c.sum(axis=1)
    if np.any(np.abs(at_center) < 1e-14):
        raise LatticeError(f"Bloch function vanishes at the site center (depth={band.depth})")
    c *= np.sign(at_center)[:, None]

    # exp(-i k x_i) shifts the center; exp(i q pi x) is the plane wave
    shift = np.exp(-1j * np.pi * ks * site_index)
    q = (ks[:, None] + 2 * band.orders[None, :]).ravel()
    amp = (shift[:, None] * c).ravel()
    amp_h = (shift[:, None] * band.band_energies[:, :1] * c).ravel()
    w = np.zeros(x.size, dtype=complex)
    hw = np.zeros(x.size, dtype=complex)
    for chunk in np.array_split(np.arange(q.size), max(1, q.size // 256)):
        phase = np.exp(1j * np.pi * np.outer(x, q[chunk]))
        w += phase @ amp[chunk]
        hw += phase @ amp_h[chunk]

    norm = np.sqrt(np.trapezoid(np.abs(w) ** 2, x))
    w /= norm
    hw /= norm
    residual = np.max(np.abs(w.imag))
    if residual > 1e-6:
        raise LatticeError(f"Wannier phase fixing left imaginary residual {residual:.2e}")
    return WannierFunction(band.depth, site_index, x, w.real.copy(), hw.real.copy())


@lru_cache(maxsize=256)
def _wannier_pair(depth: float) -> tuple[WannierFunction, WannierFunction]:
    band = solve_bands(depth)
    return build_wannier(band, 0), build_wannier(band, 1)


def _quartic_integral(depth: float) -> float:
    """int |w|^4 dx in units of 1/a."""
    w0, _ = _wannier_pair(float(depth))
    return float(np.trapezoid(w0.values**4, w0.grid))


def _check_depth(v_x: float) -> None:
    if not (VX_MIN - 1e-12 <= v_x <= VX_MAX + 1e-12):
        raise OutOfRangeError(
            f"v_x = {v_x} E_R outside the modelled window [{VX_MIN}, {VX_MAX}] E_R")


def tunneling_energy(params: LatticeParams, v_x: float) -> float:
    """J_x(v_x) in units of E_R."""
    _check_depth(v_x)
    w0, w1 = _wannier_pair(float(v_x))
    return float(-np.trapezoid(w0.values * w1.hamiltonian_values, w0.grid))


def onsite_energy(params: LatticeParams, v_x: float) -> float:
    """U(v_x, v_y, v_z) in units of E_R."""
    _check_depth(v_x)
    a = params.lattice_spacing
    integrals = [_quartic_integral(v_x)]
    integrals += [_quartic_integral(v) for v in params.transverse_depths]
    u_si = params.coupling_3d * np.prod(integrals) / a**3
    return float(u_si / params.recoil_energy)


@dataclass
class ConstitutiveTable:
    """Sampled v_x -> (J_x, U, U/J_x) map with monotone interpolants."""

    vx_grid: np.ndarray
    jx_values: np.ndarray
    u_values: np.ndarray
    recoil_energy: float = 1.0

    def __post_init__(self):
        self.vx_grid = np.asarray(self.vx_grid, dtype=float)
        self.jx_values = np.asarray(self.jx_values, dtype=float)
        self.u_values = np.asarray(self.u_values, dtype=float)
        if np.any(np.diff(self.ratio) <= 0):
            raise LatticeError("U/J_x is not strictly increasing in v_x; band solver suspect")
        if np.any(np.diff(self.jx_values) >= 0):
            raise LatticeError("J_x is not strictly decreasing in v_x")
        self._ratio_of_vx = PchipInterpolator(self.vx_grid, self.ratio)
        self._vx_of_ratio = PchipInterpolator(self.ratio, self.vx_grid)
        self._jx_of_vx = PchipInterpolator(self.vx_grid, self.jx_values)

    @property
    def ratio(self) -> np.ndarray:
        return self.u_values / self.jx_values

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.ratio[0]), float(self.ratio[-1])

    def ratio_at(self, v_x):
        v = np.asarray(v_x, dtype=float)
        self._check(v, self.vx_grid[0], self.vx_grid[-1], "v_x")
        return self._ratio_of_vx(v)[()]

    def depth_at(self, u):
        """Inverse map u = U/J_x -> v_x."""
        u = np.asarray(u, dtype=float)
        lo, hi = self.bounds
        self._check(u, lo, hi, "u")
        return self._vx_of_ratio(u)[()]

    def tunneling_at_ratio(self, u):
        """J_x in E_R as a function of the control value."""
        return self._jx_of_vx(self.depth_at(u))[()]

    @staticmethod
    def _check(x, lo, hi, name):
        tol = 1e-9 * max(1.0, abs(hi))
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise OutOfRangeError(f"{name} outside table range [{lo}, {hi}]")

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(CACHE_HEADER + "\n")
        for row in zip(self.vx_grid, self.jx_values, self.u_values):
            buf.write(", ".join(f"{v:.12g}" for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, recoil_energy: float = 1.0) -> "ConstitutiveTable":
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != CACHE_HEADER:
            raise ValueError("not a constitutive table file")
        data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], recoil_energy)


def _default_cache_dir() -> Path:
    return Path(os.environ.get("SFMOTT_CACHE", Path.home() / ".cache" / "sfmott"))


def build_table(params: LatticeParams | None = None, n_samples: int = 116,
                cache_dir: str | Path | None = None, use_cache: bool = True) -> ConstitutiveTable:
    """Sample the constitutive relations on a uniform v_x grid over [2, 13.5] E_R.

    Tables are cached as text files keyed by a hash of ``params`` and the
    sample count; cache writes are atomic (write then rename).
    """
    params = params or LatticeParams()
    if n_samples < 50:
        raise ValueError("n_samples must be >= 50")
    path = None
    if use_cache:
        cdir = Path(cache_dir) if cache_dir is not None else _default_cache_dir()
        key = (f"{params.content_hash()}-{n_samples}-{N_PLANE_WAVES}-{N_K}-{GRID_SITES}"
               f"-{POINTS_PER_SITE}")
        path = cdir / f"table-{key}.txt"
        if path.exists():
            return ConstitutiveTable.from_text(path.read_text(), params.recoil_energy)

    vx = np.linspace(VX_MIN, VX_MAX, n_samples)
    jx = np.array([tunneling_energy(params, v) for v in vx])
    uu = np.array([onsite_energy(params, v) for v in vx])
    table = ConstitutiveTable(vx, jx, uu, params.recoil_energy)

    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                fh.write(table.to_text())
            os.replace(tmp, path)
        except OSError:
            pass
        table = ConstitutiveTable.from_text(table.to_text(), params.recoil_energy)
    return table


def si_duration(table: ConstitutiveTable, controls) -> float:
    """Transfer duration in seconds: ``hbar * dt * sum_n 1 / J_x(u_n)``.

    ``controls`` is anything with ``dt`` and ``values`` attributes.
    """
    u = np.asarray(controls.values, dtype=float)
    jx = np.asarray(table.tunneling_at_ratio(u)) * table.recoil_energy
    return float(constants.hbar * controls.dt * np.sum(1.0 / jx))
