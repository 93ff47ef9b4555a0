"""Finite matrix product states with a single orthogonality center.

Site tensors are stored as ``(left bond, physical, right bond)`` arrays.
Sites left of ``center`` are left-normalized, sites right of it are
right-normalized. Gauge moves and two-site splits use a thin SVD with
truncation: keep singular values ``>= sv_threshold * s_max`` and at most
``max_bond`` of them, then rescale the kept spectrum to the original norm.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.linalg

from .fock import DENSE_LIMIT, DenseState, FockBasis

SNAPSHOT_VERSION = "sfmott-mps/1"


class GaugeError(RuntimeError):
    """An operation was attempted away from the orthogonality center."""


def _svd(m: np.ndarray):
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


def truncated_svd(m: np.ndarray, max_bond: int | None, sv_threshold: float):
    """Thin SVD with the truncation rule and a deterministic sign convention.

    Returns ``(u, s, vh, discarded_weight)`` where the discarded weight is
    the relative squared norm of the dropped singular values.
    """
    u, s, vh = _svd(m)
    total = float(np.sum(s**2))
    if total == 0.0:
        return u[:, :1], s[:1], vh[:1], 0.0
    keep = int(np.count_nonzero(s >= sv_threshold * s[0])) if sv_threshold > 0 else len(s)
    keep = max(1, keep)
    if max_bond is not None:
        keep = min(keep, max_bond)
    discarded = float(np.sum(s[keep:] ** 2)) / total
    u, s, vh = u[:, :keep], s[:keep], vh[:keep]
    if discarded > 0:
        s = s * np.sqrt(total / np.sum(s**2))
    # first non-negligible entry of each left vector made real positive
    tol = 1e-12 * np.max(np.abs(u), axis=0)
    first = np.argmax(np.abs(u) > tol[None, :], axis=0)
    ph = u[first, np.arange(keep)]
    ph = ph / np.abs(ph)
    u = u * ph.conj()[None, :]
    vh = vh * ph[:, None]
    return u, s, vh, discarded


class Mps:
    """Open-boundary MPS with caps ``max_bond`` (D) and ``sv_threshold`` (s_max)."""

    def __init__(self, tensors, local_dim: int, center: int = 0,
                 max_bond: int | None = None, sv_threshold: float = 1e-12):
        self.tensors = [np.asarray(t, dtype=complex) for t in tensors]
        self.local_dim = int(local_dim)
        self.center = int(center)
        self.max_bond = max_bond
        self.sv_threshold = float(sv_threshold)
        self.truncation_weight = 0.0
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ValueError("boundary bond dimensions must be 1")
        for t in self.tensors:
            if t.ndim != 3 or t.shape[1] != self.local_dim:
                raise ValueError("site tensors must be (left, d, right) arrays")

    @property
    def n_sites(self) -> int:
        return len(self.tensors)

    def __len__(self):
        return self.n_sites

    @property
    def bond_dims(self) -> list[int]:
        return [t.shape[2] for t in self.tensors[:-1]]

    def copy(self) -> "Mps":
        new = Mps([t.copy() for t in self.tensors], self.local_dim, self.center,
                  self.max_bond, self.sv_threshold)
        new.truncation_weight = self.truncation_weight
        return new

    def __repr__(self):
        return (f"Mps(n_sites={self.n_sites}, d={self.local_dim}, center={self.center}, "
                f"bonds={self.bond_dims})")

    def with_caps(self, max_bond: int | None, sv_threshold: float) -> "Mps":
        new = self.copy()
        new.max_bond, new.sv_threshold = max_bond, sv_threshold
        return new

    def norm(self) -> float:
        return float(np.linalg.norm(self.tensors[self.center]))

    def normalize(self) -> "Mps":
        self.tensors[self.center] /= self.norm()
        return self

    def move_center(self, site: int) -> "Mps":
        """Shift the orthogonality center to ``site`` by successive SVDs."""
        if not 0 <= site < self.n_sites:
            raise IndexError(site)
        while self.center < site:
            i = self.center
            a = self.tensors[i]
            dl, d, dr = a.shape
            u, s, vh, disc = truncated_svd(a.reshape(dl * d, dr), self.max_bond, self.sv_threshold)
            self.truncation_weight += disc
            self.tensors[i] = u.reshape(dl, d, -1)
            nxt = self.tensors[i + 1]
            self.tensors[i + 1] = ((s[:, None] * vh) @ nxt.reshape(nxt.shape[0], -1)).reshape(
                -1, *nxt.shape[1:])
            self.center += 1
        while self.center > site:
            i = self.center
            a = self.tensors[i]
            dl, d, dr = a.shape
            u, s, vh, disc = truncated_svd(a.reshape(dl, d * dr), self.max_bond, self.sv_threshold)
            self.truncation_weight += disc
            self.tensors[i] = vh.reshape(-1, d, dr)
            prv = self.tensors[i - 1]
            self.tensors[i - 1] = (prv.reshape(-1, prv.shape[2]) @ (u * s[None, :])).reshape(
                *prv.shape[:2], -1)
            self.center -= 1
        return self

    def canonical_error(self) -> float:
        """Max deviation from identity of the left/right isometry conditions."""
        err = 0.0
        for i, a in enumerate(self.tensors):
            if i < self.center:
                m = np.einsum("asb,asc->bc", a.conj(), a)
            elif i > self.center:
                m = np.einsum("asb,csb->ac", a.conj(), a)
            else:
                continue
            err = max(err, float(np.max(np.abs(m - np.eye(m.shape[0])))))
        return err

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {f"site_{i}": t for i, t in enumerate(self.tensors)}
        np.savez(path, version=np.array(SNAPSHOT_VERSION), local_dim=self.local_dim,
                 center=self.center, max_bond=-1 if self.max_bond is None else self.max_bond,
                 sv_threshold=self.sv_threshold, truncation_weight=self.truncation_weight,
                 n_sites=self.n_sites, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Mps":
        with np.load(path) as f:
            version = str(f["version"])
            if version != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported MPS snapshot version {version!r}")
            n = int(f["n_sites"])
            mb = int(f["max_bond"])
            mps = cls([f[f"site_{i}"] for i in range(n)], int(f["local_dim"]), int(f["center"]),
                      None if mb < 0 else mb, float(f["sv_threshold"]))
            mps.truncation_weight = float(f["truncation_weight"])
        return mps


def product_state(occupations, local_dim: int, max_bond: int | None = None,
                  sv_threshold: float = 1e-12) -> Mps:
    tensors = []
    for n in occupations:
        if not 0 <= n < local_dim:
            raise ValueError(f"occupation {n} not representable with local_dim={local_dim}")
        t = np.zeros((1, local_dim, 1), dtype=complex)
        t[0, n, 0] = 1.0
        tensors.append(t)
    return Mps(tensors, local_dim, 0, max_bond, sv_threshold)


def _full_tensor_guard(n_sites: int, local_dim: int) -> None:
    if local_dim**n_sites > 10 * DENSE_LIMIT:
        raise MemoryError("full tensor too large for a dense conversion")


def from_dense(state: DenseState | np.ndarray, local_dim: int | None = None,
               max_bond: int | None = None, sv_threshold: float = 1e-12) -> Mps:
    """Decompose a number-conserving dense state by sweeping SVDs left to right.

    ``state`` may also be a full ``local_dim**n_sites`` amplitude vector.
    The result has its center on site 0.
    """
    if isinstance(state, DenseState):
        basis = state.basis
        d = local_dim or basis.local_dim
        n = basis.n_sites
        _full_tensor_guard(n, d)
        full = np.zeros(d**n, dtype=complex)
        full[basis.flat_indices(d)] = state.amplitudes
    else:
        if local_dim is None:
            raise ValueError("local_dim required for a raw amplitude vector")
        d = local_dim
        full = np.asarray(state, dtype=complex).ravel()
        n = int(round(np.log(full.size) / np.log(d)))
        if d**n != full.size:
            raise ValueError("vector length is not a power of local_dim")
    norm = np.linalg.norm(full)
    tensors = []
    weight = 0.0
    rest = full.reshape(1, -1)
    for i in range(n - 1):
        dl = rest.shape[0]
        u, s, vh, disc = truncated_svd(rest.reshape(dl * d, -1), max_bond, sv_threshold)
        weight += disc
        tensors.append(u.reshape(dl, d, -1))
        rest = s[:, None] * vh
    tensors.append(rest.reshape(rest.shape[0], d, 1))
    mps = Mps(tensors, d, n - 1, max_bond, sv_threshold)
    mps.truncation_weight = weight
    mps.move_center(0)
    if weight > 0:
        mps.tensors[0] *= norm / mps.norm()
    return mps


def to_dense(mps: Mps, basis: FockBasis) -> DenseState:
    """Amplitudes of ``mps`` on the states of ``basis`` (components outside it are dropped)."""
    if basis.n_sites != mps.n_sites:
        raise ValueError("basis and MPS have different lengths")
    if basis.dim > DENSE_LIMIT:
        raise MemoryError("basis too large for a dense conversion")
    if basis.max_occupation >= mps.local_dim:
        raise ValueError("basis allows occupations beyond the MPS local dimension")
    occ = basis.states
    vec = mps.tensors[0][0][occ[:, 0]]  # (dim, D1)
    for i in range(1, mps.n_sites):
        a = mps.tensors[i][:, occ[:, i], :]  # (Dl, dim, Dr)
        vec = np.einsum("ka,akb->kb", vec, a)
    return DenseState(basis, vec[:, 0])


def to_full_vector(mps: Mps) -> np.ndarray:
    _full_tensor_guard(mps.n_sites, mps.local_dim)
    out = mps.tensors[0]
    for t in mps.tensors[1:]:
        out = np.tensordot(out, t, axes=(out.ndim - 1, 0))
    return out.reshape(-1)


def _check_pair(bra: Mps, ket: Mps) -> None:
    if bra.n_sites != ket.n_sites or bra.local_dim != ket.local_dim:
        raise ValueError("MPS pair has mismatched length or local dimension")


def _left_envs(bra: Mps, ket: Mps) -> list[np.ndarray]:
    envs = [np.ones((1, 1), dtype=complex)]
    for a, b in zip(bra.tensors, ket.tensors):
        e = np.tensordot(envs[-1], a.conj(), axes=(0, 0))  # (k, s, a')
        e = np.tensordot(e, b, axes=([0, 1], [0, 1]))  # (a', b')
        envs.append(e)
    return envs


def _right_envs(bra: Mps, ket: Mps) -> list[np.ndarray]:
    n = bra.n_sites
    envs = [None] * (n + 1)
    envs[n] = np.ones((1, 1), dtype=complex)
    for i in range(n - 1, -1, -1):
        e = np.tensordot(ket.tensors[i], envs[i + 1], axes=(2, 1))  # (b, s, a')
        e = np.tensordot(bra.tensors[i].conj(), e, axes=([1, 2], [1, 2]))  # (a, b)
        envs[i] = e
    return envs


def overlap(bra: Mps, ket: Mps) -> complex:
    """``<bra|ket>``."""
    _check_pair(bra, ket)
    return complex(_left_envs(bra, ket)[-1][0, 0])


def local_expectation(mps: Mps, site: int, op: np.ndarray) -> complex:
    """``<psi|op_site|psi>`` evaluated at the orthogonality center (moved if needed)."""
    op = np.asarray(op)
    if op.shape != (mps.local_dim, mps.local_dim):
        raise ValueError("operator must be d x d")
    mps.move_center(site)
    a = mps.tensors[site]
    return complex(np.einsum("asb,st,atb->", a.conj(), op, a))


def local_expectations(mps: Mps, op: np.ndarray) -> np.ndarray:
    """Single-site expectations on every site, sweeping the center once."""
    out = np.empty(mps.n_sites, dtype=complex)
    order = range(mps.n_sites) if mps.center <= mps.n_sites // 2 else range(mps.n_sites - 1, -1, -1)
    for i in order:
        out[i] = local_expectation(mps, i, op)
    return out


def _site_op(op, d):
    op = np.asarray(op)
    if op.ndim == 1:
        op = np.diag(op)
    if op.shape != (d, d):
        raise ValueError("operator must be d x d")
    return op


def cross_matrix_elements(bra: Mps, ket: Mps, op: np.ndarray) -> np.ndarray:
    """``<bra| op_i |ket>`` for every site ``i`` from one pass of cached environments.

    ``op`` may be a d x d matrix or the diagonal of one.
    """
    _check_pair(bra, ket)
    op = _site_op(op, ket.local_dim)
    left = _left_envs(bra, ket)
    right = _right_envs(bra, ket)
    out = np.empty(ket.n_sites, dtype=complex)
    for i in range(ket.n_sites):
        b = np.tensordot(op, ket.tensors[i], axes=(1, 1)).transpose(1, 0, 2)
        e = np.tensordot(left[i], bra.tensors[i].conj(), axes=(0, 0))
        e = np.tensordot(e, b, axes=([0, 1], [0, 1]))
        out[i] = np.sum(e * right[i + 1])
    return out


def cross_matrix_element(bra: Mps, ket: Mps, site: int, op: np.ndarray) -> complex:
    """``<bra| op_site |ket>`` for a single site."""
    _check_pair(bra, ket)
    op = _site_op(op, ket.local_dim)
    e = np.ones((1, 1), dtype=complex)
    for i in range(ket.n_sites):
        k = ket.tensors[i]
        if i == site:
            k = np.tensordot(op, k, axes=(1, 1)).transpose(1, 0, 2)
        e = np.tensordot(e, bra.tensors[i].conj(), axes=(0, 0))
        e = np.tensordot(e, k, axes=([0, 1], [0, 1]))
    return complex(e[0, 0])


def apply_two_site_gate(mps: Mps, bond: int, gate: np.ndarray, direction: str = "right") -> Mps:
    """Apply a d^2 x d^2 gate on sites ``(bond, bond + 1)`` and split by truncated SVD.

    The gate's row/column index is ``s_bond * d + s_{bond+1}``. After the
    split the center sits on ``bond + 1`` for ``direction='right'`` and on
    ``bond`` for ``'left'``.
    """
    if mps.center not in (bond, bond + 1):
        raise GaugeError(f"center at {mps.center}, gate needs it on bond {bond}")
    if direction not in ("left", "right"):
        raise ValueError("direction must be 'left' or 'right'")
    d = mps.local_dim
    a, b = mps.tensors[bond], mps.tensors[bond + 1]
    dl, dr = a.shape[0], b.shape[2]
    theta = (a.reshape(dl * d, -1) @ b.reshape(-1, d * dr)).reshape(dl, d * d, dr)
    theta = np.matmul(np.asarray(gate), theta)  # gate acts on the merged (s, t) index
    u, s, vh, disc = truncated_svd(theta.reshape(dl * d, d * dr), mps.max_bond, mps.sv_threshold)
    mps.truncation_weight += disc
    if direction == "right":
        mps.tensors[bond] = u.reshape(dl, d, -1)
        mps.tensors[bond + 1] = (s[:, None] * vh).reshape(-1, d, dr)
        mps.center = bond + 1
    else:
        mps.tensors[bond] = (u * s[None, :]).reshape(dl, d, -1)
        mps.tensors[bond + 1] = vh.reshape(-1, d, dr)
        mps.center = bond
    return mps


def apply_one_site_diagonal(mps: Mps, site: int, phases: np.ndarray) -> Mps:
    """Multiply the physical index of ``site`` by ``phases`` (a diagonal one-site gate)."""
    phases = np.asarray(phases)
    if phases.shape != (mps.local_dim,):
        raise ValueError("need one factor per local state")
    if site != mps.center and not np.allclose(np.abs(phases), 1.0, rtol=0, atol=1e-13):
        # non-unitary factors would spoil the isometries away from the center
        mps.move_center(site)
    mps.tensors[site] = mps.tensors[site] * phases[None, :, None]
    return mps


def bond_expectation(mps: Mps, bond: int, op: np.ndarray) -> complex:
    """``<psi| op_{bond, bond+1} |psi>`` for a d^2 x d^2 operator."""
    d = mps.local_dim
    if mps.center not in (bond, bond + 1):
        mps.move_center(bond if mps.center < bond else bond + 1)
    theta = np.tensordot(mps.tensors[bond], mps.tensors[bond + 1], axes=(2, 0))
    g = np.asarray(op).reshape(d, d, d, d)
    out = np.tensordot(g, theta, axes=([2, 3], [1, 2])).transpose(2, 0, 1, 3)
    return complex(np.vdot(theta, out))
