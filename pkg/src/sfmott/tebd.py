"""Sweeping split-operator propagation of Bose-Hubbard MPS.

One time step ``|psi_{n+1}> = U_n |psi_n>`` with
``U_n = C^{1/2}(u_{n+1}) exp(-i H_even dt) exp(-i H_odd dt) C^{1/2}(u_n)``
is applied as a forward sweep over the odd bonds (1-based) with ``u_n``
one-site gates merged into the bond gates, a left-over one-site gate at the
last site, a backward sweep over the even bonds with ``u_{n+1}``, and a
final one-site gate at the first site. The orthogonality center starts and
ends on site 0. The adjoint step applies the conjugated gates in reverse.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import expm

from . import mps as mpslib
from .mps import Mps

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, energies=None):
        super().__init__(message)
        self.energies = list(energies or [])


def number_op(d: int) -> np.ndarray:
    return np.diag(np.arange(d, dtype=float))


def interaction_diag(d: int) -> np.ndarray:
    """Diagonal of ``(1/2) n (n - 1)``."""
    n = np.arange(d, dtype=float)
    return 0.5 * n * (n - 1)


def hop_operator(d: int) -> np.ndarray:
    """Two-site ``-(a_2^dag a_1 + a_1^dag a_2)`` with index ``s1 * d + s2``."""
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), 1)
    return -(np.kron(a, a.T) + np.kron(a.T, a))


@lru_cache(maxsize=64)
def _hop_gate(d: int, dt: complex) -> np.ndarray:
    return expm(-1j * dt * hop_operator(d))


@dataclass(frozen=True)
class GateSet:
    """Gates for one step size; ``dt`` may be complex (``-1j * tau`` for imaginary time)."""

    dt: complex
    local_dim: int = 5

    @property
    def hop_gate(self) -> np.ndarray:
        return _hop_gate(self.local_dim, complex(self.dt))

    def one_site_phase(self, u: float) -> np.ndarray:
        """``exp(-i u n (n - 1) dt / 4)`` for each local occupation."""
        return np.exp(-0.5j * u * self.dt * interaction_diag(self.local_dim))

    def triple_forward(self, u: float) -> np.ndarray:
        p = self.one_site_phase(u)
        return self.hop_gate * np.kron(p, p)[None, :]

    def triple_backward(self, u: float) -> np.ndarray:
        p = self.one_site_phase(u)
        return np.kron(p, p)[:, None] * self.hop_gate


def step_ops(n_sites: int, u_n: float, u_np1: float, gates: GateSet) -> list:
    """The ordered gate list of one step: ``("two", bond, gate)`` or ``("one", site, phases)``."""
    if n_sites < 2:
        raise ValueError("need at least two sites")
    ops = []
    fw = gates.triple_forward(u_n)
    for b in range(0, n_sites - 1, 2):
        ops.append(("two", b, fw))
    last_u = u_np1 if n_sites % 2 == 0 else u_n
    ops.append(("one", n_sites - 1, gates.one_site_phase(last_u)))
    bw = gates.triple_backward(u_np1)
    for b in range(n_sites - 3 if n_sites % 2 == 0 else n_sites - 2, 0, -2):
        ops.append(("two", b, bw))
    ops.append(("one", 0, gates.one_site_phase(u_np1)))
    return ops


def _adjoint_ops(ops):
    out = []
    for kind, where, g in reversed(ops):
        out.append((kind, where, g.conj().T if kind == "two" else g.conj()))
    return out


def _op_sites(op):
    kind, where, _ = op
    return (where, where + 1) if kind == "two" else (where, where)


def apply_ops(mps: Mps, ops, final_center: int = 0) -> Mps:
    """Apply a gate list, steering the center toward each next gate."""
    for k, op in enumerate(ops):
        kind, where, g = op
        if kind == "one":
            mpslib.apply_one_site_diagonal(mps, where, g)
            continue
        if mps.center < where:
            mps.move_center(where)
        elif mps.center > where + 1:
            mps.move_center(where + 1)
        target = _op_sites(ops[k + 1])[0] if k + 1 < len(ops) else final_center
        direction = "right" if target > where else "left"
        mpslib.apply_two_site_gate(mps, where, g, direction)
    mps.move_center(final_center)
    return mps


def _check_ready(mps: Mps) -> None:
    if mps.center != 0:
        raise mpslib.GaugeError("step expects the orthogonality center on site 0")
    if mps.n_sites < 2:
        raise ValueError("need at least two sites")


def step(mps: Mps, u_n: float, u_np1: float, gates: GateSet) -> Mps:
    """One ST step in place."""
    _check_ready(mps)
    return apply_ops(mps, step_ops(mps.n_sites, u_n, u_np1, gates))


def step_adjoint(mps: Mps, u_n: float, u_np1: float, gates: GateSet) -> Mps:
    """In-place ``U_n^dag``: the gates of :func:`step`, conjugated and reversed."""
    _check_ready(mps)
    return apply_ops(mps, _adjoint_ops(step_ops(mps.n_sites, u_n, u_np1, gates)))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    final: Mps
    records: list = field(default_factory=list)
    states: list | None = None
    truncation_alarm: bool = False

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"schema": "sfmott-trajectory/1"}) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"re": obj.real.tolist(), "im": obj.imag.tolist()}
        return obj.tolist()
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(np.real(obj)), "im": float(np.imag(obj))}
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))


def propagate(mps: Mps, controls, max_bond: int | None = None, sv_threshold: float | None = None,
              record: dict[str, Callable[[Mps], object]] | None = None, store_states: bool = False,
              alarm_threshold: float = 1e-6, gates: GateSet | None = None) -> Trajectory:
    """Run ``n_t - 1`` steps over ``controls`` (needs ``dt`` and ``values``).

    The input is not modified. ``record`` maps names to callables evaluated
    on the state after every step (and on the initial state).
    """
    u = np.asarray(controls.values, dtype=float)
    if len(u) < 2:
        raise ValueError("need at least two control points")
    psi = mps.copy()
    if max_bond is not None:
        psi.max_bond = max_bond
    if sv_threshold is not None:
        psi.sv_threshold = sv_threshold
    psi.move_center(0)
    gates = gates or GateSet(controls.dt, psi.local_dim)
    states = [psi.copy()] if store_states else None
    records = []
    alarm = False
    w0 = psi.truncation_weight

    def snapshot(j):
        rec = {"step": j, "time": j * float(np.real(controls.dt)), "u": float(u[j]),
               "norm": psi.norm(), "truncation_weight": psi.truncation_weight - w0}
        for name, fn in (record or {}).items():
            rec[name] = fn(psi)
        records.append(rec)

    snapshot(0)
    for n in range(len(u) - 1):
        step(psi, u[n], u[n + 1], gates)
        if store_states:
            states.append(psi.copy())
        snapshot(n + 1)
        if not alarm and psi.truncation_weight - w0 > alarm_threshold:
            alarm = True
            warnings.warn(f"truncation weight {psi.truncation_weight - w0:.2e} exceeds alarm "
                          f"threshold {alarm_threshold:.1e} at step {n + 1}", RuntimeWarning)
    for rec in records:
        rec["truncation_alarm"] = alarm
    return Trajectory(psi, records, states, alarm)


# ---------------------------------------------------------------------------
# Energies and imaginary-time ground states
# ---------------------------------------------------------------------------

def energy(mps: Mps, u: float) -> float:
    """``<H(u)>`` per unit norm, in units of J_x."""
    d = mps.local_dim
    hop = hop_operator(d)
    e = 0.0
    for b in range(mps.n_sites - 1):
        e += mpslib.bond_expectation(mps, b, hop).real
    diag = interaction_diag(d)
    onsite = mpslib.local_expectations(mps, np.diag(diag)).real.sum()
    return float((e + u * onsite) / mps.norm() ** 2)


DEFAULT_TAUS = (0.1, 0.03, 0.01, 0.003, 0.001)


def ground_state_imaginary(seed, u: float, taus=DEFAULT_TAUS, max_bond: int | None = 200,
                           sv_threshold: float = 1e-12, local_dim: int = 5, tol: float = 1e-10,
                           max_sweeps: int = 200_000, stage_tol: float = 1e-7) -> Mps:
    """Ground state by imaginary-time evolution with the step gates.

    Each sweep is a symmetric pair (step with ``tau/2`` followed by its
    mirror), so the Trotter bias of the fixed point is second order in
    ``tau``. A stage ends when the energy drop per unit imaginary time,
    relative to ``|E|``, falls below ``stage_tol`` (``tol`` on the final
    stage).
    """
    if isinstance(seed, Mps):
        psi = seed.copy()
        psi.max_bond, psi.sv_threshold = max_bond, sv_threshold
    else:
        psi = mpslib.product_state(seed, local_dim, max_bond, sv_threshold)
    psi.move_center(0)
    psi.normalize()
    energies = [energy(psi, u)]
    psi.move_center(0)
    sweeps = 0
    for k, tau in enumerate(taus):
        half = GateSet(-0.5j * tau, psi.local_dim)
        ops = step_ops(psi.n_sites, u, u, half)
        sym = ops + _adjoint_ops(ops)
        thresh = tol if k == len(taus) - 1 else stage_tol
        while True:
            apply_ops(psi, sym)
            psi.normalize()
            e = energy(psi, u)
            psi.move_center(0)
            energies.append(e)
            sweeps += 1
            rate = (energies[-2] - e) / (tau * max(abs(e), 1e-300))
            if abs(rate) < thresh:
                break
            if sweeps >= max_sweeps:
                raise ConvergenceError(
                    f"imaginary-time search did not converge in {max_sweeps} sweeps", energies)
    log.debug("imaginary-time ground state: %d sweeps, E=%.12f", sweeps, energies[-1])
    psi.sweeps = sweeps
    psi.energies = energies
    return psi
