"""Exact-gradient optimal control of the split-operator dynamics.

The fidelity cost ``J_F = (1 - F) / 2`` with ``F = |<target|psi(T)>|^2`` has
the gradient

    dJ_F/du_n = Re(i P^* <chi_n| dH^c/du | psi_n>) dt,

halved at the two end points, where ``psi_n`` is the forward trajectory,
``chi_n`` the backward-propagated target and ``P = <chi_{n_t}|psi_{n_t}>``.
This is exact for the Trotterized dynamics at any ``dt``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import fock
from . import mps as mpslib
from . import tebd
from .fock import DenseState
from .mps import Mps

log = logging.getLogger(__name__)


@dataclass
class ControlGrid:
    """Control values ``u_1..u_{n_t}`` on the regular grid ``t_j = (j - 1) dt``."""

    dt: float
    values: np.ndarray
    bounds: tuple[float, float] = (-np.inf, np.inf)
    clamp_endpoints: bool = True

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.ndim != 1 or len(self.values) < 2:
            raise ValueError("need a 1D control vector with at least two points")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_t(self) -> int:
        return len(self.values)

    @property
    def duration(self) -> float:
        return (self.n_t - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    def with_values(self, values) -> "ControlGrid":
        return replace(self, values=np.array(values, dtype=float))

    def within_bounds(self, tol: float = 0.0) -> bool:
        lo, hi = self.bounds
        return bool(np.all(self.values >= lo - tol) and np.all(self.values <= hi + tol))

    @classmethod
    def constant(cls, u: float, duration: float, dt: float, **kw) -> "ControlGrid":
        n = int(round(duration / dt)) + 1
        return cls(dt, np.full(n, float(u)), **kw)


@dataclass
class CostConfig:
    """Everything ``J = J_F + J_alpha + J_gamma`` needs besides the controls.

    ``initial_state``/``target_state`` are both :class:`Mps` (the engine) or
    both :class:`DenseState` (the dense ST oracle with even/odd split).
    """

    initial_state: Mps | DenseState | None
    target_state: Mps | DenseState | None
    alpha: float = 0.0
    gamma: float = 0.0
    max_bond: int | None = 200
    sv_threshold: float = 1e-12
    include_fidelity: bool = True
    memory_budget: int = 512 * 2**20
    alarm_threshold: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("regularization weights must be non-negative")

    @property
    def dense(self) -> bool:
        return isinstance(self.initial_state, DenseState)


@dataclass
class GradientResult:
    total_cost: float
    fidelity: float
    gradient: np.ndarray
    overlap: complex
    truncation_alarm: bool = False
    fidelity_cost: float = 0.0
    alpha_cost: float = 0.0
    gamma_cost: float = 0.0


def regularizer_costs(controls: ControlGrid, alpha: float, gamma: float):
    """``J_alpha = alpha/2 sum u_n^2 dt`` and ``J_gamma = gamma/2 sum (u_{n+1} - u_n)^2 / dt``.

    Returns ``(J_alpha, J_gamma, grad_alpha, grad_gamma)``.
    """
    u = controls.values
    dt = controls.dt
    j_a = 0.5 * alpha * float(np.sum(u**2)) * dt
    g_a = alpha * u * dt
    du = np.diff(u)
    j_g = 0.5 * gamma * float(np.sum(du**2)) / dt
    g_g = np.zeros_like(u)
    g_g[:-1] -= du
    g_g[1:] += du
    g_g *= gamma / dt
    return j_a, j_g, g_a, g_g


# ---------------------------------------------------------------------------
# Fidelity part
# ---------------------------------------------------------------------------

def _prepared(state: Mps, config: CostConfig) -> Mps:
    psi = state.copy()
    psi.max_bond, psi.sv_threshold = config.max_bond, config.sv_threshold
    psi.move_center(0)
    psi.truncation_weight = 0.0
    return psi


def _mps_bytes(m: Mps) -> int:
    return sum(t.nbytes for t in m.tensors)


def forward_fidelity(config: CostConfig, controls: ControlGrid) -> tuple[float, complex, bool]:
    """Forward pass only: ``(F, P, truncation_alarm)``."""
    u = controls.values
    if config.dense:
        prop = fock.DenseST(config.initial_state.basis, controls.dt, split=True)
        psi = config.initial_state.amplitudes
        for n in range(len(u) - 1):
            psi = prop.step(psi, u[n], u[n + 1])
        p = complex(np.vdot(config.target_state.amplitudes, psi))
        return abs(p) ** 2, p, False
    gates = tebd.GateSet(controls.dt, config.initial_state.local_dim)
    psi = _prepared(config.initial_state, config)
    for n in range(len(u) - 1):
        tebd.step(psi, u[n], u[n + 1], gates)
    p = mpslib.overlap(config.target_state, psi)
    return abs(p) ** 2, p, psi.truncation_weight > config.alarm_threshold


def _mps_fidelity_gradient(config: CostConfig, controls: ControlGrid):
    u = controls.values
    nt = len(u)
    dt = controls.dt
    d = config.initial_state.local_dim
    gates = tebd.GateSet(dt, d)
    diag = tebd.interaction_diag(d)

    psi = _prepared(config.initial_state, config)
    # checkpoint interval chosen from the first state's footprint; grows with entanglement,
    # so re-evaluated as the trajectory fills
    stored: dict[int, Mps] = {0: psi.copy()}
    every = 1
    used = _mps_bytes(psi)
    for n in range(nt - 1):
        tebd.step(psi, u[n], u[n + 1], gates)
        if (n + 1) % every == 0:
            stored[n + 1] = psi.copy()
            used += _mps_bytes(psi)
            if used * (nt / (n + 2)) > config.memory_budget and every == 1:
                every = max(2, int(math.ceil(used * nt / (n + 2) / config.memory_budget)))
    final = psi
    alarm = final.truncation_weight > config.alarm_threshold

    chi = _prepared(config.target_state, config)
    p = mpslib.overlap(chi, final)
    grad = np.empty(nt)
    segment: dict[int, Mps] = {}
    for n in range(nt - 1, -1, -1):
        if n == nt - 1:
            psi_n = final
        elif n in stored:
            psi_n = stored[n]
        else:
            if n not in segment:
                start = max(k for k in stored if k <= n)
                segment = {}
                cur = stored[start].copy()
                for j in range(start, n):
                    tebd.step(cur, u[j], u[j + 1], gates)
                    segment[j + 1] = cur.copy()
            psi_n = segment[n]
        m = np.sum(mpslib.cross_matrix_elements(chi, psi_n, diag))
        grad[n] = np.real(1j * np.conj(p) * m) * dt
        if n > 0:
            tebd.step_adjoint(chi, u[n - 1], u[n], gates)
    grad[0] *= 0.5
    grad[-1] *= 0.5
    alarm = alarm or chi.truncation_weight > config.alarm_threshold
    fid = abs(p) ** 2
    return fid, grad, complex(p), alarm


def cost_and_gradient(config: CostConfig, controls: ControlGrid) -> GradientResult:
    """Total cost and its exact gradient with respect to every control value."""
    j_a, j_g, g_a, g_g = regularizer_costs(controls, config.alpha, config.gamma)
    if config.include_fidelity:
        if config.dense:
            _, fid, g_f, p = fock.dense_fidelity_gradient(
                config.initial_state, config.target_state, controls, split=True)
            alarm = False
        else:
            fid, g_f, p, alarm = _mps_fidelity_gradient(config, controls)
        j_f = 0.5 * (1.0 - fid)
    else:
        fid, g_f, p, alarm, j_f = 0.0, np.zeros(controls.n_t), 0j, False, 0.0
    total = j_f + j_a + j_g
    if not np.isfinite(total):
        raise FloatingPointError("non-finite cost")
    grad = g_f + g_a + g_g
    if controls.clamp_endpoints:
        grad[0] = grad[-1] = 0.0
    return GradientResult(total, float(fid), grad, complex(p), bool(alarm), j_f, j_a, j_g)


def total_cost(config: CostConfig, controls: ControlGrid) -> float:
    """Cost from a forward pass only (used for finite-difference probing)."""
    j_a, j_g, _, _ = regularizer_costs(controls, config.alpha, config.gamma)
    j_f = 0.0
    if config.include_fidelity:
        fid, _, _ = forward_fidelity(config, controls)
        j_f = 0.5 * (1.0 - fid)
    return j_f + j_a + j_g


# ---------------------------------------------------------------------------
# Homotopy in dt and optimization
# ---------------------------------------------------------------------------

def refine_control(controls: ControlGrid) -> ControlGrid:
    """Halve ``dt``; every inserted point copies the old point just before it."""
    u = controls.values
    return replace(controls, dt=controls.dt / 2, values=np.repeat(u, 2)[:-1])


@dataclass
class Stage:
    dt: float
    max_iter: int = 200


@dataclass
class OptimizationRecord:
    iterations: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    controls: ControlGrid | None = None
    fidelity: float = float("nan")
    cost: float = float("nan")

    def stage_costs(self, stage: int) -> np.ndarray:
        return np.array([it["cost"] for it in self.iterations if it["stage"] == stage])

    def to_jsonl(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            for it in self.iterations:
                row = dict(it)
                row["controls"] = list(map(float, row["controls"]))
                fh.write(json.dumps(row) + "\n")
            summary = {"summary": True, "fidelity": self.fidelity, "cost": self.cost,
                       "stages": self.stages, "dt": self.controls.dt,
                       "controls": self.controls.values.tolist()}
            summary.update(extra or {})
            fh.write(json.dumps(summary) + "\n")


def _projected_gradient_norm(x, g, lo, hi):
    pg = np.where((x <= lo) & (g > 0), 0.0, g)
    pg = np.where((x >= hi) & (g < 0), 0.0, pg)
    return float(np.max(np.abs(pg))) if len(pg) else 0.0


def optimize(config: CostConfig, controls: ControlGrid, schedule: Sequence[Stage] | None = None,
             max_time: float | None = None, gtol: float = 1e-10,
             callback: Callable[[dict], None] | None = None) -> OptimizationRecord:
    """Bound-constrained L-BFGS-B over each homotopy stage, refining ``dt`` in between.

    Stage ``dt`` values must be non-increasing and reachable from
    ``controls.dt`` by halving.
    """
    schedule = list(schedule or [Stage(controls.dt)])
    dts = [s.dt for s in schedule]
    if any(b > a + 1e-15 for a, b in zip(dts, dts[1:])):
        raise ValueError("homotopy dt values must be non-increasing")
    record = OptimizationRecord()
    current = controls.with_values(np.clip(controls.values, *controls.bounds))
    t0 = time.monotonic()
    for k, stage in enumerate(schedule):
        while current.dt > stage.dt * (1 + 1e-9):
            current = refine_control(current)
        if not math.isclose(current.dt, stage.dt, rel_tol=1e-9):
            raise ValueError(f"stage dt {stage.dt} not reachable by halving {controls.dt}")
        current = replace(current, dt=stage.dt)
        lo, hi = current.bounds
        lower = np.full(current.n_t, lo)
        upper = np.full(current.n_t, hi)
        if current.clamp_endpoints:
            lower[[0, -1]] = upper[[0, -1]] = current.values[[0, -1]]
        cache: dict = {}

        def evaluate(x, _grid=current, _cache=cache):
            key = x.tobytes()
            if key not in _cache:
                _cache.clear()
                _cache[key] = cost_and_gradient(config, _grid.with_values(x))
            return _cache[key]

        def fun(x):
            r = evaluate(x)
            return r.total_cost, r.gradient

        def log_iterate(x, status="iterate", _k=k, _lower=lower, _upper=upper):
            r = evaluate(np.asarray(x, float))
            row = {"stage": _k, "dt": current.dt, "iteration": len(record.iterations),
                   "cost": r.total_cost, "fidelity": r.fidelity,
                   "grad_norm": _projected_gradient_norm(x, r.gradient, _lower, _upper),
                   "truncation_alarm": r.truncation_alarm, "status": status,
                   "elapsed": time.monotonic() - t0, "controls": np.array(x, float)}
            record.iterations.append(row)
            if callback:
                callback(row)

        log_iterate(current.values, "start")
        stop = {"time": False}

        def cb(intermediate_result):
            log_iterate(intermediate_result.x)
            if max_time is not None and time.monotonic() - t0 > max_time:
                stop["time"] = True
                raise StopIteration

        res = minimize(fun, current.values, jac=True, method="L-BFGS-B",
                       bounds=list(zip(lower, upper)), callback=cb,
                       options={"maxiter": stage.max_iter, "gtol": gtol, "ftol": 1e-15,
                                "maxcor": 20})
        x_best = np.clip(res.x, lower, upper)
        status = "time_limit" if stop["time"] else (
            "converged" if res.success else f"stopped: {res.message}")
        current = current.with_values(x_best)
        final = evaluate(current.values)
        record.stages.append({"stage": k, "dt": current.dt, "n_t": current.n_t,
                              "iterations": int(res.nit), "status": status,
                              "cost": final.total_cost, "fidelity": final.fidelity})
        log.info("stage %d (dt=%g): %s, F=%.8f", k, current.dt, status, final.fidelity)
        if stop["time"]:
            break
    record.controls = current
    last = cost_and_gradient(config, current)
    record.fidelity, record.cost = last.fidelity, last.total_cost
    return record


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

@dataclass
class SeedSpec:
    """Reference ramp plus random Fourier components.

    ``reference`` is ``"linear_vx"`` (linear in lattice depth between the
    end-point depths), ``"linear_u"`` or a callable ``s -> u`` on ``s = t/T``.
    ``frequency_range`` is in cycles per duration.
    """

    reference: str | Callable = "linear_vx"
    n_fourier: int = 6
    amplitude_scale: float = 2.0
    frequency_range: tuple[float, float] = (0.5, 6.0)
    rng_seed: int | np.random.SeedSequence = 0
    vx_start: float = 3.0
    vx_end: float = 13.0


def reference_ramp(spec: SeedSpec, s: np.ndarray, table=None, u_start=None, u_end=None):
    s = np.asarray(s, float)
    if callable(spec.reference):
        return np.asarray(spec.reference(s), float)
    if spec.reference == "linear_vx":
        if table is None:
            raise ValueError("linear_vx reference needs a constitutive table")
        return table.ratio_at(spec.vx_start + s * (spec.vx_end - spec.vx_start))
    if spec.reference == "linear_u":
        return u_start + s * (u_end - u_start)
    raise ValueError(f"unknown reference {spec.reference!r}")


def generate_seed(spec: SeedSpec, duration: float, dt: float, table=None,
                  bounds: tuple[float, float] | None = None, endpoints=None,
                  clamp_endpoints: bool = True) -> ControlGrid:
    """Seed control on the grid ``0, dt, ..., duration``, clipped to ``bounds``.

    With a table, bounds default to the table's and end points to the ratios
    at ``vx_start``/``vx_end``.
    """
    n_t = int(round(duration / dt)) + 1
    if table is not None:
        bounds = bounds or table.bounds
        endpoints = endpoints or (float(table.ratio_at(spec.vx_start)),
                                  float(table.ratio_at(spec.vx_end)))
    if bounds is None:
        raise ValueError("bounds required without a table")
    s = np.linspace(0.0, 1.0, n_t)
    u_start, u_end = endpoints if endpoints is not None else (None, None)
    u = reference_ramp(spec, s, table, u_start, u_end)
    rng = np.random.default_rng(spec.rng_seed)
    if spec.n_fourier > 0:
        amps = rng.uniform(-1, 1, spec.n_fourier) * spec.amplitude_scale
        freqs = rng.uniform(*spec.frequency_range, spec.n_fourier)
        phases = rng.uniform(0, 2 * np.pi, spec.n_fourier)
        u = u + np.sin(2 * np.pi * np.outer(s, freqs) + phases) @ amps
    u = np.clip(u, *bounds)
    if clamp_endpoints and endpoints is not None:
        u[0], u[-1] = endpoints
    return ControlGrid(dt, u, tuple(bounds), clamp_endpoints)


# ---------------------------------------------------------------------------
# Parametrized controls
# ---------------------------------------------------------------------------

class FourierTerm:
    """``a sin(w t) + b cos(w t)`` with parameters ``(a, b)``."""

    n_params = 2

    def __init__(self, omega: float):
        self.omega = omega

    def value(self, t, theta):
        a, b = theta
        return a * np.sin(self.omega * t) + b * np.cos(self.omega * t)

    def jacobian(self, t, theta):
        return np.stack([np.sin(self.omega * t), np.cos(self.omega * t)], axis=1)


class ConstantTerm:
    n_params = 1

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def value(self, t, theta):
        return np.full(np.shape(t), theta[0] * self.scale)

    def jacobian(self, t, theta):
        return np.full((len(t), 1), self.scale)


class SmoothBang:
    """Gaussian bump with parameters ``(height, center, width)``."""

    n_params = 3

    def value(self, t, theta):
        h, c, w = theta
        return h * np.exp(-0.5 * ((t - c) / w) ** 2)

    def jacobian(self, t, theta):
        h, c, w = theta
        z = (t - c) / w
        g = np.exp(-0.5 * z**2)
        return np.stack([g, h * g * z / w, h * g * z**2 / w], axis=1)


@dataclass
class CrabParametrization:
    """``u(t; theta) = u_ref(t) + sum_l f_l(t; theta_l)``."""

    reference: Callable[[np.ndarray], np.ndarray]
    basis_functions: list
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        if len(self.theta) != sum(f.n_params for f in self.basis_functions):
            raise ValueError("theta length does not match the basis functions")

    def _slices(self):
        start = 0
        for f in self.basis_functions:
            yield f, slice(start, start + f.n_params)
            start += f.n_params

    def sample(self, times, theta=None):
        theta = self.theta if theta is None else np.asarray(theta, float)
        u = np.asarray(self.reference(times), float).copy()
        for f, sl in self._slices():
            u += f.value(times, theta[sl])
        return u

    def jacobian(self, times, theta=None):
        """``du_n/dtheta_i`` as an ``(n_t, M)`` array."""
        theta = self.theta if theta is None else np.asarray(theta, float)
        jac = np.zeros((len(times), len(theta)))
        for f, sl in self._slices():
            jac[:, sl] = f.jacobian(times, theta[sl])
        return jac


def crab_gradient(parametrization: CrabParametrization, config: CostConfig, dt: float,
                  n_t: int, theta=None, bounds=(-np.inf, np.inf)):
    """Cost and its gradient in ``theta`` by the chain rule through the grid gradient."""
    times = np.arange(n_t) * dt
    grid = ControlGrid(dt, parametrization.sample(times, theta), bounds, clamp_endpoints=False)
    res = cost_and_gradient(config, grid)
    return res.total_cost, parametrization.jacobian(times, theta).T @ res.gradient
