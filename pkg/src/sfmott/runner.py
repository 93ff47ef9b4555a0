"""Run configuration, multistart batches, persistence and figure-data emission.

Per-job randomness comes from ``SeedSequence(master_seed, spawn_key=(T_key, seed_index))``
with ``T_key = round(1000 T)``, so adding durations or seeds never changes
the jobs that already exist, and results do not depend on scheduling.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import constants

from . import fock, grape, lattice, observables, tebd
from . import mps as mpslib

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "sfmott-config/1"
RECORD_SCHEMA = "sfmott-record/1"
INDEX_SCHEMA = "sfmott-index/1"
FIGURE_KINDS = ("f_vs_t", "controls", "occupations", "merit")

DEFAULT_CONFIG = {
    "schema": CONFIG_SCHEMA,
    "lattice": {
        "laser_wavelength_nm": 1064.0,
        "atom_mass_amu": 87.0,
        "scattering_length_a0": 101.0,
        "transverse_depths_ER": [20.0, 20.0],
        "table_samples": 116,
    },
    "system": {"n_sites": 4, "n_particles": 4, "local_dim": 5},
    "states": {"initial_vx_ER": 3.0, "target_vx_ER": 13.0},
    "caps": {"max_bond": 200, "sv_threshold": 1e-12},
    "backend": "mps",
    "durations_sim": [6.0],
    "stages": [
        {"dt_sim": 0.1, "max_iter": 200},
        {"dt_sim": 0.05, "max_iter": 100},
        {"dt_sim": 0.025, "max_iter": 100},
    ],
    "regularization": {"alpha": 1e-8, "gamma": 1e-8},
    "clamp_endpoints": True,
    "seeds": {
        "count": 20,
        "master_seed": 20240607,
        "reference": "linear_vx",
        "n_fourier": 6,
        "amplitude_scale": 4.0,
        "frequency_range_per_duration": [0.5, 4.0],
    },
    "job_time_limit_s": None,
    "output_dir": "sfmott-run",
    "parallelism": 1,
}


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Resolved run configuration (a validated nested dict with unit-suffixed keys)."""

    data: dict

    @classmethod
    def from_dict(cls, data: dict | None = None) -> "RunConfig":
        cfg = cls(_merge(DEFAULT_CONFIG, data or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(["config file must hold a mapping"])
        return cls.from_dict(raw)

    def with_overrides(self, **kw) -> "RunConfig":
        data = copy.deepcopy(self.data)
        for key, value in kw.items():
            if value is None:
                continue
            node = data
            *path, leaf = key.split(".")
            for p in path:
                node = node.setdefault(p, {})
            node[leaf] = value
        return RunConfig.from_dict(data)

    def validate(self) -> None:
        d, problems = self.data, []
        if d.get("schema") != CONFIG_SCHEMA:
            problems.append(f"schema must be {CONFIG_SCHEMA!r}")
        for key in ("initial_vx_ER", "target_vx_ER"):
            v = d["states"].get(key)
            if not isinstance(v, (int, float)) or not lattice.VX_MIN <= v <= lattice.VX_MAX:
                problems.append(f"states.{key}={v!r} outside [{lattice.VX_MIN}, {lattice.VX_MAX}] E_R")
        durations = d.get("durations_sim") or []
        if not durations or any(not isinstance(t, (int, float)) or t <= 0 for t in durations):
            problems.append("durations_sim must be a non-empty list of positive numbers")
        stages = d.get("stages") or []
        dts = [s.get("dt_sim") for s in stages]
        if not stages or any(not isinstance(x, (int, float)) or x <= 0 for x in dts):
            problems.append("stages need positive dt_sim values")
        else:
            if any(b > a for a, b in zip(dts, dts[1:])):
                problems.append("stage dt_sim values must be non-increasing")
            for a, b in zip(dts, dts[1:]):
                r = math.log2(a / b)
                if abs(r - round(r)) > 1e-9:
                    problems.append(f"stage dt {b} is not a power-of-two refinement of {a}")
            for t in durations:
                if isinstance(t, (int, float)) and t > 0:
                    n = t / dts[0]
                    if abs(n - round(n)) > 1e-9:
                        problems.append(f"duration {t} is not a multiple of dt {dts[0]}")
        s = d["system"]
        if s.get("n_sites", 0) < 2:
            problems.append("system.n_sites must be >= 2")
        if s.get("n_particles") != s.get("n_sites"):
            problems.append("system.n_particles must equal n_sites (unit filling)")
        if s.get("local_dim", 0) < 2:
            problems.append("system.local_dim must be >= 2")
        if d.get("backend") not in ("mps", "dense"):
            problems.append("backend must be 'mps' or 'dense'")
        if d["seeds"].get("count", 0) < 1:
            problems.append("seeds.count must be >= 1")
        if int(d.get("parallelism", 1)) < 1:
            problems.append("parallelism must be >= 1")
        for key in ("alpha", "gamma"):
            if d["regularization"].get(key, 0) < 0:
                problems.append(f"regularization.{key} must be >= 0")
        if problems:
            raise ConfigError(problems)

    # convenience accessors -------------------------------------------------
    @property
    def lattice_params(self) -> lattice.LatticeParams:
        lat = self.data["lattice"]
        return lattice.LatticeParams(
            laser_wavelength=lat["laser_wavelength_nm"] * 1e-9,
            atom_mass=lat["atom_mass_amu"] * constants.atomic_mass,
            scattering_length=lat["scattering_length_a0"]
            * constants.physical_constants["Bohr radius"][0],
            transverse_depths=tuple(lat["transverse_depths_ER"]),
        )

    @property
    def durations(self) -> list[float]:
        return [float(t) for t in self.data["durations_sim"]]

    @property
    def schedule(self) -> list[grape.Stage]:
        return [grape.Stage(float(s["dt_sim"]), int(s.get("max_iter", 100)))
                for s in self.data["stages"]]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)


def job_seed(master_seed: int, duration: float, seed_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(round(1000 * duration)),
                                                                int(seed_index)))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Problem set-up
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    """Everything shared by the jobs of one batch."""

    config: RunConfig
    table: lattice.ConstitutiveTable
    initial: object
    target: object
    u_initial: float
    u_target: float

    def cost_config(self) -> grape.CostConfig:
        caps = self.config.data["caps"]
        reg = self.config.data["regularization"]
        return grape.CostConfig(self.initial, self.target, alpha=reg["alpha"], gamma=reg["gamma"],
                                max_bond=caps["max_bond"], sv_threshold=caps["sv_threshold"])


def load_table(config: RunConfig, cache_dir=None) -> lattice.ConstitutiveTable:
    return lattice.build_table(config.lattice_params, config.data["lattice"]["table_samples"],
                               cache_dir=cache_dir)


def boundary_states(config: RunConfig, table: lattice.ConstitutiveTable):
    """Ground states at the initial and target depths in the configured backend.

    Returns ``(initial, target, u_initial, u_target)``.
    """
    s, caps, st = config.data["system"], config.data["caps"], config.data["states"]
    u0 = float(table.ratio_at(st["initial_vx_ER"]))
    u1 = float(table.ratio_at(st["target_vx_ER"]))
    if config.data["backend"] == "dense":
        basis = fock.FockBasis(s["n_sites"], s["n_particles"], s["local_dim"] - 1)
        return fock.ground_state(basis, u0)[1], fock.ground_state(basis, u1)[1], u0, u1
    seed = [1] * s["n_sites"]
    states = [tebd.ground_state_imaginary(seed, u, max_bond=caps["max_bond"],
                                          sv_threshold=caps["sv_threshold"],
                                          local_dim=s["local_dim"]) for u in (u0, u1)]
    return states[0], states[1], u0, u1


def build_problem(config: RunConfig, table=None) -> Problem:
    table = table or load_table(config)
    initial, target, u0, u1 = boundary_states(config, table)
    return Problem(config, table, initial, target, u0, u1)


def seed_spec(config: RunConfig, duration: float, seed_index: int) -> grape.SeedSpec:
    sd, st = config.data["seeds"], config.data["states"]
    f_lo, f_hi = sd["frequency_range_per_duration"]
    return grape.SeedSpec(reference=sd["reference"], n_fourier=sd["n_fourier"],
                          amplitude_scale=sd["amplitude_scale"], frequency_range=(f_lo, f_hi),
                          rng_seed=job_seed(sd["master_seed"], duration, seed_index),
                          vx_start=st["initial_vx_ER"], vx_end=st["target_vx_ER"])


def seed_control(problem: Problem, duration: float, seed_index: int) -> grape.ControlGrid:
    cfg = problem.config
    return grape.generate_seed(seed_spec(cfg, duration, seed_index), duration,
                               cfg.schedule[0].dt, table=problem.table,
                               endpoints=(problem.u_initial, problem.u_target),
                               clamp_endpoints=cfg.data["clamp_endpoints"])


# ---------------------------------------------------------------------------
# Jobs and batches
# ---------------------------------------------------------------------------

def record_path(output_dir, duration: float, seed_index: int) -> Path:
    return Path(output_dir) / "records" / f"T{duration:g}_s{seed_index:03d}.jsonl"


def run_job(problem: Problem, duration: float, seed_index: int, output_dir=None) -> dict:
    """Optimize one (T, seed) job and persist its record; never raises."""
    t0 = time.monotonic()
    result = {"schema": RECORD_SCHEMA, "summary": True, "T_sim": float(duration),
              "seed_index": int(seed_index), "status": "ok"}
    try:
        cfg = problem.config
        seed = seed_control(problem, duration, seed_index)
        initial_f = grape.forward_fidelity(problem.cost_config(), seed)[0]
        rec = grape.optimize(problem.cost_config(), seed, cfg.schedule,
                             max_time=cfg.data.get("job_time_limit_s"))
        controls = rec.controls
        violations = int(sum(np.any((np.asarray(it["controls"]) < controls.bounds[0] - 1e-12)
                                    | (np.asarray(it["controls"]) > controls.bounds[1] + 1e-12))
                             for it in rec.iterations))
        monotone = all(np.all(np.diff(rec.stage_costs(k)) <= 1e-12 * max(1.0, abs(c[0])))
                       for k in range(len(rec.stages)) for c in [rec.stage_costs(k)] if len(c))
        result.update({
            "fidelity": rec.fidelity, "cost": rec.cost, "initial_fidelity": initial_f,
            "dt": controls.dt, "controls": controls.values.tolist(),
            "T_SI_s": lattice.si_duration(problem.table, controls),
            "stages": rec.stages, "bound_violations": violations, "monotone_descent": monotone,
            "truncation_alarm": any(it["truncation_alarm"] for it in rec.iterations),
            "n_evaluations": len(rec.iterations),
        })
        if output_dir is not None:
            path = record_path(output_dir, duration, seed_index)
            lines = []
            for it in rec.iterations:
                row = dict(it)
                row["controls"] = np.asarray(row["controls"]).tolist()
                lines.append(json.dumps(row))
            result["record_path"] = str(path)
            result["elapsed_s"] = time.monotonic() - t0
            lines.append(json.dumps(result))
            _atomic_write(path, "\n".join(lines) + "\n")
    except Exception as exc:  # isolate per-job failures
        log.exception("job T=%g seed=%d failed", duration, seed_index)
        result.update({"status": "failed", "error": repr(exc),
                       "traceback": traceback.format_exc()})
        if output_dir is not None:
            path = record_path(output_dir, duration, seed_index)
            result["record_path"] = str(path)
            _atomic_write(path, json.dumps(result) + "\n")
    result["elapsed_s"] = time.monotonic() - t0
    return result


_WORKER_PROBLEM: Problem | None = None


def _init_worker(problem: Problem) -> None:
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _worker(duration: float, seed_index: int, output_dir):
    return run_job(_WORKER_PROBLEM, duration, seed_index, output_dir)


@dataclass
class BatchResult:
    jobs: list = field(default_factory=list)
    config: RunConfig | None = None
    output_dir: Path | None = None

    @property
    def failures(self) -> list:
        return [j for j in self.jobs if j.get("status") != "ok"]

    def best_by_duration(self) -> dict[float, dict]:
        best: dict[float, dict] = {}
        for j in self.jobs:
            if j.get("status") != "ok":
                continue
            t = j["T_sim"]
            if t not in best or j["fidelity"] > best[t]["fidelity"]:
                best[t] = j
        return dict(sorted(best.items()))

    def summary(self) -> dict:
        best = self.best_by_duration()
        return {"schema": "sfmott-summary/1",
                "n_jobs": len(self.jobs), "n_failed": len(self.failures),
                "best_fidelity_per_T": [{"T_sim": t, "best_fidelity": j["fidelity"],
                                         "seed_index": j["seed_index"], "T_SI_s": j["T_SI_s"]}
                                        for t, j in best.items()]}


def run_batch(config: RunConfig, problem: Problem | None = None,
              output_dir=None) -> BatchResult:
    """Run every (T, seed) job with a bounded worker pool.

    The resolved config is echoed to ``config.yaml`` in the output directory,
    each job record is written atomically, completed jobs are appended to
    ``index.jsonl`` by this process alone, and ``summary.json`` is rewritten
    at the end.
    """
    out = Path(output_dir or config.data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.yaml", config.to_yaml())
    problem = problem or build_problem(config)
    jobs = [(t, k) for t in config.durations for k in range(config.data["seeds"]["count"])]
    index = out / "index.jsonl"
    results = []

    def collect(res):
        results.append(res)
        with open(index, "a") as fh:
            fh.write(json.dumps({"schema": INDEX_SCHEMA, "T_sim": res["T_sim"],
                                 "seed_index": res["seed_index"], "status": res["status"],
                                 "fidelity": res.get("fidelity"),
                                 "record_path": res.get("record_path")}) + "\n")
        log.info("T=%g seed=%d: %s F=%s", res["T_sim"], res["seed_index"], res["status"],
                 res.get("fidelity"))

    n_workers = int(config.data.get("parallelism", 1))
    if n_workers == 1:
        for t, k in jobs:
            collect(run_job(problem, t, k, out))
    else:
        with ProcessPoolExecutor(n_workers, initializer=_init_worker,
                                 initargs=(problem,)) as pool:
            futures = [pool.submit(_worker, t, k, out) for t, k in jobs]
            for fut in as_completed(futures):
                collect(fut.result())
    order = {job: i for i, job in enumerate(jobs)}
    results.sort(key=lambda r: order[(r["T_sim"], r["seed_index"])])
    batch = BatchResult(results, config, out)
    _atomic_write(out / "summary.json", json.dumps(batch.summary(), indent=2))
    return batch


def load_batch(output_dir) -> BatchResult:
    """Rebuild a batch from its record files alone (e.g. after a crash)."""
    out = Path(output_dir)
    jobs = []
    for path in sorted((out / "records").glob("*.jsonl")):
        try:
            last = path.read_text().strip().splitlines()[-1]
            row = json.loads(last)
        except (OSError, IndexError, json.JSONDecodeError):
            continue
        if row.get("summary"):
            jobs.append(row)
    jobs.sort(key=lambda r: (r["T_sim"], r["seed_index"]))
    cfg_path = out / "config.yaml"
    config = RunConfig.load(cfg_path) if cfg_path.exists() else None
    return BatchResult(jobs, config, out)


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------

def _csv_writer(path: Path, kind: str, header):
    fh = open(path, "w", newline="")
    fh.write(f"# sfmott-{kind}/1\n")
    w = csv.writer(fh)
    w.writerow(header)
    return fh, w


def _best_trajectory(problem: Problem, job: dict):
    controls = grape.ControlGrid(job["dt"], job["controls"])
    u = controls.values
    target = problem.target
    if isinstance(problem.initial, fock.DenseState):
        prop = fock.DenseST(problem.initial.basis, controls.dt, split=True)
        states = [problem.initial]
        for n in range(len(u) - 1):
            states.append(fock.DenseState(problem.initial.basis,
                                          prop.step(states[-1].amplitudes, u[n], u[n + 1])))
    else:
        caps = problem.config.data["caps"]
        traj = tebd.propagate(problem.initial, controls, caps["max_bond"], caps["sv_threshold"],
                              store_states=True)
        states = traj.states
    return controls.times, states, target


def emit_figure_data(batch: BatchResult, kind: str, output_dir=None,
                     problem: Problem | None = None) -> list[Path]:
    """Write analysis-ready CSV files for one figure kind and return their paths.

    Every file starts with a ``# sfmott-<kind>/1`` schema line followed by a
    CSV header:

    * ``f_vs_t``: ``T_sim, seed_index, F, infidelity, J, T_SI_s``
    * ``controls``: ``T_sim, seed_index, t_sim, u, v_x_ER``
    * ``occupations``: ``T_sim, seed_index, t_sim, site, n`` (best seed per T)
    * ``merit``: ``T_sim, seed_index, t_sim, F, rho, eta`` (best seed per T)
    """
    if kind not in FIGURE_KINDS:
        raise ValueError(f"unknown figure kind {kind!r}; choose from {FIGURE_KINDS}")
    out = Path(output_dir or batch.output_dir or ".") / "figures"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.csv"
    ok = [j for j in batch.jobs if j.get("status") == "ok"]
    if kind == "f_vs_t":
        fh, w = _csv_writer(path, kind, ["T_sim", "seed_index", "F", "infidelity", "J", "T_SI_s"])
        with fh:
            for j in ok:
                w.writerow([j["T_sim"], j["seed_index"], repr(j["fidelity"]),
                            repr(1 - j["fidelity"]), repr(j["cost"]), repr(j["T_SI_s"])])
        return [path]
    if kind == "controls":
        table = problem.table if problem else (load_table(batch.config) if ok else None)
        fh, w = _csv_writer(path, kind, ["T_sim", "seed_index", "t_sim", "u", "v_x_ER"])
        with fh:
            for j in ok:
                u = np.asarray(j["controls"])
                vx = np.atleast_1d(table.depth_at(np.clip(u, *table.bounds)))
                for n, (un, vn) in enumerate(zip(u, vx)):
                    w.writerow([j["T_sim"], j["seed_index"], repr(n * j["dt"]), repr(float(un)),
                                repr(float(vn))])
        return [path]
    header = (["T_sim", "seed_index", "t_sim", "site", "n"] if kind == "occupations"
              else ["T_sim", "seed_index", "t_sim", "F", "rho", "eta"])
    fh, w = _csv_writer(path, kind, header)
    with fh:
        best = batch.best_by_duration()
        if best and problem is None:
            problem = build_problem(batch.config)
        for t, job in best.items():
            times, states, target = _best_trajectory(problem, job)
            series = observables.MeritSeries.from_states(times, states, target)
            for k, tk in enumerate(series.times):
                if kind == "occupations":
                    for i, n in enumerate(series.occupations[k]):
                        w.writerow([t, job["seed_index"], repr(tk), i, repr(float(n))])
                else:
                    w.writerow([t, job["seed_index"], repr(tk), repr(series.fidelity[k]),
                                repr(series.rho[k]), repr(series.eta[k])])
    return [path]


def save_ground_states(problem: Problem, output_dir) -> list[Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, state in (("initial", problem.initial), ("target", problem.target)):
        if isinstance(state, mpslib.Mps):
            p = out / f"{name}.npz"
            state.save(p)
        else:
            p = out / f"{name}.txt"
            _atomic_write(p, state.to_text())
        paths.append(p)
    return paths
