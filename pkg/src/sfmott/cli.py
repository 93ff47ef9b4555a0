"""Command-line entry point: ``sfmott <subcommand> [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime
error, 4 batch finished with some failed jobs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import grape, lattice, observables, runner, tebd

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_PARTIAL = 4


def _config(args) -> runner.RunConfig:
    cfg = runner.RunConfig.load(args.config) if args.config else runner.RunConfig.from_dict()
    overrides = {
        "output_dir": getattr(args, "output_dir", None),
        "parallelism": getattr(args, "parallelism", None),
        "backend": getattr(args, "backend", None),
        "durations_sim": getattr(args, "durations", None),
        "seeds.count": getattr(args, "seeds", None),
        "seeds.master_seed": getattr(args, "master_seed", None),
    }
    return cfg.with_overrides(**overrides)


def _read_controls(path, dt: float | None) -> grape.ControlGrid:
    """Controls from a ``t,u`` CSV or from the summary line of a job record."""
    path = Path(path)
    if path.suffix == ".jsonl":
        row = json.loads(path.read_text().strip().splitlines()[-1])
        return grape.ControlGrid(row["dt"], row["controls"])
    rows = [r for r in csv.reader(line for line in path.open() if not line.startswith("#"))]
    header, body = rows[0], np.array(rows[1:], dtype=float)
    t = body[:, header.index("t_sim") if "t_sim" in header else 0]
    u = body[:, header.index("u")]
    step = dt if dt is not None else float(t[1] - t[0])
    if not np.allclose(np.diff(t), step, rtol=1e-9, atol=1e-12):
        raise runner.ConfigError([f"control times in {path} are not on a regular grid"])
    return grape.ControlGrid(step, u)


def cmd_lattice_table(args) -> int:
    cfg = _config(args)
    table = runner.load_table(cfg)
    text = table.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    lo, hi = table.bounds
    print(f"E_R/h = {cfg.lattice_params.recoil_energy / 6.62607015e-34:.6g} Hz, "
          f"u range [{lo:.6g}, {hi:.6g}]", file=sys.stderr)
    return EXIT_OK


def cmd_ground_states(args) -> int:
    cfg = _config(args)
    problem = runner.build_problem(cfg)
    paths = runner.save_ground_states(problem, Path(cfg.data["output_dir"]) / "states")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_propagate(args) -> int:
    cfg = _config(args)
    problem = runner.build_problem(cfg)
    controls = _read_controls(args.controls, args.dt)
    times, states, target = runner._best_trajectory(
        problem, {"dt": controls.dt, "controls": controls.values.tolist()})
    series = observables.MeritSeries.from_states(times, states, target)
    out = Path(cfg.data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    series.to_csv(out / "merit.csv", out / "occupations.csv")
    print(f"final F = {series.fidelity[-1]:.12f}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _config(args)
    problem = runner.build_problem(cfg)
    res = runner.run_job(problem, args.duration, args.seed_index, cfg.data["output_dir"])
    if res["status"] != "ok":
        print(res.get("error"), file=sys.stderr)
        return EXIT_RUNTIME
    print(f"T={args.duration:g} seed={args.seed_index}: F={res['fidelity']:.12f} "
          f"T_SI={res['T_SI_s'] * 1e3:.4g} ms -> {res['record_path']}")
    return EXIT_OK


def cmd_batch(args) -> int:
    cfg = _config(args)
    batch = runner.run_batch(cfg)
    for row in batch.summary()["best_fidelity_per_T"]:
        print(f"T={row['T_sim']:g}: best F={row['best_fidelity']:.10f} (seed {row['seed_index']})")
    if batch.failures:
        print(f"{len(batch.failures)} job(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_emit(args) -> int:
    batch = runner.load_batch(args.output_dir)
    kinds = runner.FIGURE_KINDS if args.kind == "all" else [args.kind]
    for kind in kinds:
        for p in runner.emit_figure_data(batch, kind, args.output_dir):
            print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfmott", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--output-dir")
        p.add_argument("--backend", choices=["mps", "dense"])

    p = sub.add_parser("lattice-table", help="tabulate J_x, U and U/J_x over the depth range")
    common(p)
    p.add_argument("--out", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_lattice_table)

    p = sub.add_parser("ground-states", help="compute and save the initial and target states")
    common(p)
    p.set_defaults(func=cmd_ground_states)

    p = sub.add_parser("propagate", help="evolve the initial state under a control file")
    common(p)
    p.add_argument("controls", help="CSV with t_sim,u columns or a job record (.jsonl)")
    p.add_argument("--dt", type=float)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("optimize", help="optimize a single (T, seed) job")
    common(p)
    p.add_argument("--duration", type=float, required=True, help="T in simulation units")
    p.add_argument("--seed-index", type=int, default=0)
    p.add_argument("--master-seed", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("batch", help="multistart optimization over durations and seeds")
    common(p)
    p.add_argument("--durations", type=float, nargs="+")
    p.add_argument("--seeds", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("emit", help="write figure data from a finished batch")
    p.add_argument("output_dir")
    p.add_argument("--kind", default="all", choices=list(runner.FIGURE_KINDS) + ["all"])
    p.set_defaults(func=cmd_emit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except runner.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (lattice.OutOfRangeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, tebd.ConvergenceError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
