"""Command-line entry point.

Subcommands: ``solve`` (single trajectory optimization), ``benchmark``
(budget-ladder sweep), ``simulate`` (replanning mission), ``check``
(feasibility audit of a trajectory CSV).  All parameters live in a YAML
config file with flag overrides; unknown config keys are rejected.  Exit
codes: 0 ok, 1 bad config/input, 2 non-convergence, 3 mission abort,
4 infeasibility.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .benchmark import (
    BenchmarkError,
    TABLE1_BUDGETS,
    extend_to_3d,
    load_op_instance,
    run_benchmark,
    score_collection,
    solve_kop,
    emit_table,
    tsiligirides2,
)
from .model import (
    CostWeights,
    KinematicBounds,
    ModelError,
    ProblemInstance,
    SensorModel,
    TargetSpec,
    VehicleState,
)
from .replan import (
    ReplanConfig,
    ReplanError,
    interception_metrics,
    run_mission,
    trefoil_mission,
)
from .solver import SolverError
from .transcription import (
    PlannedTrajectory,
    TranscriptionError,
    check_feasibility,
    sample_trajectory,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NO_CONVERGENCE = 2
EXIT_MISSION_ABORT = 3
EXIT_INFEASIBLE = 4

FMT = "%.17g"


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration entries."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "instance": "tsiligirides2",
    "seed": 0,
    "engine": "builtin",
    "jobs": 1,
    "deadline": None,
    "output_dir": "out",
    "extend_3d": {"enabled": False, "seed": 0, "z_min": 1.0, "z_max": 11.0},
    "horizon": {"n_h": 200, "c_max": 40.0},
    "bounds": {"v_max": 3.0, "a_max": 1.5, "j_max": 30.0, "psi_rate_max": 1.5},
    "weights": {"k_psi": 0.01, "c_u": [1e-3, 1e-3, 1e-3, 1e-3, 0.0], "k_f": 10.0},
    "sensor": {"c_b": 0.05, "n_b": 2},
    "solver": {"max_iterations": 8000, "options": {}},
    "benchmark": {"budgets": [list(b) for b in TABLE1_BUDGETS], "repeats": 10,
                  "magnitude": 0.05, "threshold": 0.05},
    "mission": {"t_replan": 0.9, "n_reuses": 3, "n_h": 12, "t_h": 4.0,
                "deadline_fraction": 0.85, "duration": 60.0,
                "n_targets": 3, "scale": 0.3, "g0": 10.0, "alpha_g": 1.0,
                "c_b": 0.1, "n_b": 2, "planner_cb_scale": 10.0,
                "max_iterations": 4000, "targets": None},
    "check": {"dt": 0.01, "tol": 1e-3},
}


def _merge_validated(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` into ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and base[key] and key not in (
                "options",):
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge_validated(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict = None) -> dict:
    """Defaults, optionally overlaid with a YAML file and then CLI flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        cfg = _merge_validated(cfg, data)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        section = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            section = section[part]
        section[leaf] = val
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    if cfg["deadline"] is not None and not (float(cfg["deadline"]) > 0):
        raise ConfigError("deadline must be positive")
    if not cfg["benchmark"]["budgets"]:
        raise ConfigError("benchmark budget list must not be empty")
    for row in cfg["benchmark"]["budgets"]:
        if len(row) != 2 or not (float(row[0]) > 0) or int(row[1]) < 2:
            raise ConfigError(f"bad budget row {row!r}; expected [c_max, n_h]")
    hz = cfg["horizon"]
    if not (float(hz["c_max"]) > 0) or int(hz["n_h"]) < 2:
        raise ConfigError("horizon requires c_max > 0 and n_h >= 2")
    try:
        _bounds(cfg)
        _weights(cfg)
        _sensor(cfg)
    except ModelError as exc:
        raise ConfigError(str(exc))


def _bounds(cfg) -> KinematicBounds:
    return KinematicBounds(**{k: float(v) for k, v in cfg["bounds"].items()})


def _weights(cfg) -> CostWeights:
    w = cfg["weights"]
    return CostWeights(k_psi=float(w["k_psi"]), c_u=np.asarray(w["c_u"], float),
                       k_f=float(w["k_f"]))


def _sensor(cfg) -> SensorModel:
    return SensorModel(c_b=float(cfg["sensor"]["c_b"]), n_b=int(cfg["sensor"]["n_b"]))


def _load_instance(cfg):
    name = cfg["instance"]
    if name == "tsiligirides2":
        inst = tsiligirides2()
    else:
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"instance file not found: {path}")
        inst = load_op_instance(path)
    e3 = cfg["extend_3d"]
    if e3["enabled"]:
        inst = extend_to_3d(inst, int(e3["seed"]),
                            z_band=(float(e3["z_min"]), float(e3["z_max"])))
    return inst


def _outdir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# trajectory CSV round-trip
# ---------------------------------------------------------------------------

def write_trajectory_csv(traj: PlannedTrajectory, path) -> None:
    """One row per step: index, step length, knot state, input, knot gains."""
    n_t = traj.gains.shape[1]
    header = (["k", "t_k", "t_sum", "px", "py", "pz", "vx", "vy", "vz",
               "ax", "ay", "az", "psi", "jx", "jy", "jz", "psi_rate"]
              + [f"g{i}" for i in range(n_t)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(traj.n_steps):
            row = ([k, traj.t_steps[k], traj.t_sum[k]]
                   + list(traj.p[k]) + list(traj.v[k]) + list(traj.a[k])
                   + [traj.psi[k]] + list(traj.j[k]) + [traj.psi_rate[k]]
                   + list(traj.gains[k]))
            writer.writerow([row[0]] + [FMT % v for v in row[1:]])


def read_trajectory_csv(path) -> PlannedTrajectory:
    """Rebuild a PlannedTrajectory from a solve CSV (terminal knot re-propagated)."""
    from .model import ControlInput, propagate_state

    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory file: {exc}")
    if len(rows) < 2:
        raise ConfigError("trajectory file has no data rows")
    header = rows[0]
    base = ["k", "t_k", "t_sum", "px", "py", "pz", "vx", "vy", "vz",
            "ax", "ay", "az", "psi", "jx", "jy", "jz", "psi_rate"]
    if header[:len(base)] != base:
        raise ConfigError("unrecognized trajectory CSV header")
    n_t = len(header) - len(base)
    try:
        data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"malformed trajectory row: {exc}")
    if data.shape[1] != len(base) - 1 + n_t:
        raise ConfigError("inconsistent trajectory column count")
    t_steps = data[:, 0]
    p, v, a = data[:, 2:5], data[:, 5:8], data[:, 8:11]
    psi = data[:, 11]
    j, psi_rate = data[:, 12:15], data[:, 15]
    gains = data[:, 16:16 + n_t]
    last = propagate_state(
        VehicleState(p=p[-1], v=v[-1], a=a[-1], psi=psi[-1]),
        ControlInput(j=j[-1], psi_rate=psi_rate[-1], t_step=float(t_steps[-1])))
    return PlannedTrajectory(
        p=np.vstack([p, last.p]), v=np.vstack([v, last.v]),
        a=np.vstack([a, last.a]), psi=np.append(psi, last.psi),
        gains=np.vstack([gains, gains[-1:]]) if n_t else np.zeros((len(t_steps) + 1, 0)),
        t_sum=np.concatenate([[0.0], np.cumsum(t_steps)]),
        j=j, psi_rate=psi_rate, t_steps=t_steps)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(cfg: dict) -> int:
    inst = _load_instance(cfg)
    out = _outdir(cfg)
    traj = solve_kop(
        inst, float(cfg["horizon"]["c_max"]), int(cfg["horizon"]["n_h"]),
        engine=cfg["engine"], sensor=_sensor(cfg),
        max_iterations=int(cfg["solver"]["max_iterations"]),
        deadline=cfg["deadline"], seed=int(cfg["seed"]),
        solver_options=dict(cfg["solver"]["options"]),
        bounds=_bounds(cfg), weights=_weights(cfg))
    write_trajectory_csv(traj, out / "trajectory.csv")
    summary = {
        "instance": inst.name,
        "c_max": float(cfg["horizon"]["c_max"]),
        "n_h": int(cfg["horizon"]["n_h"]),
        "seed": int(cfg["seed"]),
        "engine": cfg["engine"],
        "objective": traj.objective,
        "converged": bool(traj.converged),
        "collected_reward": score_collection(
            traj, inst, float(cfg["benchmark"]["threshold"]), _sensor(cfg)),
        "iterations": int(traj.stats.iterations),
        "wall_time": float(traj.stats.wall_time),
        "constraint_violation": float(traj.stats.constraint_violation),
        "optimality": float(traj.stats.optimality),
        "message": traj.stats.message,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"collected reward: {summary['collected_reward']:g} "
          f"({'converged' if traj.converged else 'not converged'})")
    return EXIT_OK if traj.converged else EXIT_NO_CONVERGENCE


def cmd_benchmark(cfg: dict) -> int:
    inst = _load_instance(cfg)
    out = _outdir(cfg)
    bm = cfg["benchmark"]
    runs = run_benchmark(
        inst, budgets=[(float(c), int(n)) for c, n in bm["budgets"]],
        repeats=int(bm["repeats"]), seed=int(cfg["seed"]), engine=cfg["engine"],
        sensor=_sensor(cfg), magnitude=float(bm["magnitude"]),
        threshold=float(bm["threshold"]),
        max_iterations=int(cfg["solver"]["max_iterations"]),
        deadline=cfg["deadline"], jobs=int(cfg["jobs"]),
        solver_options=dict(cfg["solver"]["options"]))
    _, text = emit_table(runs, csv_path=out / "table.csv",
                         text_path=out / "table.txt")
    print(text, end="")
    return EXIT_OK


def _mission_instance(cfg) -> ProblemInstance:
    m = cfg["mission"]
    sensor = SensorModel(c_b=float(m["c_b"]), n_b=int(m["n_b"]))
    if m["targets"]:
        targets = [TargetSpec(q0=np.asarray(t["q0"], float), g0=float(t["g0"]),
                              alpha_g=float(t.get("alpha_g", 0.0)))
                   for t in m["targets"]]
        return ProblemInstance(targets=targets, sensor=sensor,
                               bounds=_bounds(cfg), weights=_weights(cfg))
    return trefoil_mission(n_targets=int(m["n_targets"]), scale=float(m["scale"]),
                           g0=float(m["g0"]), alpha_g=float(m["alpha_g"]),
                           sensor=sensor)


def cmd_simulate(cfg: dict) -> int:
    m = cfg["mission"]
    out = _outdir(cfg)
    inst = _mission_instance(cfg)
    replan = ReplanConfig(
        t_replan=float(m["t_replan"]), n_reuses=int(m["n_reuses"]),
        n_h=int(m["n_h"]), t_h=float(m["t_h"]),
        deadline_fraction=float(m["deadline_fraction"]),
        mission_duration=float(m["duration"]), seed=int(cfg["seed"]),
        planner_cb_scale=float(m["planner_cb_scale"]))
    log = run_mission(inst, replan, engine=cfg["engine"],
                      max_iterations=int(m["max_iterations"]),
                      solver_options=dict(cfg["solver"]["options"]))
    with open(out / "events.jsonl", "w") as fh:
        for e in log.events:
            fh.write(json.dumps({"t": e.t, "kind": e.kind, **e.data},
                                sort_keys=True) + "\n")
    t, states, gains, q = log.history()
    n_t = gains.shape[1] if gains.size else inst.n_targets
    with open(out / "states.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "px", "py", "pz", "vx", "vy", "vz",
                         "ax", "ay", "az", "psi"])
        for ti, row in zip(t, states):
            writer.writerow([FMT % ti] + [FMT % v for v in row])
    with open(out / "gains.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"g{i}" for i in range(n_t)]
                        + [f"q{i}{ax}" for i in range(n_t) for ax in "xyz"])
        for ti, g, qt in zip(t, gains, q):
            writer.writerow([FMT % ti] + [FMT % v for v in g]
                            + [FMT % v for v in qt.ravel()])
    metrics = interception_metrics(log, radius=0.25)
    with open(out / "metrics.json", "w") as fh:
        json.dump({"aborted": log.aborted, "interceptions": metrics},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mission {'aborted' if log.aborted else 'completed'}; "
          f"interceptions: {[m_['count'] for m_ in metrics]}")
    return EXIT_MISSION_ABORT if log.aborted else EXIT_OK


def cmd_check(cfg: dict, trajectory_path) -> int:
    traj = read_trajectory_csv(trajectory_path)
    samples = sample_trajectory(traj, float(cfg["check"]["dt"]))
    report = check_feasibility(samples, _bounds(cfg),
                               tol=float(cfg["check"]["tol"]))
    print(report)
    return EXIT_OK if report.ok else EXIT_INFEASIBLE


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtmpc",
        description="Variable time-step MPC trajectory optimization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--engine", help="NLP engine name")
        p.add_argument("--jobs", type=int, help="parallel benchmark workers")
        p.add_argument("--deadline", type=float, help="per-solve deadline (s)")
        p.add_argument("--output-dir", help="output directory")
        p.add_argument("--instance", help="instance file or 'tsiligirides2'")

    p = sub.add_parser("solve", help="single trajectory optimization")
    common(p)
    p.add_argument("--c-max", type=float, help="travel budget (s)")
    p.add_argument("--n-h", type=int, help="horizon steps")

    p = sub.add_parser("benchmark", help="budget-ladder benchmark sweep")
    common(p)
    p.add_argument("--repeats", type=int, help="solves per budget")

    p = sub.add_parser("simulate", help="replanning mission simulation")
    common(p)
    p.add_argument("--duration", type=float, help="mission duration (s)")

    p = sub.add_parser("check", help="feasibility audit of a trajectory CSV")
    common(p)
    p.add_argument("trajectory", help="trajectory CSV file")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "engine": args.engine,
        "jobs": args.jobs,
        "deadline": args.deadline,
        "output_dir": getattr(args, "output_dir", None),
        "instance": args.instance,
    }
    if args.command == "solve":
        overrides["horizon.c_max"] = args.c_max
        overrides["horizon.n_h"] = args.n_h
    if args.command == "benchmark":
        overrides["benchmark.repeats"] = args.repeats
    if args.command == "simulate":
        overrides["mission.duration"] = args.duration
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "check":
            return cmd_check(cfg, args.trajectory)
    except (ConfigError, BenchmarkError, ModelError, TranscriptionError,
            SolverError, ReplanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
