import json

import numpy as np
import pytest
import yaml

from vtmpc.cli import (
    ConfigError,
    DEFAULT_CONFIG,
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    EXIT_MISSION_ABORT,
    EXIT_NO_CONVERGENCE,
    EXIT_OK,
    load_config,
    main,
    read_trajectory_csv,
    write_trajectory_csv,
)


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_defaults_load_without_file():
    cfg = load_config()
    assert cfg == DEFAULT_CONFIG


def test_unknown_keys_rejected(tmp_path):
    for bad in ({"no_such_key": 1},
                {"horizon": {"n_h": 10, "typo": 3}},
                {"mission": {"durations": 5}}):
        with pytest.raises(ConfigError):
            load_config(write_yaml(tmp_path / "c.yaml", bad))


def test_config_overlays_and_flag_overrides(tmp_path):
    path = write_yaml(tmp_path / "c.yaml",
                      {"seed": 5, "horizon": {"c_max": 12.0}})
    cfg = load_config(path, {"seed": 9, "horizon.n_h": 40})
    assert cfg["seed"] == 9                       # flag beats file
    assert cfg["horizon"]["c_max"] == 12.0        # file beats default
    assert cfg["horizon"]["n_h"] == 40
    assert cfg["engine"] == "builtin"             # untouched default


def test_config_value_validation(tmp_path):
    for bad in ({"jobs": 0}, {"deadline": -1.0},
                {"benchmark": {"budgets": []}},
                {"benchmark": {"budgets": [[5.0]]}},
                {"horizon": {"c_max": -1.0}},
                {"bounds": {"v_max": -3.0}},
                {"sensor": {"c_b": 0.0}}):
        with pytest.raises(ConfigError):
            load_config(write_yaml(tmp_path / "c.yaml", bad))


def test_malformed_yaml_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("a: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(str(path))
    path.write_text("- just\n- a\n- list\n")
    with pytest.raises(ConfigError):
        load_config(str(path))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))


def test_bad_config_exit_code(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", {"bogus": True})
    assert main(["solve", "--config", path]) == EXIT_CONFIG
    assert main(["solve", "--instance", str(tmp_path / "nope.txt"),
                 "--output-dir", str(tmp_path / "out")]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# solve / check round trip
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def solve_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    cfg = tmp_path_factory.mktemp("cfg") / "c.yaml"
    cfg.write_text(yaml.safe_dump({"solver": {"max_iterations": 300}}))
    code = main(["solve", "--config", str(cfg), "--c-max", "5", "--n-h", "25",
                 "--seed", "1", "--output-dir", str(out)])
    return out, code


def test_solve_outputs(solve_run):
    out, code = solve_run
    assert code in (EXIT_OK, EXIT_NO_CONVERGENCE)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["c_max"] == 5.0 and summary["n_h"] == 25
    assert summary["collected_reward"] >= 0.0
    assert (code == EXIT_OK) == summary["converged"]
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header.startswith("k,t_k,t_sum,px,py,pz,")
    assert len((out / "trajectory.csv").read_text().splitlines()) == 26


def test_trajectory_csv_roundtrip(solve_run):
    out, _ = solve_run
    traj = read_trajectory_csv(out / "trajectory.csv")
    assert traj.n_steps == 25
    # re-serializing reproduces the file byte-for-byte (17 sig digits)
    copy = out / "copy.csv"
    write_trajectory_csv(traj, copy)
    assert copy.read_text() == (out / "trajectory.csv").read_text()
    # budget and step bounds survive the round trip
    assert np.sum(traj.t_steps) == pytest.approx(5.0, abs=1e-9)
    assert np.all(traj.t_steps >= 0.1 - 1e-9)


def test_check_accepts_solver_output(solve_run, capsys):
    out, _ = solve_run
    assert main(["check", str(out / "trajectory.csv")]) == EXIT_OK
    assert "feasibility: OK" in capsys.readouterr().out


def test_check_flags_infeasible(solve_run, tmp_path):
    out, _ = solve_run
    lines = (out / "trajectory.csv").read_text().splitlines()
    cols = lines[0].split(",")
    jx = cols.index("jx")
    rows = [lines[0]]
    for line in lines[1:]:
        f = line.split(",")
        f[jx] = "1e6"  # crank one jerk axis far beyond the limit
        rows.append(",".join(f))
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(rows) + "\n")
    assert main(["check", str(bad)]) == EXIT_INFEASIBLE


def test_check_rejects_malformed(tmp_path):
    bad = tmp_path / "junk.csv"
    bad.write_text("not,a,trajectory\n1,2,3\n")
    assert main(["check", str(bad)]) == EXIT_CONFIG
    bad.write_text("")
    assert main(["check", str(bad)]) == EXIT_CONFIG
    assert main(["check", str(tmp_path / "missing.csv")]) == EXIT_CONFIG


def test_solve_deterministic(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"solver": {"max_iterations": 120}}))
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["solve", "--config", str(cfg), "--c-max", "5", "--n-h", "25",
              "--seed", "3", "--output-dir", str(out)])
        texts.append((out / "trajectory.csv").read_text())
    assert texts[0] == texts[1]


# ---------------------------------------------------------------------------
# benchmark and simulate commands
# ---------------------------------------------------------------------------

def test_benchmark_writes_table(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {
        "benchmark": {"budgets": [[5.0, 25]], "repeats": 1},
        "solver": {"max_iterations": 120}})
    out = tmp_path / "out"
    assert main(["benchmark", "--config", cfg,
                 "--output-dir", str(out)]) == EXIT_OK
    table = (out / "table.csv").read_text().splitlines()
    assert table[0] == "c_max,n_h,best,mean,t_avg,convergence_rate"
    assert len(table) == 2
    assert (out / "table.txt").exists()
    assert "c_max" in capsys.readouterr().out


def test_simulate_writes_logs(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", {
        "mission": {"duration": 1.8, "max_iterations": 150}})
    out = tmp_path / "out"
    code = main(["simulate", "--config", cfg, "--output-dir", str(out)])
    assert code in (EXIT_OK, EXIT_MISSION_ABORT)
    events = [json.loads(l) for l in (out / "events.jsonl").read_text().splitlines()]
    assert events[0]["kind"] == "plan_started"
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["interceptions"]) == 3
    assert metrics["aborted"] == (code == EXIT_MISSION_ABORT)
    states = (out / "states.csv").read_text().splitlines()
    assert states[0] == "t,px,py,pz,vx,vy,vz,ax,ay,az,psi"
    assert len(states) > 100
    gains = (out / "gains.csv").read_text().splitlines()
    assert gains[0].startswith("t,g0,g1,g2,q0x")


def test_simulate_static_targets(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", {
        "mission": {"duration": 0.9, "max_iterations": 100,
                    "targets": [{"q0": [1.0, 0.0, 0.0], "g0": 5.0},
                                {"q0": [-1.0, 0.0, 0.0], "g0": 5.0,
                                 "alpha_g": 0.5}]}})
    out = tmp_path / "out"
    code = main(["simulate", "--config", cfg, "--output-dir", str(out)])
    assert code in (EXIT_OK, EXIT_MISSION_ABORT)
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["interceptions"]) == 2
