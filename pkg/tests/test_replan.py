import numpy as np
import pytest
from numpy.testing import assert_allclose

from vtmpc.model import (
    ControlInput,
    ProblemInstance,
    SensorModel,
    TargetSpec,
    VehicleState,
    butterworth,
    propagate_state,
    target_phase,
)
from vtmpc.replan import (
    MissionLog,
    PlanOutcome,
    ReplanConfig,
    ReplanError,
    interception_metrics,
    run_mission,
    step_targets,
    tracked_state,
    trajectory_exhausted,
    trefoil_mission,
)
from vtmpc.transcription import PlannedTrajectory


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def static_instance(p_target=(2.0, 0.0, 0.0), g0=10.0, alpha=0.0,
                    start=(0.0, 0.0, 0.0)):
    return ProblemInstance(
        targets=[TargetSpec(q0=np.asarray(p_target, float), g0=g0, alpha_g=alpha)],
        sensor=SensorModel(c_b=0.5, n_b=2),
        start=VehicleState.rest(start))


def rollout_traj(start: VehicleState, controls, n_t=1, t0_abs=0.0):
    """Exact constant-jerk rollout through a list of ControlInputs."""
    state = start
    p, v, a, psi = [state.p], [state.v], [state.a], [state.psi]
    for u in controls:
        state = propagate_state(state, u)
        p.append(state.p); v.append(state.v); a.append(state.a); psi.append(state.psi)
    t_steps = np.array([u.t_step for u in controls])
    n = len(controls)
    return PlannedTrajectory(
        p=np.asarray(p), v=np.asarray(v), a=np.asarray(a), psi=np.asarray(psi),
        gains=np.full((n + 1, n_t), 1.0),
        t_sum=np.concatenate([[0.0], np.cumsum(t_steps)]),
        j=np.array([u.j for u in controls]),
        psi_rate=np.array([u.psi_rate for u in controls]),
        t_steps=t_steps, t0_abs=t0_abs)


def hover_traj(start: VehicleState, n=12, dt=0.3, n_t=1, t0_abs=0.0):
    controls = [ControlInput(j=np.zeros(3), psi_rate=0.0, t_step=dt)
                for _ in range(n)]
    return rollout_traj(start, controls, n_t=n_t, t0_abs=t0_abs)


class ScriptedPlanner:
    """Deterministic planner stub: pops (accepted, wall_time) per call and
    returns a hover trajectory rooted exactly at the requested start state."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def __call__(self, instance, horizon, warm_start, deadline):
        accepted, wall = self.script.pop(0)
        self.calls.append({"deadline": deadline, "t0_abs": instance.t0_abs,
                           "start": instance.start})
        traj = hover_traj(instance.start, n_t=instance.n_targets,
                          t0_abs=instance.t0_abs) if accepted else None
        return PlanOutcome(trajectory=traj, wall_time=wall, accepted=accepted)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_replan_config_defaults_and_deadline():
    cfg = ReplanConfig()
    assert cfg.t_replan == 0.9
    assert cfg.n_reuses == 3
    assert cfg.deadline == pytest.approx(0.85 * 0.9)


@pytest.mark.parametrize("kw", [
    {"t_replan": 0.0}, {"n_reuses": 0}, {"deadline_fraction": 0.0},
    {"deadline_fraction": 1.5}, {"n_h": 0}, {"t_h": -1.0},
    {"mission_duration": 0.0}, {"tick": 0.0}, {"accept": "maybe"},
])
def test_replan_config_validation(kw):
    with pytest.raises(ReplanError):
        ReplanConfig(**kw)


# ---------------------------------------------------------------------------
# ideal tracker
# ---------------------------------------------------------------------------

def test_tracked_state_exact_at_knots_and_midpoints():
    rng = np.random.default_rng(0)
    start = VehicleState(p=rng.normal(size=3), v=rng.normal(size=3),
                         a=0.1 * rng.normal(size=3), psi=0.3)
    controls = [ControlInput(j=rng.normal(size=3), psi_rate=rng.normal() * 0.2,
                             t_step=rng.uniform(0.1, 0.9)) for _ in range(6)]
    traj = rollout_traj(start, controls)
    # knots are reproduced exactly
    for k in range(traj.n_steps + 1):
        s = tracked_state(traj, traj.t_sum[k])
        assert_allclose(s.p, traj.p[k], atol=1e-12)
        assert_allclose(s.v, traj.v[k], atol=1e-12)
        assert_allclose(s.a, traj.a[k], atol=1e-12)
        assert s.psi == pytest.approx(traj.psi[k], abs=1e-12)
    # an interior query matches splitting the step into two propagations
    k, frac = 2, 0.4
    s_mid = tracked_state(traj, traj.t_sum[k] + frac * traj.t_steps[k])
    half = propagate_state(traj.state(k), ControlInput(
        j=traj.j[k], psi_rate=traj.psi_rate[k], t_step=frac * traj.t_steps[k]))
    assert_allclose(s_mid.p, half.p, atol=1e-12)
    assert_allclose(s_mid.v, half.v, atol=1e-12)


def test_tracked_state_clamps_past_end():
    traj = hover_traj(VehicleState.rest((1.0, 2.0, 3.0)), n=3, dt=0.2)
    assert not trajectory_exhausted(traj, traj.duration)
    assert trajectory_exhausted(traj, traj.duration + 1e-6)
    s = tracked_state(traj, traj.duration + 5.0)
    assert_allclose(s.p, [1.0, 2.0, 3.0])
    assert_allclose(s.v, 0.0)
    assert_allclose(s.a, 0.0)
    with pytest.raises(ReplanError):
        tracked_state(traj, -0.1)


# ---------------------------------------------------------------------------
# target simulator
# ---------------------------------------------------------------------------

def test_step_targets_matches_update_law():
    inst = static_instance(p_target=(1.0, 0.0, 0.0), g0=10.0, alpha=2.0)
    gains = np.array([10.0])
    p = np.array([0.4, 0.0, 0.0])
    q, g = step_targets(inst, gains, p, t_abs=0.0, dt=0.01)
    assert_allclose(q[0], [1.0, 0.0, 0.0])
    expected = (10.0 + 2.0 * 0.01) * (1.0 - butterworth(0.6, inst.sensor))
    assert g[0] == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ReplanError):
        step_targets(inst, gains, p, t_abs=np.inf, dt=0.01)


def test_step_targets_far_vehicle_only_grows():
    inst = static_instance(alpha=1.0)
    _, g = step_targets(inst, np.array([5.0]), np.array([100.0, 0, 0]),
                        t_abs=1.0, dt=0.5)
    assert g[0] == pytest.approx(5.5, rel=1e-4)


# ---------------------------------------------------------------------------
# mission log
# ---------------------------------------------------------------------------

def test_mission_log_ordering_and_queries():
    log = MissionLog()
    log.add(0.0, "plan_started", attempt=0)
    log.add(1.0, "plan_converged", wall=0.2)
    with pytest.raises(ReplanError):
        log.add(0.5, "plan_started")
    assert [e.kind for e in log.of_kind("plan_started")] == ["plan_started"]
    log.sample(0.0, VehicleState.rest((0, 0, 0)), np.array([1.0]),
               np.zeros((1, 3)))
    t, states, gains, q = log.history()
    assert t.shape == (1,) and states.shape == (1, 10)
    assert gains.shape == (1, 1) and q.shape == (1, 1, 3)


# ---------------------------------------------------------------------------
# replanning state machine (scripted planner)
# ---------------------------------------------------------------------------

def fast(n):
    return [(True, 0.1)] * n


def test_all_solves_accepted_resets_counter():
    inst = static_instance()
    cfg = ReplanConfig(mission_duration=2.7, t_replan=0.9)
    planner = ScriptedPlanner(fast(1 + 3))
    log = run_mission(inst, cfg, planner=planner)
    assert not log.aborted
    assert len(log.of_kind("trajectory_reused")) == 0
    sets = log.of_kind("trajectory_set")
    assert len(sets) == 4  # initial + one per cycle
    assert_allclose([e.t for e in sets], [0.0, 0.9, 1.8, 2.7], atol=1e-9)
    # planner was asked to start from the handoff state one interval ahead
    assert_allclose([c["t0_abs"] for c in planner.calls],
                    [0.0, 0.9, 1.8, 2.7], atol=1e-9)
    assert planner.calls[0]["deadline"] is None
    assert all(c["deadline"] == pytest.approx(cfg.deadline)
               for c in planner.calls[1:])
    # stub roots each plan at the requested state: handoff is seamless
    assert all(e.data["handoff_gap"] <= 1e-6 for e in sets[1:])


def test_failed_solves_reuse_then_recover():
    inst = static_instance()
    cfg = ReplanConfig(mission_duration=3.6, t_replan=0.9, n_reuses=3)
    script = [(True, 0.1), (False, 0.1), (False, 0.1), (True, 0.1), (True, 0.1)]
    log = run_mission(inst, cfg, planner=ScriptedPlanner(script))
    assert not log.aborted
    reuses = log.of_kind("trajectory_reused")
    assert [e.data["c_use"] for e in reuses] == [2, 3]
    assert len(log.of_kind("mission_aborted")) == 0


def test_reuse_limit_aborts():
    inst = static_instance()
    cfg = ReplanConfig(mission_duration=60.0, t_replan=0.9, n_reuses=2)
    script = [(True, 0.1)] + [(False, 0.1)] * 2
    log = run_mission(inst, cfg, planner=ScriptedPlanner(script))
    assert log.aborted
    abort = log.of_kind("mission_aborted")[0]
    assert abort.data["reason"] == "reuse limit exceeded"
    assert [e.data["c_use"] for e in log.of_kind("trajectory_reused")] == [2]


def test_deadline_overrun_counts_as_failure():
    inst = static_instance()
    cfg = ReplanConfig(mission_duration=1.8, t_replan=0.9, n_reuses=3)
    late = cfg.deadline + cfg.deadline_slack + 0.01
    script = [(True, 0.1), (True, late), (True, 0.1)]
    log = run_mission(inst, cfg, planner=ScriptedPlanner(script))
    assert not log.aborted
    assert [e.data["c_use"] for e in log.of_kind("trajectory_reused")] == [2]


def test_initial_solve_retries_then_aborts():
    inst = static_instance()
    cfg = ReplanConfig(mission_duration=10.0, initial_retries=3)
    planner = ScriptedPlanner([(False, 0.5)] * 3)
    log = run_mission(inst, cfg, planner=planner)
    assert log.aborted
    assert len(log.of_kind("plan_failed")) == 3
    assert log.of_kind("mission_aborted")[0].data["reason"] == "initial solve failed"


def test_hover_when_trajectory_exhausted():
    inst = static_instance()
    cfg = ReplanConfig(mission_duration=2.7, t_replan=0.9, n_reuses=10)

    calls = {"n": 0}

    def planner(instance, horizon, warm, deadline):
        calls["n"] += 1
        if calls["n"] == 1:  # short initial plan: runs out mid-cycle
            return PlanOutcome(trajectory=hover_traj(instance.start, n=12, dt=0.05),
                               wall_time=0.1, accepted=True)
        return PlanOutcome(trajectory=None, wall_time=0.1, accepted=False)

    log = run_mission(inst, cfg, planner=planner)
    hovers = log.of_kind("hover_entered")
    assert len(hovers) == 1
    assert hovers[0].t == pytest.approx(0.61, abs=1e-9)
    # position holds at the final knot while hovering
    t, states, _, _ = log.history()
    after = states[t > 0.61]
    assert_allclose(after[:, 0:3], after[0:1, 0:3] * np.ones((len(after), 1)),
                    atol=1e-12)
    assert_allclose(after[:, 3:9], 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# metrics and mission builders
# ---------------------------------------------------------------------------

def test_interception_metrics_counts_entries():
    inst = static_instance(p_target=(0.0, 0.0, 0.0))
    log = MissionLog()
    xs = [1.0, 0.2, 0.1, 0.2, 1.0, 0.15, 1.0]   # two entries into r=0.25
    for i, x in enumerate(xs):
        log.sample(0.1 * i, VehicleState.rest((x, 0.0, 0.0)),
                   np.array([1.0]), np.zeros((1, 3)))
    (m,) = interception_metrics(log, radius=0.25)
    assert m["count"] == 2
    assert m["first_time"] == pytest.approx(0.1)
    assert m["min_distance"] == pytest.approx(0.1)
    assert interception_metrics(MissionLog(), radius=0.25) == []


def test_interception_metrics_never_inside():
    log = MissionLog()
    for i in range(3):
        log.sample(float(i), VehicleState.rest((5.0, 0.0, 0.0)),
                   np.array([1.0]), np.zeros((1, 3)))
    (m,) = interception_metrics(log, radius=0.25)
    assert m["count"] == 0 and m["first_time"] is None
    assert m["min_distance"] == pytest.approx(5.0)


def test_trefoil_mission_layout():
    inst = trefoil_mission(n_targets=3, scale=0.3, g0=10.0, alpha_g=1.0)
    assert inst.n_targets == 3
    assert inst.sensor.c_b == pytest.approx(0.1)
    phases = [tg.motion.phase for tg in inst.targets]
    assert phases == [target_phase(r, 3) for r in range(3)]
    assert all(tg.g0 == 10.0 and tg.alpha_g == 1.0 for tg in inst.targets)
    # start is at rest, offset from the pattern center
    assert_allclose(inst.start.v, 0.0)
    with pytest.raises(ReplanError):
        trefoil_mission(n_targets=0)


def test_run_mission_requires_targets():
    inst = static_instance()
    empty = ProblemInstance(targets=[], sensor=inst.sensor, start=inst.start)
    with pytest.raises(ReplanError):
        run_mission(empty, ReplanConfig(mission_duration=1.0))
