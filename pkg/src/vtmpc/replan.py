"""Receding-horizon replanning simulator.

Runs the online replanning loop against a simulated dynamic-target field:
deadline-bounded re-solving on a virtual clock, trajectory reuse on solver
failure up to a reuse cap, hover fallback when the active trajectory is
exhausted, an ideal (zero-error) tracker, and 100 Hz target/gain integration.
Solver wall time is injectable, so the timing-dependent control flow is
deterministic under scripted solvers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    ModelError,
    ProblemInstance,
    SensorModel,
    TargetSpec,
    TrefoilMotion,
    VehicleState,
    butterworth,
    target_phase,
)
from .solver import SolveRequest, solve
from .transcription import (
    HorizonConfig,
    PlannedTrajectory,
    build_nlp,
    extract_solution,
    initial_guess,
)


class ReplanError(ValueError):
    """Raised for invalid replanning configurations or mission inputs."""


# ---------------------------------------------------------------------------
# configuration and log types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplanConfig:
    """Timing and horizon parameters for the replanning loop."""

    t_replan: float = 0.9
    n_reuses: int = 3
    n_h: int = 12
    t_h: float = 4.0
    deadline_fraction: float = 0.85
    mission_duration: float = 60.0
    seed: int = 0
    tick: float = 0.01
    initial_retries: int = 3
    accept: str = "feasible"   # hand off feasible iterates; "converged" is stricter
    deadline_slack: float = 0.05  # one-iteration overshoot allowance (s)
    feasible_tol: float = 1e-3    # handoff feasibility; plans are replayed exactly
    planner_cb_scale: float = 10.0  # widened planner kernel; sim keeps the true c_b
    t_min: float = 0.1
    t_max: float = 0.9

    def __post_init__(self):
        if not (self.t_replan > 0):
            raise ReplanError(f"t_replan must be positive, got {self.t_replan}")
        if self.n_reuses < 1:
            raise ReplanError(f"n_reuses must be >= 1, got {self.n_reuses}")
        if not (0 < self.deadline_fraction <= 1):
            raise ReplanError(
                f"deadline fraction must be in (0, 1], got {self.deadline_fraction}")
        if self.n_h < 1 or not (self.t_h > 0) or not (self.tick > 0):
            raise ReplanError("n_h, t_h and tick must be positive")
        if not (self.mission_duration > 0):
            raise ReplanError("mission duration must be positive")
        if self.accept not in ("feasible", "converged"):
            raise ReplanError(f"accept must be 'feasible' or 'converged', got {self.accept!r}")

    @property
    def deadline(self) -> float:
        return self.deadline_fraction * self.t_replan


@dataclass
class MissionEvent:
    """One time-stamped replanning event."""

    t: float
    kind: str
    data: dict = field(default_factory=dict)


@dataclass
class MissionLog:
    """Ordered mission events plus sampled state/target/gain histories."""

    events: list = field(default_factory=list)
    t: list = field(default_factory=list)            # tick times
    states: list = field(default_factory=list)       # (13,) rows: p v a psi
    gains: list = field(default_factory=list)        # (n_t,) rows
    target_positions: list = field(default_factory=list)  # (n_t, 3) rows
    aborted: bool = False

    def add(self, t: float, kind: str, **data) -> None:
        if self.events and t < self.events[-1].t - 1e-12:
            raise ReplanError("mission events must be time-ordered")
        self.events.append(MissionEvent(t=float(t), kind=kind, data=data))

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e.kind == kind]

    def sample(self, t: float, state: VehicleState, gains: np.ndarray,
               q: np.ndarray) -> None:
        self.t.append(float(t))
        self.states.append(np.concatenate([state.p, state.v, state.a, [state.psi]]))
        self.gains.append(np.asarray(gains, float).copy())
        self.target_positions.append(np.asarray(q, float).copy())

    def history(self) -> tuple:
        """(t, states, gains, target positions) as stacked arrays."""
        return (np.asarray(self.t), np.asarray(self.states),
                np.asarray(self.gains), np.asarray(self.target_positions))


# ---------------------------------------------------------------------------
# ideal tracker and target simulator
# ---------------------------------------------------------------------------

def tracked_state(traj: PlannedTrajectory, t_query: float) -> VehicleState:
    """Exact constant-jerk state of the trajectory at local time ``t_query``.

    Queries past the final knot clamp to the final position with zero
    velocity and acceleration (the hover demand); callers detect that case
    with :func:`trajectory_exhausted`.
    """
    if t_query < 0:
        raise ReplanError(f"t_query must be non-negative, got {t_query}")
    if trajectory_exhausted(traj, t_query):
        return VehicleState(p=traj.p[-1].copy(), v=np.zeros(3), a=np.zeros(3),
                            psi=float(traj.psi[-1]))
    k = int(np.searchsorted(traj.t_sum, t_query, side="right") - 1)
    k = min(max(k, 0), traj.n_steps - 1)
    s = t_query - traj.t_sum[k]
    j = traj.j[k]
    a = traj.a[k] + j * s
    v = traj.v[k] + traj.a[k] * s + 0.5 * j * s**2
    p = traj.p[k] + traj.v[k] * s + 0.5 * traj.a[k] * s**2 + j * s**3 / 6.0
    psi = traj.psi[k] + traj.psi_rate[k] * s
    return VehicleState(p=p, v=v, a=a, psi=float(psi))


def trajectory_exhausted(traj: PlannedTrajectory, t_query: float) -> bool:
    """True when the query time lies beyond the final knot."""
    return t_query > traj.duration + 1e-12


def _planner_instance(instance: ProblemInstance, gains: np.ndarray,
                      cb_scale: float) -> ProblemInstance:
    """Planner view of the mission: current gain estimates, widened kernel.

    Widening the planner's collection kernel keeps a useful gain gradient at
    ranges where the true narrow kernel is numerically flat; the simulator
    always integrates the true sensor.
    """
    targets = [replace(tg, g0=float(max(g, 0.0)))
               for tg, g in zip(instance.targets, np.asarray(gains, float))]
    sensor = replace(instance.sensor, c_b=instance.sensor.c_b * cb_scale)
    return replace(instance, targets=targets, sensor=sensor)


def step_targets(instance: ProblemInstance, gains: np.ndarray, p_vehicle,
                 t_abs: float, dt: float) -> tuple:
    """One simulator tick: target positions at ``t_abs`` and updated gains.

    Gains grow at each target's alpha_g and collapse through the Butterworth
    kernel of the actual vehicle-target distance.
    """
    if not np.isfinite(t_abs):
        raise ReplanError("t_abs must be finite")
    q = instance.target_positions(t_abs)
    d = np.linalg.norm(np.asarray(p_vehicle, float)[None, :] - q, axis=-1)
    alpha = np.array([tg.alpha_g for tg in instance.targets])
    g = (np.asarray(gains, float) + alpha * dt) * (1.0 - butterworth(d, instance.sensor))
    return q, g


# ---------------------------------------------------------------------------
# planner wrapper (injectable)
# ---------------------------------------------------------------------------

@dataclass
class PlanOutcome:
    """What one planner call produced: a trajectory (or None) and timing."""

    trajectory: PlannedTrajectory = None
    wall_time: float = 0.0
    accepted: bool = False


def _replay_exact(traj: PlannedTrajectory) -> PlannedTrajectory:
    """Re-roll knot states from the controls so the plan is dynamics-exact.

    The tracker interpolates knot states; replaying the control sequence
    removes any residual defect so the executed flight is physically
    consistent regardless of solver termination quality.
    """
    from .model import propagate_state, ControlInput
    state = traj.state(0)
    p, v, a, psi = [state.p], [state.v], [state.a], [state.psi]
    for k in range(traj.n_steps):
        state = propagate_state(state, traj.input(k))
        p.append(state.p); v.append(state.v); a.append(state.a); psi.append(state.psi)
    return replace(traj, p=np.asarray(p), v=np.asarray(v), a=np.asarray(a),
                   psi=np.asarray(psi))


def _nlp_planner(engine: str, max_iterations: int, solver_options: dict,
                 accept: str, feasible_tol: float = 1e-3):
    """Planner closure around the transcription + NLP solver stack."""
    options = {"rho0": 1e5}
    options.update(solver_options or {})

    def plan(instance: ProblemInstance, horizon: HorizonConfig,
             warm_start, deadline) -> PlanOutcome:
        nlp = build_nlp(instance, horizon)
        z0 = warm_start if warm_start is not None else initial_guess(instance, horizon)
        t0 = time.perf_counter()
        result = solve(SolveRequest(
            problem=nlp, warm_start=z0, deadline=deadline,
            max_iterations=max_iterations, tol_constraint=feasible_tol,
            options=dict(options)), engine=engine)
        wall = time.perf_counter() - t0
        traj = extract_solution(nlp, result.z, result.stats, result.converged)
        feasible = (traj.defect_residual <= feasible_tol
                    and float(np.max(nlp.ineq(result.z), initial=0.0)) <= feasible_tol)
        ok = result.converged if accept == "converged" else (result.converged or feasible)
        if ok:
            traj = _replay_exact(traj)
        return PlanOutcome(trajectory=traj, wall_time=wall, accepted=ok)

    return plan


# ---------------------------------------------------------------------------
# mission loop
# ---------------------------------------------------------------------------

def run_mission(instance: ProblemInstance, replan: ReplanConfig,
                engine: str = "builtin", planner=None,
                max_iterations: int = 4000,
                solver_options: dict = None) -> MissionLog:
    """Simulate a full replanning mission and return its log.

    The first solve runs with no deadline.  Afterwards, every ``t_replan``
    of virtual time a new solve is attempted from the tracked state
    ``c_use * t_replan`` in the future; on success the trajectory is handed
    off atomically and the reuse counter resets, on failure the previous
    trajectory continues and the counter increments.  The mission aborts
    once the counter exceeds ``n_reuses``.  A vehicle that outruns its
    trajectory holds position (hover) until a solve succeeds.

    ``planner`` overrides the NLP stack with any callable
    ``plan(instance, horizon, warm_start, deadline) -> PlanOutcome``; wall
    times from the outcome drive the virtual clock, so scripted planners
    exercise the timing logic deterministically.
    """
    if instance.n_targets == 0:
        raise ReplanError("mission needs at least one target")
    if planner is None:
        planner = _nlp_planner(engine, max_iterations, solver_options,
                               replan.accept, replan.feasible_tol)
    horizon = HorizonConfig(n_h=replan.n_h, c_max=replan.t_h, p_f=None,
                            mode="receding-horizon",
                            t_min=replan.t_min, t_max=replan.t_max)
    log = MissionLog()
    gains = instance.gains0()
    state = instance.start
    t = 0.0

    # initial planner call: unbounded time, a few retries before aborting
    traj = None
    for attempt in range(max(1, replan.initial_retries)):
        log.add(t, "plan_started", attempt=attempt, deadline=None)
        outcome = planner(
            _planner_instance(instance, gains,
                              replan.planner_cb_scale).with_start(state, t),
            horizon, None, None)
        if outcome.accepted and outcome.trajectory is not None:
            log.add(t, "plan_converged", wall=outcome.wall_time, attempt=attempt)
            traj = outcome.trajectory
            log.add(t, "trajectory_set", t0_abs=t)
            break
        log.add(t, "plan_failed", wall=outcome.wall_time, attempt=attempt)
    if traj is None:
        log.aborted = True
        log.add(t, "mission_aborted", reason="initial solve failed")
        return log

    traj_t0 = t
    c_use = 1
    hovering = False
    prev_inside = np.zeros(instance.n_targets, bool)

    while t < replan.mission_duration - 1e-9:
        # planner input: the tracked state c_use * t_replan in the future
        # (t_handoff - traj_t0 equals c_use * t_replan on the reuse path)
        t_handoff = t + replan.t_replan
        local = t_handoff - traj_t0
        plan_state = tracked_state(traj, min(local, traj.duration))
        plan_inst = _planner_instance(
            instance, gains, replan.planner_cb_scale).with_start(plan_state, t_handoff)
        warm = initial_guess(plan_inst, horizon, strategy="shift",
                             previous=traj, shift_time=c_use * replan.t_replan)
        log.add(t, "plan_started", deadline=replan.deadline)
        outcome = planner(plan_inst, horizon, warm, replan.deadline)

        # simulate flight over [t, t + t_replan] while the solver "runs"
        n_ticks = max(1, int(round(replan.t_replan / replan.tick)))
        for i in range(1, n_ticks + 1):
            t_i = t + i * replan.tick
            local = t_i - traj_t0
            if trajectory_exhausted(traj, local) and not hovering:
                hovering = True
                log.add(t_i, "hover_entered", p=tracked_state(traj, local).p.tolist())
            state = tracked_state(traj, min(local, traj.duration)) if not hovering \
                else VehicleState(p=state.p, v=np.zeros(3), a=np.zeros(3), psi=state.psi)
            q, gains = step_targets(instance, gains, state.p, t_i, replan.tick)
            d = np.linalg.norm(state.p[None, :] - q, axis=-1)
            log.sample(t_i, state, gains, q)
        t = t + replan.t_replan

        accepted = (outcome.accepted and outcome.trajectory is not None
                    and (outcome.wall_time
                         <= replan.deadline + replan.deadline_slack))
        if accepted:
            log.add(t, "plan_converged", wall=outcome.wall_time)
            traj = outcome.trajectory
            traj_t0 = t
            c_use = 1
            hovering = False
            log.add(t, "trajectory_set", t0_abs=t,
                    handoff_gap=float(np.max(np.abs(np.concatenate([
                        traj.p[0] - plan_state.p, traj.v[0] - plan_state.v,
                        traj.a[0] - plan_state.a,
                        [traj.psi[0] - plan_state.psi]])))))
        else:
            log.add(t, "plan_failed", wall=outcome.wall_time)
            c_use += 1
            if c_use > replan.n_reuses:
                log.aborted = True
                log.add(t, "mission_aborted", reason="reuse limit exceeded")
                return log
            log.add(t, "trajectory_reused", c_use=c_use)
    return log


def interception_metrics(log: MissionLog, radius: float) -> list:
    """Per-target interception stats from the sampled histories.

    An interception is an entry of the vehicle into the ``radius``-ball of a
    target; re-entries count separately.  Returns one dict per target with
    ``count``, ``first_time`` (or None) and ``min_distance``.
    """
    t, states, _, q = log.history()
    if t.size == 0:
        return []
    p = states[:, 0:3]
    d = np.linalg.norm(p[:, None, :] - q, axis=-1)           # (ticks, n_t)
    inside = d <= radius
    metrics = []
    for j in range(d.shape[1]):
        entries = np.flatnonzero(inside[1:, j] & ~inside[:-1, j]) + 1
        if inside[0, j]:
            entries = np.concatenate([[0], entries])
        first = float(t[entries[0]]) if entries.size else None
        metrics.append({"count": int(entries.size), "first_time": first,
                        "min_distance": float(np.min(d[:, j]))})
    return metrics


# ---------------------------------------------------------------------------
# mission builders
# ---------------------------------------------------------------------------

def trefoil_mission(n_targets: int = 3, scale: float = 0.3, g0: float = 10.0,
                    alpha_g: float = 1.0, center=(0.0, 0.0, 0.0),
                    sensor: SensorModel = None,
                    start: VehicleState = None) -> ProblemInstance:
    """Dynamic mission instance: phase-shifted trefoil targets around a center.

    The scale keeps peak target speed below the vehicle's velocity limit
    (the unit trefoil moves at up to ~5 m/s).
    """
    if n_targets < 1:
        raise ReplanError("n_targets must be >= 1")
    sensor = sensor if sensor is not None else SensorModel(c_b=0.1, n_b=2)
    center = np.asarray(center, float)
    targets = [
        TargetSpec(q0=center, g0=g0, alpha_g=alpha_g,
                   motion=TrefoilMotion(phase=target_phase(r, n_targets),
                                        scale=scale))
        for r in range(n_targets)
    ]
    start = start if start is not None else VehicleState.rest(center + np.array([0.0, -2.0, 0.0]))
    return ProblemInstance(targets=targets, sensor=sensor, start=start)
