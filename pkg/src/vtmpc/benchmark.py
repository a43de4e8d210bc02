"""Kinematic Orienteering Problem benchmark harness.

Loads 2D orienteering instances (Tsiligirides-style ``x y score`` files),
optionally lifts them to 3D, runs the budget-ladder protocol with perturbed
rewards, scores collected reward against the original scores, and emits
comparison tables.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .model import (
    ControlInput,
    ProblemInstance,
    SensorModel,
    TargetSpec,
    VehicleState,
    butterworth_sq,
    propagate_state,
)
from .solver import SolveRequest, solve
from .transcription import (
    HorizonConfig,
    PlannedTrajectory,
    build_nlp,
    encode_trajectory,
    extract_solution,
    initial_guess,
)


class BenchmarkError(ValueError):
    """Raised for malformed instance files or invalid protocol settings."""


#: Published comparison columns for the 2D Tsiligirides 2 instance
#: (collected reward per travel budget).  KOP-1 is the assertion baseline;
#: the VT-MPC column is the stretch target, reported but not asserted.
TABLE1_BUDGETS = [(10.0, 50), (15.0, 75), (20.0, 67), (25.0, 125),
                  (30.0, 150), (35.0, 175), (40.0, 200)]
KOP1_REWARDS = {10.0: 95, 15.0: 180, 20.0: 250, 25.0: 325,
                30.0: 390, 35.0: 430, 40.0: 450}
VTMPC_PAPER_REWARDS = {10.0: 115, 15.0: 215, 20.0: 345, 25.0: 395,
                       30.0: 430, 35.0: 450, 40.0: 450}


@dataclass
class OpInstance:
    """An orienteering instance: scored points plus fixed start/end points."""

    points: np.ndarray          # (n, 3) positions in metres
    scores: np.ndarray          # (n,) non-negative rewards
    start_index: int = 0
    end_index: int = 1
    name: str = "op"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, float))
        self.scores = np.asarray(self.scores, float)
        n = len(self.points)
        if n < 3:
            raise BenchmarkError(f"instance needs at least 3 points, got {n}")
        if self.points.shape[1] == 2:
            self.points = np.column_stack([self.points, np.zeros(n)])
        if self.points.shape[1] != 3:
            raise BenchmarkError("points must be 2D or 3D coordinates")
        if self.scores.shape != (n,):
            raise BenchmarkError("scores must align with points")
        if np.any(self.scores < 0):
            raise BenchmarkError("scores must be non-negative")
        for idx in (self.start_index, self.end_index):
            if not 0 <= idx < n:
                raise BenchmarkError(f"start/end index {idx} out of range")

    @property
    def total_score(self) -> float:
        return float(np.sum(self.scores))

    @property
    def target_indices(self) -> np.ndarray:
        """Indices of the scored waypoints (everything but start and end)."""
        mask = np.ones(len(self.points), bool)
        mask[[self.start_index, self.end_index]] = False
        return np.nonzero(mask)[0]


def load_op_instance(path) -> OpInstance:
    """Parse a whitespace-separated ``x y [z] score`` file.

    The first row is the start point and the second the end point, following
    the standard Tsiligirides distribution layout.
    """
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            text = line.split("#")[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) not in (3, 4):
                raise BenchmarkError(
                    f"{path}:{ln}: expected 'x y [z] score', got {len(parts)} fields")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise BenchmarkError(f"{path}:{ln}: {exc}") from None
    if len(rows) < 3:
        raise BenchmarkError(f"{path}: needs at least 3 points, got {len(rows)}")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise BenchmarkError(f"{path}: inconsistent column counts")
    arr = np.array(rows)
    import os
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return OpInstance(points=arr[:, :-1], scores=arr[:, -1], name=name)


def tsiligirides2() -> OpInstance:
    """The bundled 2D Tsiligirides set-2 instance (total score 450)."""
    ref = resources.files("vtmpc.data").joinpath("tsiligirides2.txt")
    with resources.as_file(ref) as path:
        return load_op_instance(path)


def extend_to_3d(instance: OpInstance, seed: int, z_band=(1.0, 11.0),
                 candidates: int = 200) -> OpInstance:
    """Assign seeded z heights in ``z_band`` maximizing minimum 3D spacing.

    Greedy over a seeded candidate ladder per point: each point picks the
    height furthest (in 3D) from all previously placed points.  Deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    pts = instance.points.copy()
    n = len(pts)
    heights = rng.uniform(z_band[0], z_band[1], size=(n, candidates))
    placed = []
    for i in range(n):
        cand = np.column_stack([np.repeat(pts[i, :2][None, :], candidates, 0),
                                heights[i]])
        if placed:
            prev = np.array(placed)
            dmin = np.min(np.linalg.norm(cand[:, None, :] - prev[None, :, :],
                                         axis=-1), axis=1)
            pick = int(np.argmax(dmin))
        else:
            pick = 0
        pts[i, 2] = heights[i, pick]
        placed.append(pts[i])
    return OpInstance(points=pts, scores=instance.scores.copy(),
                      start_index=instance.start_index,
                      end_index=instance.end_index,
                      name=instance.name + "-3d")


def perturb_rewards(instance: OpInstance, seed: int,
                    magnitude: float = 0.05) -> OpInstance:
    """Multiply each score by a seeded uniform factor in [1-m, 1+m].

    Perturbation only shapes the objective; table scoring always uses the
    original scores.
    """
    if not 0.0 <= magnitude < 0.5:
        raise BenchmarkError(f"perturbation magnitude {magnitude} not in [0, 0.5)")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1.0 - magnitude, 1.0 + magnitude, len(instance.scores))
    return OpInstance(points=instance.points.copy(),
                      scores=instance.scores * factors,
                      start_index=instance.start_index,
                      end_index=instance.end_index,
                      name=instance.name)


def make_problem(instance: OpInstance, sensor: SensorModel = None,
                 **kwargs) -> ProblemInstance:
    """Build the trajectory-optimization problem for an OP instance."""
    sensor = sensor if sensor is not None else SensorModel(c_b=0.05, n_b=2)
    targets = [TargetSpec(q0=instance.points[i], g0=float(instance.scores[i]))
               for i in instance.target_indices]
    start = VehicleState.rest(instance.points[instance.start_index])
    return ProblemInstance(targets=targets, sensor=sensor, start=start, **kwargs)


def rollout_positions(traj: PlannedTrajectory) -> np.ndarray:
    """Knot positions from replaying the trajectory's controls exactly.

    Only the initial state and the control sequence are trusted, so defect
    violations in the decision vector cannot fake reward collection.
    """
    state = traj.state(0)
    p = [state.p]
    for k in range(traj.n_steps):
        state = propagate_state(state, traj.input(k))
        p.append(state.p)
    return np.array(p)


def simulate_gains_along(positions: np.ndarray, t_steps: np.ndarray,
                         targets: np.ndarray, g0: np.ndarray,
                         sensor: SensorModel) -> np.ndarray:
    """Residual gains after replaying the collection dynamics along knots."""
    g = np.asarray(g0, float).copy()
    for k in range(len(t_steps)):
        d_sq = np.sum((positions[k][None, :] - targets) ** 2, axis=-1)
        g = g * (1.0 - butterworth_sq(d_sq, sensor))
    return g


def score_collection(traj: PlannedTrajectory, instance: OpInstance,
                     threshold: float = 0.05,
                     sensor: SensorModel = None) -> float:
    """Sum of original scores whose residual gain fell to ≤ threshold·g0.

    Gains are replayed along the control rollout of ``traj``, independent of
    the solver's own state variables.
    """
    sensor = sensor if sensor is not None else SensorModel(c_b=0.05, n_b=2)
    idx = instance.target_indices
    g0 = instance.scores[idx]
    residual = simulate_gains_along(rollout_positions(traj), traj.t_steps,
                                    instance.points[idx], g0, sensor)
    live = g0 > 0
    collected = np.zeros(len(idx), bool)
    collected[live] = residual[live] <= threshold * g0[live]
    return float(np.sum(instance.scores[idx][collected]))


# ---------------------------------------------------------------------------
# tour-based warm start
# ---------------------------------------------------------------------------

def _quintic_coeffs(p0, v0, a0, p1, v1, a1, T):
    """Per-axis quintic interpolating (p, v, a) at both ends of [0, T]."""
    dp = p1 - p0 - v0 * T - 0.5 * a0 * T ** 2
    dv = v1 - v0 - a0 * T
    da = a1 - a0
    c3 = (10.0 * dp - 4.0 * dv * T + 0.5 * da * T ** 2) / T ** 3
    c4 = (-15.0 * dp + 7.0 * dv * T - da * T ** 2) / T ** 4
    c5 = (6.0 * dp - 3.0 * dv * T + 0.5 * da * T ** 2) / T ** 5
    return c3, c4, c5


def _endpoint_correction(dts: np.ndarray, err: np.ndarray) -> np.ndarray:
    """Least-norm jerk tweaks hitting an endpoint (p, v, a) residual.

    The final state of a constant-jerk chain is linear in the jerks, so a
    3xM least-squares solve per axis closes ``err`` (rows: p, v, a; columns:
    axes) exactly whenever the leg has at least three steps.
    """
    tails = np.concatenate([np.cumsum(dts[::-1])[::-1][1:], [0.0]])
    coef = np.vstack([
        dts ** 3 / 6.0 + dts ** 2 * tails / 2.0 + dts * tails ** 2 / 2.0,
        dts ** 2 / 2.0 + dts * tails,
        dts,
    ])
    delta, *_ = np.linalg.lstsq(coef, err, rcond=None)
    return delta


def _leg_jerks(state: VehicleState, p1, v1, a1, dts: np.ndarray) -> np.ndarray:
    """Jerk steps flying from ``state`` to the (p1, v1, a1) leg boundary.

    Quintic baseline sampled at the step midpoints, then a least-norm
    correction so the exact constant-jerk rollout lands on the boundary.
    """
    T = float(np.sum(dts))
    mids = np.concatenate([[0.0], np.cumsum(dts)])[:-1] + 0.5 * dts
    j = np.zeros((len(dts), 3))
    for ax in range(3):
        c3, c4, c5 = _quintic_coeffs(state.p[ax], state.v[ax], state.a[ax],
                                     p1[ax], v1[ax], a1[ax], T)
        j[:, ax] = 6.0 * c3 + 24.0 * c4 * mids + 60.0 * c5 * mids ** 2
    probe = state
    for k in range(len(dts)):
        probe = propagate_state(probe, ControlInput(j=j[k], psi_rate=0.0,
                                                    t_step=dts[k]))
    err = np.vstack([np.asarray(p1, float) - probe.p,
                     np.asarray(v1, float) - probe.v,
                     np.asarray(a1, float) - probe.a])
    return j + _endpoint_correction(dts, err).reshape(len(dts), 3)


class _LegPlan:
    """Budget-balanced timing and boundary states for a quintic-leg tour.

    Leg durations start distance-proportional over per-leg floors and are
    rebalanced until the per-leg peak acceleration/velocity demands of the
    boundary-value quintics even out within the fixed budget; interior
    vertices get bisector pass velocities (with a periodic coordinate sweep
    of per-vertex speed scales) and centripetal boundary accelerations.
    ``demand`` <= 1 means the flythrough fits the kinematic budgets.
    """

    _SAMPLES = np.linspace(0.0, 1.0, 49)
    _SWEEP = (0.5, 0.7, 0.85, 1.0, 1.15)

    def __init__(self, verts: np.ndarray, c_max: float, bounds,
                 t_min: float = 0.1, iters: int = 30):
        self.verts = np.asarray(verts, float)
        self.c_max = float(c_max)
        d = np.linalg.norm(np.diff(self.verts, axis=0), axis=1)
        self.d = d
        self.n_legs = len(d)
        self.a_budget = 0.9 * bounds.a_max
        self.v_budget = 0.95 * bounds.v_max
        self.v_cap = 0.9 * bounds.v_max
        self.u = np.diff(self.verts, axis=0) / np.maximum(d[:, None], 1e-12)
        self.floor = np.maximum(3.5 * t_min, d / self.v_budget)
        self.feasible = float(np.sum(self.floor)) <= self.c_max
        self.demand = np.inf
        if not self.feasible:
            return
        w = d / np.sum(d) if np.sum(d) > 0 else np.full(self.n_legs,
                                                        1.0 / self.n_legs)
        self.leg_T = self.floor + (self.c_max - np.sum(self.floor)) * w
        self.sigma = np.ones(self.n_legs + 1)
        self._balance(iters)

    def _boundary(self, T):
        vv = np.zeros((self.n_legs + 1, 3))
        av = np.zeros((self.n_legs + 1, 3))
        for i in range(1, self.n_legs):
            s = min(self.d[i - 1] / T[i - 1], self.d[i] / T[i],
                    self.v_cap) * self.sigma[i]
            vv[i] = s * 0.5 * (self.u[i - 1] + self.u[i])
            turn = s * (self.u[i] - self.u[i - 1])
            nrm = np.linalg.norm(turn)
            if nrm > 1e-9:
                t_turn = 0.25 * min(T[i - 1], T[i])
                av[i] = min(nrm / max(t_turn, 1e-6),
                            self.a_budget) * turn / nrm
        return vv, av

    def _leg_demand(self, i, T, vv, av):
        ts = self._SAMPLES * T[i]
        acc = np.zeros((len(ts), 3))
        vel = np.zeros((len(ts), 3))
        for ax in range(3):
            c3, c4, c5 = _quintic_coeffs(
                self.verts[i, ax], vv[i, ax], av[i, ax],
                self.verts[i + 1, ax], vv[i + 1, ax], av[i + 1, ax], T[i])
            acc[:, ax] = av[i, ax] + 6 * c3 * ts + 12 * c4 * ts ** 2 \
                + 20 * c5 * ts ** 3
            vel[:, ax] = vv[i, ax] + av[i, ax] * ts + 3 * c3 * ts ** 2 \
                + 4 * c4 * ts ** 3 + 5 * c5 * ts ** 4
        return max(np.max(np.linalg.norm(acc, axis=1)) / self.a_budget,
                   np.max(np.linalg.norm(vel, axis=1)) / self.v_budget,
                   1e-3)

    def _balance(self, iters):
        T = self.leg_T
        for it in range(iters):
            if it % 3 == 0:
                for i in range(1, self.n_legs):
                    best, best_val = self.sigma[i], None
                    for trial in self._SWEEP:
                        self.sigma[i] = trial
                        vv, av = self._boundary(T)
                        val = max(self._leg_demand(i - 1, T, vv, av),
                                  self._leg_demand(i, T, vv, av))
                        if best_val is None or val < best_val:
                            best_val, best = val, trial
                    self.sigma[i] = best
            vv, av = self._boundary(T)
            dem = np.array([self._leg_demand(i, T, vv, av)
                            for i in range(self.n_legs)])
            if np.max(dem) < 1.0 or np.max(dem) / np.min(dem) < 1.02:
                break
            T = np.maximum(T * dem ** 0.35, self.floor)
            T *= self.c_max / np.sum(T)
            T = np.maximum(T, self.floor)
            T[np.argmax(T)] += self.c_max - np.sum(T)
        self.leg_T = T
        self.v_vert, self.a_vert = self._boundary(T)
        self.demand = float(np.max(
            [self._leg_demand(i, T, self.v_vert, self.a_vert)
             for i in range(self.n_legs)]))


def plan_route(instance: OpInstance, c_max: float, bounds,
               slacks=(1.2, 1.3), restarts: int = 4, noise: float = 0.3,
               rng=None) -> list:
    """Randomized greedy-insertion routing (GRASP) over reachable targets.

    Each restart inserts targets at their cheapest position ranked by score
    per added tour length (multiplicatively jittered by ``noise`` except on
    the first, deterministic restart), 2-opts every trial insertion, and
    accepts it only while the quintic flythrough demand stays within the
    current slack.  The best-scoring route over all slacks and restarts wins;
    demand breaks ties.  Slack above 1 admits routes whose warm start mildly
    overshoots the acceleration limit at the knots, which the NLP solve can
    repair by retiming.
    """
    if c_max <= 0:
        raise BenchmarkError(f"budget must be positive, got {c_max}")
    rng = np.random.default_rng(rng)
    pts = instance.points
    demand_cache = {}

    def length(order):
        v = pts[np.asarray(order)]
        return float(np.sum(np.linalg.norm(np.diff(v, axis=0), axis=1)))

    def demand(order):
        key = tuple(order)
        if key not in demand_cache:
            plan = _LegPlan(pts[np.asarray(order)], c_max, bounds)
            demand_cache[key] = plan.demand if plan.feasible else np.inf
        return demand_cache[key]

    def two_opt(route):
        improved = True
        while improved:
            improved = False
            for i in range(1, len(route) - 2):
                for k in range(i + 1, len(route) - 1):
                    trial = route[:i] + route[i:k + 1][::-1] + route[k + 1:]
                    if length(trial) < length(route) - 1e-9:
                        route = trial
                        improved = True
        return route

    def build(slack, jitter):
        route = [instance.start_index, instance.end_index]
        remaining = set(instance.target_indices)
        while remaining:
            candidates = []
            base = length(route)
            for t in remaining:
                added, pos = min(
                    (length(route[:i] + [t] + route[i:]) - base, i)
                    for i in range(1, len(route)))
                ratio = float(instance.scores[t]) / max(added, 1e-9)
                if jitter:
                    ratio *= rng.uniform(1.0 - jitter, 1.0 + jitter)
                candidates.append((ratio, t, pos))
            candidates.sort(reverse=True)
            for _, t, pos in candidates:
                trial = two_opt(route[:pos] + [t] + route[pos:])
                if demand(trial) <= slack:
                    route = trial
                    remaining.discard(t)
                    break
            else:
                break
        return route

    best = None
    for slack in slacks:
        for rep in range(max(1, restarts)):
            route = build(slack, 0.0 if rep == 0 else noise)
            score = float(np.sum(instance.scores[np.asarray(route)]))
            key = (score, -demand(route))
            if best is None or key > best[0]:
                best = (key, route)
    return best[1]


def _leg_step_counts(leg_T: np.ndarray, n_h: int, t_min: float,
                     t_max: float, pin_first: bool) -> np.ndarray:
    """Split n_h knot intervals over the legs, proportional to duration.

    Every leg keeps a uniform step inside [t_min, t_max]; the first leg
    reserves one pinned t_min step when requested.
    """
    n_legs = len(leg_T)
    lo = np.maximum(np.ceil(leg_T / t_max - 1e-9), 1).astype(int)
    hi = np.maximum(np.floor(leg_T / t_min + 1e-9), 1).astype(int)
    if pin_first:
        rem = leg_T[0] - t_min
        if rem < 0.5 * t_min:
            lo[0] = hi[0] = 1
        else:
            lo[0] = 1 + max(1, int(math.ceil(rem / t_max - 1e-9)))
            hi[0] = 1 + int(math.floor(rem / t_min + 1e-9))
    # at least three steps per leg lets the endpoint correction close all
    # nine boundary equations
    lo = np.minimum(np.maximum(lo, 3), hi)
    if np.any(lo > hi) or np.sum(lo) > n_h or np.sum(hi) < n_h:
        raise BenchmarkError(
            f"cannot place {n_h} steps of [{t_min}, {t_max}] over legs "
            f"of durations {np.round(leg_T, 3).tolist()}")
    n = np.clip(np.round(n_h * leg_T / np.sum(leg_T)).astype(int), lo, hi)
    while np.sum(n) != n_h:
        if np.sum(n) < n_h:
            cand = np.nonzero(n < hi)[0]
            pick = cand[np.argmax(leg_T[cand] / n[cand])]
            n[pick] += 1
        else:
            cand = np.nonzero(n > lo)[0]
            pick = cand[np.argmin(leg_T[cand] / n[cand])]
            n[pick] -= 1
    return n


def tour_guess(problem: ProblemInstance, horizon: HorizonConfig,
               instance: OpInstance, route: list) -> np.ndarray:
    """Warm start flying quintic legs through the route.

    The budget is balanced over the legs (see ``_LegPlan``), every interior
    route point receives a knot exactly on it, and each leg is a
    boundary-value quintic rolled out through the exact dynamics with a
    least-norm jerk correction, so the defects and the terminal pins hold
    to machine precision.
    """
    nlp = build_nlp(problem, horizon)
    bounds = problem.bounds
    n_h = horizon.n_h
    c_max = horizon.c_max if horizon.c_max is not None else n_h * horizon.t_max
    route = np.asarray(route, int)
    if route.size < 2:
        raise BenchmarkError("a route needs at least a start and an end")
    verts = instance.points[route].astype(float)
    if horizon.p_f is not None:
        verts[-1] = np.asarray(horizon.p_f, float)

    plan = _LegPlan(verts, c_max, bounds, t_min=horizon.t_min)
    if not plan.feasible:
        raise BenchmarkError(
            f"route of length {np.sum(plan.d):.2f} does not fit "
            f"budget {c_max}")
    leg_T, v_vert, a_vert = plan.leg_T, plan.v_vert, plan.a_vert
    n_legs = plan.n_legs

    n_steps_leg = _leg_step_counts(leg_T, n_h, horizon.t_min, horizon.t_max,
                                   horizon.pin_first_step)

    # chain the legs through the exact dynamics
    t_steps = np.zeros(n_h)
    j = np.zeros((n_h, 3))
    p = np.zeros((n_h + 1, 3)); v = np.zeros_like(p); a = np.zeros_like(p)
    state = problem.start
    p[0], v[0], a[0] = state.p, state.v, state.a
    k = 0
    for leg in range(n_legs):
        n_leg = n_steps_leg[leg]
        if horizon.pin_first_step and leg == 0 and n_leg > 1:
            dts = np.full(n_leg, (leg_T[0] - horizon.t_min) / (n_leg - 1))
            dts[0] = horizon.t_min
        else:
            dts = np.full(n_leg, leg_T[leg] / n_leg)
        jerks = _leg_jerks(state, verts[leg + 1], v_vert[leg + 1],
                           a_vert[leg + 1], dts)
        for step in range(n_leg):
            j[k] = jerks[step]
            t_steps[k] = dts[step]
            state = propagate_state(state, ControlInput(
                j=j[k], psi_rate=0.0, t_step=dts[step]))
            k += 1
            p[k], v[k], a[k] = state.p, state.v, state.a

    # rate-limited heading pursuit of the travel direction
    psi = np.full(n_h + 1, problem.start.psi)
    psi_rate = np.zeros(n_h)
    for k in range(n_h):
        head = v[k + 1][:2]
        if np.linalg.norm(head) > 0.05:
            err = math.remainder(math.atan2(head[1], head[0]) - psi[k],
                                 2 * math.pi)
            psi_rate[k] = np.clip(err / t_steps[k], -bounds.psi_rate_max,
                                  bounds.psi_rate_max)
        psi[k + 1] = psi[k] + psi_rate[k] * t_steps[k]

    t_sum = np.concatenate([[0.0], np.cumsum(t_steps)])
    gains = np.zeros((n_h + 1, len(problem.targets)))
    if problem.targets:
        g = problem.gains0()
        gains[0] = g
        for k in range(n_h):
            d_sq = np.sum((p[k][None, :] - problem.target_positions(
                problem.t0_abs + t_sum[k])) ** 2, axis=-1)
            g = g * (1.0 - butterworth_sq(d_sq, problem.sensor))
            gains[k + 1] = g
    traj = PlannedTrajectory(
        p=p, v=v, a=a, psi=psi, gains=gains, t_sum=t_sum, j=j,
        psi_rate=psi_rate, t_steps=t_steps, t0_abs=problem.t0_abs)
    return encode_trajectory(nlp, traj)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkRun:
    """Aggregated results for one (c_max, n_h) budget row."""

    instance: str
    c_max: float
    n_h: int
    repeats: int
    seed: int
    engine: str
    collected: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    converged: list = field(default_factory=list)

    @property
    def best(self) -> float:
        return max(self.collected)

    @property
    def mean(self) -> float:
        return float(np.mean(self.collected))

    @property
    def t_avg(self) -> float:
        return float(np.mean(self.wall_times))

    @property
    def convergence_rate(self) -> float:
        return float(np.mean(self.converged))


def solve_kop(instance: OpInstance, c_max: float, n_h: int,
              objective_instance: OpInstance = None, engine: str = "builtin",
              sensor: SensorModel = None, max_iterations: int = 8000,
              deadline: float = None, seed=None,
              solver_options: dict = None, **problem_kwargs) -> PlannedTrajectory:
    """One benchmark solve: GRASP tour, quintic warm start, NLP polish.

    ``objective_instance`` (e.g. with perturbed scores) shapes the route and
    the NLP; the returned trajectory is judged against ``instance`` by the
    caller.  The polish starts from a high penalty weight so the feasible
    warm start is refined rather than abandoned; if the polished trajectory
    nevertheless collects less reward than the warm start under an exact
    control replay, the warm start is returned unchanged.
    """
    sensor = sensor if sensor is not None else SensorModel(c_b=0.05, n_b=2)
    obj_inst = objective_instance if objective_instance is not None else instance
    horizon = HorizonConfig(
        n_h=n_h, c_max=c_max,
        p_f=instance.points[instance.end_index], terminal_hard=True)
    problem = make_problem(obj_inst, sensor=sensor, **problem_kwargs)
    route = plan_route(obj_inst, c_max, problem.bounds, rng=seed)
    z0 = tour_guess(problem, horizon, obj_inst, route)

    nlp = build_nlp(problem, horizon)
    options = {"rho0": 1e6, "inner_maxiter": 800}
    options.update(solver_options or {})
    result = solve(SolveRequest(
        problem=nlp, warm_start=z0, deadline=deadline,
        max_iterations=max_iterations, options=options), engine=engine)
    polished = extract_solution(nlp, result.z, result.stats, result.converged)
    guess = extract_solution(nlp, z0, None, False)
    if (score_collection(polished, obj_inst, sensor=sensor)
            >= score_collection(guess, obj_inst, sensor=sensor)):
        return polished
    return guess


def _benchmark_task(args):
    """One (budget row, repeat) cell; module-level for process pools."""
    (instance, c_max, n_h, rep_seed, engine, sensor, magnitude, threshold,
     max_iterations, deadline, solver_options) = args
    perturbed = perturb_rewards(instance, rep_seed, magnitude)
    t0 = time.perf_counter()
    traj = solve_kop(instance, c_max, n_h, objective_instance=perturbed,
                     engine=engine, sensor=sensor,
                     max_iterations=max_iterations, deadline=deadline,
                     seed=rep_seed, solver_options=solver_options)
    wall = time.perf_counter() - t0
    score = score_collection(traj, instance, threshold, sensor)
    return score, wall, bool(traj.converged)


def run_benchmark(instance: OpInstance, budgets=None, repeats: int = 10,
                  seed: int = 0, engine: str = "builtin",
                  sensor: SensorModel = None, magnitude: float = 0.05,
                  threshold: float = 0.05, max_iterations: int = 8000,
                  deadline: float = None, jobs: int = 1,
                  solver_options: dict = None) -> list:
    """Table-protocol sweep: per budget, ``repeats`` solves with independently
    seeded reward perturbations from a rest start, scored on original scores.

    ``jobs`` > 1 fans the (budget, repeat) cells over a process pool; results
    are identical to the serial order.
    """
    if repeats < 1:
        raise BenchmarkError("repeats must be >= 1")
    budgets = budgets if budgets is not None else TABLE1_BUDGETS
    sensor = sensor if sensor is not None else SensorModel(c_b=0.05, n_b=2)
    tasks = []
    for row, (c_max, n_h) in enumerate(budgets):
        for rep in range(repeats):
            tasks.append((instance, float(c_max), int(n_h),
                          seed + 1000 * row + rep, engine, sensor, magnitude,
                          threshold, max_iterations, deadline,
                          solver_options))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_benchmark_task, tasks))
    else:
        cells = [_benchmark_task(t) for t in tasks]
    runs = []
    for row, (c_max, n_h) in enumerate(budgets):
        run = BenchmarkRun(instance=instance.name, c_max=float(c_max),
                           n_h=int(n_h), repeats=repeats, seed=seed,
                           engine=engine)
        for rep in range(repeats):
            score, wall, conv = cells[row * repeats + rep]
            run.collected.append(score)
            run.wall_times.append(wall)
            run.converged.append(conv)
        runs.append(run)
    return sorted(runs, key=lambda r: r.c_max)


def emit_table(runs: list, csv_path=None, text_path=None) -> tuple:
    """Render benchmark rows as CSV and aligned text; returns both strings."""
    if not runs:
        raise BenchmarkError("no benchmark runs to emit")
    runs = sorted(runs, key=lambda r: r.c_max)
    header = ["c_max", "n_h", "best", "mean", "t_avg", "convergence_rate"]
    rows = [[f"{r.c_max:.17g}", str(r.n_h), f"{r.best:.17g}",
             f"{r.mean:.17g}", f"{r.t_avg:.17g}", f"{r.convergence_rate:.17g}"]
            for r in runs]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    csv_text = buf.getvalue()

    cells = [header] + [[f"{r.c_max:g}", str(r.n_h), f"{r.best:g}",
                         f"{r.mean:.1f}", f"{r.t_avg:.1f}",
                         f"{r.convergence_rate:.2f}"] for r in runs]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths))
             for row in cells]
    text = "\n".join(lines) + "\n"

    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write(csv_text)
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(text)
    return csv_text, text
