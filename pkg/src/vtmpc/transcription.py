"""Simultaneous transcription of the variable time-step OCP into a sparse NLP.

Decision vector (interleaved for a banded Jacobian), one block per step::

    X_0, u_0, X_1, u_1, ..., u_{Nh-1}, X_Nh

with state block X_k = [p(3), v(3), a(3), psi, g(n_t), t_sum] and input block
u_k = [j(3), psi_rate, t_k].  Dynamics and reward-gain recurrences become
defect equalities between consecutive blocks; velocity/acceleration limits are
squared-norm inequalities; jerk, heading-rate and step-length limits, the
initial-state pin, the first-step pin t_0 = t_min and hard terminal
constraints are box bounds.  Target positions are evaluated inline at
(mission start + t_sum,k), so their motion differentiates through t_sum.

All constraint/objective callbacks are pure and vectorized over the horizon;
first derivatives are analytic with a fixed sparsity pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .model import (
    ControlInput,
    KinematicBounds,
    ProblemInstance,
    VehicleState,
    butterworth_sq,
    heading_cost,
    propagate_state,
    stage_cost,
    terminal_cost,
)

__all__ = [
    "TranscriptionError",
    "HorizonConfig",
    "NlpProblem",
    "PlannedTrajectory",
    "SolveStats",
    "TrajectorySamples",
    "FeasibilityReport",
    "build_nlp",
    "initial_guess",
    "encode_trajectory",
    "extract_solution",
    "eval_derivatives",
    "evaluate_objective",
    "sample_trajectory",
    "check_feasibility",
]


class TranscriptionError(ValueError):
    """Inconsistent horizon/instance configuration."""


@dataclass
class HorizonConfig:
    """Horizon shape: step count, step-length bounds and budget/terminal handling.

    ``c_max`` is the required total trajectory time (the travel budget in
    static-kop mode, the horizon time T_h in receding-horizon mode); ``None``
    leaves the total time free.
    """

    n_h: int
    t_min: float = 0.1
    t_max: float = 0.9
    c_max: Optional[float] = None
    mode: str = "static-kop"
    p_f: Optional[np.ndarray] = None
    terminal_hard: bool = False
    per_axis: bool = False
    pin_first_step: bool = True

    def __post_init__(self):
        if self.p_f is not None:
            self.p_f = np.asarray(self.p_f, float).reshape(3)
        if self.mode not in ("static-kop", "receding-horizon"):
            raise TranscriptionError(f"unknown mode {self.mode!r}")
        if self.n_h < 2:
            raise TranscriptionError(f"n_h must be >= 2, got {self.n_h}")
        if not (0 < self.t_min <= self.t_max):
            raise TranscriptionError(
                f"step bounds must satisfy 0 < t_min <= t_max, got {self.t_min}, {self.t_max}")
        if self.c_max is not None:
            if not (self.n_h * self.t_min <= self.c_max <= self.n_h * self.t_max):
                raise TranscriptionError(
                    f"budget {self.c_max} outside reachable range "
                    f"[{self.n_h * self.t_min}, {self.n_h * self.t_max}] for n_h={self.n_h}")
        if self.terminal_hard and self.p_f is None:
            raise TranscriptionError("terminal_hard requires p_f")

    @property
    def soft_terminal(self) -> bool:
        return self.p_f is not None and not self.terminal_hard


@dataclass
class SolveStats:
    iterations: int = 0
    wall_time: float = 0.0
    constraint_violation: float = np.inf
    optimality: float = np.inf
    message: str = ""


@dataclass
class NlpProblem:
    """A smooth, bounded, sparse NLP.

    ``eq(z)`` are equalities (== 0), ``ineq(z)`` inequalities (<= 0); the
    Jacobian callbacks return CSR matrices whose sparsity pattern never
    changes between evaluations.
    """

    n: int
    lb: np.ndarray
    ub: np.ndarray
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    eq: Callable[[np.ndarray], np.ndarray]
    jac_eq: Callable[[np.ndarray], sp.csr_matrix]
    ineq: Callable[[np.ndarray], np.ndarray] = None
    jac_ineq: Callable[[np.ndarray], sp.csr_matrix] = None
    m_eq: int = 0
    m_ineq: int = 0
    eq_pattern: tuple = None   # (rows, cols)
    ineq_pattern: tuple = None
    layout: "Layout" = None
    instance: ProblemInstance = None
    horizon: HorizonConfig = None

    def __post_init__(self):
        if self.ineq is None:
            self.ineq = lambda z: np.zeros(0)
            self.jac_ineq = lambda z: sp.csr_matrix((0, self.n))


@dataclass(frozen=True)
class Layout:
    """Index map from (step, quantity) to decision-vector indices."""

    n_h: int
    n_t: int

    @property
    def state_dim(self) -> int:
        return 11 + self.n_t

    @property
    def stride(self) -> int:
        return self.state_dim + 5

    @property
    def n_vars(self) -> int:
        return (self.n_h + 1) * self.state_dim + 5 * self.n_h

    def state_indices(self) -> np.ndarray:
        """(n_h+1, state_dim) variable indices of all state blocks."""
        k = np.arange(self.n_h + 1)[:, None]
        return k * self.stride + np.arange(self.state_dim)[None, :]

    def input_indices(self) -> np.ndarray:
        """(n_h, 5) variable indices of all input blocks."""
        k = np.arange(self.n_h)[:, None]
        return k * self.stride + self.state_dim + np.arange(5)[None, :]

    # slices inside a state block
    P = slice(0, 3)
    V = slice(3, 6)
    A = slice(6, 9)
    PSI = 9
    G0 = 10

    @property
    def TS(self) -> int:
        return 10 + self.n_t


class _CsrTemplate:
    """Fixed-pattern CSR matrix refilled from concatenated COO data."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape):
        nnz = rows.size
        coo = sp.coo_matrix((np.arange(1, nnz + 1, dtype=np.int64), (rows, cols)), shape=shape)
        mat = coo.tocsr()
        if mat.nnz != nnz:
            raise AssertionError("duplicate entries in Jacobian pattern")
        self._perm = mat.data.astype(np.int64) - 1
        self._mat = mat
        self.rows = rows
        self.cols = cols
        self.shape = shape

    def fill(self, data: np.ndarray) -> sp.csr_matrix:
        out = self._mat.copy()
        out.data = np.asarray(data, float)[self._perm]
        return out


class _Transcription:
    """Callback engine behind build_nlp; immutable after construction."""

    def __init__(self, instance: ProblemInstance, horizon: HorizonConfig):
        self.instance = instance
        self.horizon = horizon
        self.layout = lay = Layout(n_h=horizon.n_h, n_t=instance.n_targets)
        self.sidx = lay.state_indices()
        self.uidx = lay.input_indices()
        self.alpha = np.array([t.alpha_g for t in instance.targets], float)
        self._cache_key = None
        self._cache = None
        self._build_patterns()

    # -- shared intermediates -------------------------------------------------

    def _eval_common(self, z: np.ndarray) -> dict:
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        lay = self.layout
        X = z[self.sidx]                   # (n_h+1, S)
        U = z[self.uidx]                   # (n_h, 5)
        c = {
            "X": X, "U": U,
            "P": X[:, lay.P], "V": X[:, lay.V], "A": X[:, lay.A],
            "PSI": X[:, lay.PSI], "G": X[:, lay.G0:lay.G0 + lay.n_t],
            "TS": X[:, lay.TS],
            "J": U[:, 0:3], "PSID": U[:, 3], "T": U[:, 4],
        }
        nt = lay.n_t
        if nt:
            tau = self.instance.t0_abs + c["TS"][:-1]           # (n_h,)
            Q = self.instance.target_positions(tau)             # (n_h, n_t, 3)
            Qd = np.stack(
                [tg.motion.velocity(tau) for tg in self.instance.targets], axis=-2)
            delta = c["P"][:-1, None, :] - Q                    # (n_h, n_t, 3)
            s = np.einsum("kti,kti->kt", delta, delta)
            f = butterworth_sq(s, self.instance.sensor)
            m = self.instance.sensor.n_b // 2
            cb2 = self.instance.sensor.c_b ** 2
            # d f / d s, smooth at s = 0 for even order
            if m == 1:
                dyds = np.full_like(s, 1.0 / cb2)
            else:
                dyds = m * (s / cb2) ** (m - 1) / cb2
            fp = -dyds * f * f
            w = c["G"][:-1] + self.alpha[None, :] * c["T"][:, None]
            c.update(Q=Q, Qd=Qd, delta=delta, f=f, fp=fp, w=w)
        self._cache_key = key
        self._cache = c
        return c

    # -- objective ------------------------------------------------------------

    def objective(self, z: np.ndarray) -> float:
        c = self._eval_common(np.asarray(z, float))
        w = self.instance.weights
        obj = float(np.sum(c["G"]))
        obj += w.k_psi * float(np.sum(
            -(c["V"][:, 0] * np.cos(c["PSI"]) + c["V"][:, 1] * np.sin(c["PSI"]))))
        D = c["U"][1:] - c["U"][:-1]
        obj += float(np.einsum("ki,i,ki->", D, w.c_u, D))
        if self.horizon.soft_terminal:
            obj += w.k_f * float(np.linalg.norm(c["P"][-1] - self.horizon.p_f))
        return obj

    def gradient(self, z: np.ndarray) -> np.ndarray:
        c = self._eval_common(np.asarray(z, float))
        lay = self.layout
        w = self.instance.weights
        g = np.zeros(lay.n_vars)
        sidx, uidx = self.sidx, self.uidx
        if lay.n_t:
            g[sidx[:, lay.G0:lay.G0 + lay.n_t]] += 1.0
        cos, sin = np.cos(c["PSI"]), np.sin(c["PSI"])
        g[sidx[:, 3]] += -w.k_psi * cos
        g[sidx[:, 4]] += -w.k_psi * sin
        g[sidx[:, lay.PSI]] += w.k_psi * (c["V"][:, 0] * sin - c["V"][:, 1] * cos)
        D = c["U"][1:] - c["U"][:-1]
        W = 2.0 * w.c_u[None, :] * D
        np.add.at(g, uidx[1:].ravel(), W.ravel())
        np.subtract.at(g, uidx[:-1].ravel(), W.ravel())
        if self.horizon.soft_terminal:
            r = c["P"][-1] - self.horizon.p_f
            nrm = np.linalg.norm(r)
            if nrm > 0:
                g[sidx[-1, lay.P]] += w.k_f * r / nrm
        return g

    # -- equality constraints ---------------------------------------------------

    def eq(self, z: np.ndarray) -> np.ndarray:
        c = self._eval_common(np.asarray(z, float))
        lay = self.layout
        n_h, S = lay.n_h, lay.state_dim
        P, V, A, PSI, G, TS = c["P"], c["V"], c["A"], c["PSI"], c["G"], c["TS"]
        J, PSID, T = c["J"], c["PSID"], c["T"]
        t = T[:, None]
        out = np.empty((n_h, S))
        out[:, lay.P] = P[1:] - P[:-1] - V[:-1] * t - 0.5 * A[:-1] * t**2 - J * t**3 / 6.0
        out[:, lay.V] = V[1:] - V[:-1] - A[:-1] * t - 0.5 * J * t**2
        out[:, lay.A] = A[1:] - A[:-1] - J * t
        out[:, lay.PSI] = PSI[1:] - PSI[:-1] - PSID * T
        if lay.n_t:
            out[:, lay.G0:lay.G0 + lay.n_t] = G[1:] - c["w"] * (1.0 - c["f"])
        out[:, lay.TS] = TS[1:] - TS[:-1] - T
        res = out.ravel()
        if self.horizon.c_max is not None:
            res = np.append(res, TS[-1] - self.horizon.c_max)
        return res

    def ineq(self, z: np.ndarray) -> np.ndarray:
        if self.horizon.per_axis:
            return np.zeros(0)
        c = self._eval_common(np.asarray(z, float))
        b = self.instance.bounds
        out = np.empty((self.layout.n_h + 1, 2))
        out[:, 0] = np.einsum("ki,ki->k", c["V"], c["V"]) - b.v_max**2
        out[:, 1] = np.einsum("ki,ki->k", c["A"], c["A"]) - b.a_max**2
        return out.ravel()

    # -- Jacobians ----------------------------------------------------------------

    def _build_patterns(self):
        lay = self.layout
        n_h, nt, S = lay.n_h, lay.n_t, lay.state_dim
        sidx, uidx = self.sidx, self.uidx
        k = np.arange(n_h)
        base = (k * S)[:, None]

        rows_p = base + np.arange(3)
        rows_v = base + 3 + np.arange(3)
        rows_a = base + 6 + np.arange(3)
        rows_psi = k * S + lay.PSI
        rows_g = base + lay.G0 + np.arange(nt) if nt else np.zeros((n_h, 0), int)
        rows_ts = k * S + lay.TS

        tcol = uidx[:, 4]
        fams = []  # (rows, cols) arrays, raveled; data supplied at eval in same order

        def add(rows, cols):
            fams.append((np.broadcast_to(rows, np.broadcast(rows, cols).shape).ravel(),
                         np.broadcast_to(cols, np.broadcast(rows, cols).shape).ravel()))

        # p defect
        add(rows_p, sidx[1:, lay.P]); add(rows_p, sidx[:-1, lay.P])
        add(rows_p, sidx[:-1, lay.V]); add(rows_p, sidx[:-1, lay.A])
        add(rows_p, uidx[:, 0:3]); add(rows_p, tcol[:, None])
        # v defect
        add(rows_v, sidx[1:, lay.V]); add(rows_v, sidx[:-1, lay.V])
        add(rows_v, sidx[:-1, lay.A]); add(rows_v, uidx[:, 0:3]); add(rows_v, tcol[:, None])
        # a defect
        add(rows_a, sidx[1:, lay.A]); add(rows_a, sidx[:-1, lay.A])
        add(rows_a, uidx[:, 0:3]); add(rows_a, tcol[:, None])
        # psi defect
        add(rows_psi, sidx[1:, lay.PSI]); add(rows_psi, sidx[:-1, lay.PSI])
        add(rows_psi, uidx[:, 3]); add(rows_psi, tcol)
        # gain defects
        if nt:
            gsl = slice(lay.G0, lay.G0 + nt)
            add(rows_g, sidx[1:, gsl]); add(rows_g, sidx[:-1, gsl])
            add(rows_g, tcol[:, None])
            add(rows_g[:, :, None], sidx[:-1, None, lay.P])   # wrt p_k
            add(rows_g, sidx[:-1, lay.TS][:, None])           # wrt t_sum,k
        # t_sum defect
        add(rows_ts, sidx[1:, lay.TS]); add(rows_ts, sidx[:-1, lay.TS]); add(rows_ts, tcol)
        # budget row
        m_eq = n_h * S
        if self.horizon.c_max is not None:
            add(np.array([m_eq]), np.array([sidx[-1, lay.TS]]))
            m_eq += 1

        rows = np.concatenate([r for r, _ in fams])
        cols = np.concatenate([c for _, c in fams])
        self.m_eq = m_eq
        self._eq_tpl = _CsrTemplate(rows, cols, (m_eq, lay.n_vars))

        if self.horizon.per_axis:
            self.m_ineq = 0
            self._in_tpl = None
        else:
            ki = np.arange(n_h + 1)
            rv = (2 * ki)[:, None] + np.zeros(3, int)
            ra = (2 * ki + 1)[:, None] + np.zeros(3, int)
            rows_i = np.concatenate([rv.ravel(), ra.ravel()])
            cols_i = np.concatenate([sidx[:, lay.V].ravel(), sidx[:, lay.A].ravel()])
            self.m_ineq = 2 * (n_h + 1)
            self._in_tpl = _CsrTemplate(rows_i, cols_i, (self.m_ineq, lay.n_vars))

    def jac_eq(self, z: np.ndarray) -> sp.csr_matrix:
        c = self._eval_common(np.asarray(z, float))
        lay = self.layout
        n_h, nt = lay.n_h, lay.n_t
        J, PSID, T = c["J"], c["PSID"], c["T"]
        V, A = c["V"], c["A"]
        t = T[:, None]
        one3 = np.ones((n_h, 3))
        data = [
            # p defect
            one3, -one3, -t * one3, -0.5 * t**2 * one3, -(t**3 / 6.0) * one3,
            -(V[:-1] + A[:-1] * t + 0.5 * J * t**2),
            # v defect
            one3, -one3, -t * one3, -0.5 * t**2 * one3, -(A[:-1] + J * t),
            # a defect
            one3, -one3, -t * one3, -J,
            # psi defect
            np.ones(n_h), -np.ones(n_h), -T, -PSID,
        ]
        if nt:
            f, fp, w, delta, Qd = c["f"], c["fp"], c["w"], c["delta"], c["Qd"]
            data += [
                np.ones((n_h, nt)), -(1.0 - f), -self.alpha[None, :] * (1.0 - f),
                (w * fp)[:, :, None] * 2.0 * delta,
                -2.0 * w * fp * np.einsum("kti,kti->kt", delta, Qd),
            ]
        data += [np.ones(n_h), -np.ones(n_h), -np.ones(n_h)]
        if self.horizon.c_max is not None:
            data.append(np.ones(1))
        return self._eq_tpl.fill(np.concatenate([np.asarray(d, float).ravel() for d in data]))

    def jac_ineq(self, z: np.ndarray) -> sp.csr_matrix:
        if self._in_tpl is None:
            return sp.csr_matrix((0, self.layout.n_vars))
        c = self._eval_common(np.asarray(z, float))
        data = np.concatenate([2.0 * c["V"].ravel(), 2.0 * c["A"].ravel()])
        return self._in_tpl.fill(data)

    # -- bounds -------------------------------------------------------------------

    def bounds(self):
        lay = self.layout
        b = self.instance.bounds
        h = self.horizon
        lb = np.full(lay.n_vars, -np.inf)
        ub = np.full(lay.n_vars, np.inf)
        sidx, uidx = self.sidx, self.uidx
        # inputs
        lb[uidx[:, 0:3]] = -b.j_max
        ub[uidx[:, 0:3]] = b.j_max
        lb[uidx[:, 3]] = -b.psi_rate_max
        ub[uidx[:, 3]] = b.psi_rate_max
        lb[uidx[:, 4]] = h.t_min
        ub[uidx[:, 4]] = h.t_max
        if h.pin_first_step:
            ub[uidx[0, 4]] = h.t_min
        # cumulative time is non-negative
        lb[sidx[:, lay.TS]] = 0.0
        if h.c_max is not None:
            ub[sidx[:, lay.TS]] = h.c_max
        # implied boxes: reward gains stay in [0, g0 + alpha * horizon time]
        # under the gain dynamics, and the norm limits imply per-component
        # v/a boxes; neither cuts the feasible set but both tame the
        # unconstrained subproblems
        if lay.n_t:
            t_total = h.c_max if h.c_max is not None else lay.n_h * h.t_max
            g0 = self.instance.gains0()
            alpha = np.array([t.alpha_g for t in self.instance.targets])
            lb[sidx[:, lay.G0:lay.G0 + lay.n_t]] = 0.0
            ub[sidx[:, lay.G0:lay.G0 + lay.n_t]] = g0 + alpha * t_total
        lb[sidx[:, lay.V]] = -b.v_max
        ub[sidx[:, lay.V]] = b.v_max
        lb[sidx[:, lay.A]] = -b.a_max
        ub[sidx[:, lay.A]] = b.a_max
        # initial-state pin
        x0 = np.concatenate([self.instance.start.as_array(), self.instance.gains0(), [0.0]])
        lb[sidx[0]] = x0
        ub[sidx[0]] = x0
        # hard terminal pin
        if h.terminal_hard:
            lb[sidx[-1, lay.P]] = h.p_f
            ub[sidx[-1, lay.P]] = h.p_f
            lb[sidx[-1, lay.V]] = 0.0
            ub[sidx[-1, lay.V]] = 0.0
        return lb, ub


def build_nlp(instance: ProblemInstance, horizon: HorizonConfig) -> NlpProblem:
    """Assemble the optimal control problem as a sparse, bounded NLP."""
    tr = _Transcription(instance, horizon)
    lb, ub = tr.bounds()
    return NlpProblem(
        n=tr.layout.n_vars, lb=lb, ub=ub,
        objective=tr.objective, gradient=tr.gradient,
        eq=tr.eq, jac_eq=tr.jac_eq,
        ineq=tr.ineq, jac_ineq=tr.jac_ineq,
        m_eq=tr.m_eq, m_ineq=tr.m_ineq,
        eq_pattern=(tr._eq_tpl.rows, tr._eq_tpl.cols),
        ineq_pattern=(tr._in_tpl.rows, tr._in_tpl.cols) if tr._in_tpl is not None else (np.zeros(0, int),) * 2,
        layout=tr.layout, instance=instance, horizon=horizon,
    )


def eval_derivatives(nlp: NlpProblem, z: np.ndarray):
    """Objective gradient plus equality/inequality constraint Jacobians (CSR)."""
    z = np.asarray(z, float)
    if z.shape != (nlp.n,):
        raise TranscriptionError(f"decision vector has shape {z.shape}, expected ({nlp.n},)")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite decision vector")
    return nlp.gradient(z), nlp.jac_eq(z), nlp.jac_ineq(z)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class PlannedTrajectory:
    """A (candidate) solution decoded from the decision vector.

    Knot arrays have n_h+1 state rows and n_h input rows; ``t_sum`` is the
    prefix sum of the step lengths with t_sum[0] = 0.
    """

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    psi: np.ndarray
    gains: np.ndarray
    t_sum: np.ndarray
    j: np.ndarray
    psi_rate: np.ndarray
    t_steps: np.ndarray
    objective: float = np.nan
    converged: bool = False
    stats: SolveStats = field(default_factory=SolveStats)
    defect_residual: float = np.nan
    t0_abs: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.t_steps)

    @property
    def duration(self) -> float:
        return float(self.t_sum[-1])

    def state(self, k: int) -> VehicleState:
        return VehicleState(p=self.p[k], v=self.v[k], a=self.a[k], psi=self.psi[k])

    def input(self, k: int) -> ControlInput:
        return ControlInput(j=self.j[k], psi_rate=self.psi_rate[k], t_step=self.t_steps[k])


def encode_trajectory(nlp: NlpProblem, traj: PlannedTrajectory) -> np.ndarray:
    """Inverse of extract_solution: pack knot arrays into a decision vector."""
    lay = nlp.layout
    tr_s, tr_u = lay.state_indices(), lay.input_indices()
    z = np.zeros(nlp.n)
    z[tr_s[:, lay.P]] = traj.p
    z[tr_s[:, lay.V]] = traj.v
    z[tr_s[:, lay.A]] = traj.a
    z[tr_s[:, lay.PSI]] = traj.psi
    if lay.n_t:
        z[tr_s[:, lay.G0:lay.G0 + lay.n_t]] = traj.gains
    z[tr_s[:, lay.TS]] = traj.t_sum
    z[tr_u[:, 0:3]] = traj.j
    z[tr_u[:, 3]] = traj.psi_rate
    z[tr_u[:, 4]] = traj.t_steps
    return z


def extract_solution(nlp: NlpProblem, z: np.ndarray, stats: SolveStats = None,
                     converged: bool = False) -> PlannedTrajectory:
    """Decode a decision vector; recomputes the defect residual max-norm."""
    z = np.asarray(z, float)
    if z.shape != (nlp.n,):
        raise TranscriptionError(f"decision vector has shape {z.shape}, expected ({nlp.n},)")
    lay = nlp.layout
    tr_s, tr_u = lay.state_indices(), lay.input_indices()
    res = nlp.eq(z)
    return PlannedTrajectory(
        p=z[tr_s[:, lay.P]].copy(), v=z[tr_s[:, lay.V]].copy(), a=z[tr_s[:, lay.A]].copy(),
        psi=z[tr_s[:, lay.PSI]].copy(),
        gains=z[tr_s[:, lay.G0:lay.G0 + lay.n_t]].copy(),
        t_sum=z[tr_s[:, lay.TS]].copy(),
        j=z[tr_u[:, 0:3]].copy(), psi_rate=z[tr_u[:, 3]].copy(), t_steps=z[tr_u[:, 4]].copy(),
        objective=float(nlp.objective(z)),
        converged=converged,
        stats=stats if stats is not None else SolveStats(),
        defect_residual=float(np.max(np.abs(res))) if res.size else 0.0,
        t0_abs=nlp.instance.t0_abs if nlp.instance is not None else 0.0,
    )


def evaluate_objective(traj: PlannedTrajectory, instance: ProblemInstance,
                       horizon: HorizonConfig) -> float:
    """Independent re-evaluation of the objective from model-level cost terms."""
    w = instance.weights
    total = 0.0
    n_h = traj.n_steps
    for k in range(n_h + 1):
        if k == 0 or k >= n_h:
            du = np.zeros(5)
        else:
            du = traj.input(k).as_array() - traj.input(k - 1).as_array()
        total += stage_cost(traj.gains[k], heading_cost(traj.v[k], traj.psi[k]), du, w)
    if horizon.soft_terminal:
        total += terminal_cost(traj.p[-1], horizon.p_f, w.k_f)
    return total


# ---------------------------------------------------------------------------
# initial guesses
# ---------------------------------------------------------------------------

def _simulate_gains(instance: ProblemInstance, p: np.ndarray, t_steps: np.ndarray,
                    t_sum: np.ndarray, g0: np.ndarray) -> np.ndarray:
    """Forward-simulate reward-gain dynamics along a position sequence."""
    n_h, n_t = len(t_steps), len(g0)
    gains = np.zeros((n_h + 1, n_t))
    gains[0] = g0
    if n_t == 0:
        return gains
    alpha = np.array([t.alpha_g for t in instance.targets])
    for k in range(n_h):
        q = instance.target_positions(instance.t0_abs + t_sum[k])
        d_sq = np.sum((p[k][None, :] - q) ** 2, axis=-1)
        f = butterworth_sq(d_sq, instance.sensor)
        gains[k + 1] = (gains[k] + alpha * t_steps[k]) * (1.0 - f)
    return gains


def _cold_rollout_guess(nlp, instance: ProblemInstance,
                        horizon: HorizonConfig) -> np.ndarray:
    """Defect-consistent cold start.

    Fits a per-axis quintic from the start state to rest at p_f (or at the
    start position when no terminal point is given), samples its jerk at
    segment midpoints, and rolls the model dynamics out exactly, so every
    defect row holds at the guess.
    """
    n_h = horizon.n_h
    if horizon.c_max is not None:
        t_nom = float(np.clip(horizon.c_max / n_h, horizon.t_min, horizon.t_max))
    else:
        t_nom = 0.5 * (horizon.t_min + horizon.t_max)
    t_steps = np.full(n_h, t_nom)
    if horizon.pin_first_step:
        t_steps[0] = horizon.t_min
        if horizon.c_max is not None and n_h > 1:
            t_steps[1:] = np.clip((horizon.c_max - t_steps[0]) / (n_h - 1),
                                  horizon.t_min, horizon.t_max)
    t_sum = np.concatenate([[0.0], np.cumsum(t_steps)])
    T = t_sum[-1]

    start = instance.start
    p_f = horizon.p_f if horizon.p_f is not None else start.p
    # quintic boundary-value fit per axis: (p0, v0, a0) -> (p_f, 0, 0)
    c0, c1, c2 = start.p, start.v, 0.5 * start.a
    dp = p_f - (c0 + c1 * T + c2 * T**2)
    dv = -(c1 + 2.0 * c2 * T)
    da = -2.0 * c2
    c3 = (10.0 * dp - 4.0 * dv * T + 0.5 * da * T**2) / T**3
    c4 = (-15.0 * dp + 7.0 * dv * T - da * T**2) / T**4
    c5 = (6.0 * dp - 3.0 * dv * T + 0.5 * da * T**2) / T**5

    t_mid = 0.5 * (t_sum[:-1] + t_sum[1:])[:, None]
    j = 6.0 * c3[None, :] + 24.0 * c4[None, :] * t_mid + 60.0 * c5[None, :] * t_mid**2
    j = np.clip(j, -instance.bounds.j_max, instance.bounds.j_max)

    p = np.zeros((n_h + 1, 3)); v = np.zeros((n_h + 1, 3)); a = np.zeros((n_h + 1, 3))
    psi = np.full(n_h + 1, start.psi)
    p[0], v[0], a[0] = start.p, start.v, start.a
    state = start
    for k in range(n_h):
        state = propagate_state(state, ControlInput(j=j[k], psi_rate=0.0,
                                                    t_step=t_steps[k]))
        p[k + 1], v[k + 1], a[k + 1], psi[k + 1] = state.p, state.v, state.a, state.psi

    traj = PlannedTrajectory(
        p=p, v=v, a=a, psi=psi,
        gains=_simulate_gains(instance, p, t_steps, t_sum, instance.gains0()),
        t_sum=t_sum, j=j, psi_rate=np.zeros(n_h), t_steps=t_steps,
        t0_abs=instance.t0_abs)
    return encode_trajectory(nlp, traj)


def initial_guess(instance: ProblemInstance, horizon: HorizonConfig,
                  strategy: str = "cold", previous: PlannedTrajectory = None,
                  shift_time: float = None) -> np.ndarray:
    """Build a starting decision vector.

    ``cold``: uniform nominal steps, straight-line positions toward p_f (or
    held at the start), zero v/a/jerk, gains forward-simulated so the gain and
    time defects hold at the guess.  ``shift``: the previous solution advanced
    by ``shift_time`` with the final step duplicated and gains re-simulated.
    """
    nlp = build_nlp(instance, horizon)
    n_h = horizon.n_h
    if strategy == "cold":
        return _cold_rollout_guess(nlp, instance, horizon)

    if strategy == "shift":
        if previous is None or shift_time is None:
            raise TranscriptionError("shift strategy needs a previous trajectory and shift_time")
        if previous.n_steps != n_h:
            raise TranscriptionError("previous trajectory has a different horizon length")
        return _shift_guess(nlp, instance, horizon, previous, float(shift_time))

    raise TranscriptionError(f"unknown initial-guess strategy {strategy!r}")


def _shift_guess(nlp, instance, horizon, prev: PlannedTrajectory, shift: float) -> np.ndarray:
    n_h = horizon.n_h
    shift = min(max(shift, 0.0), prev.duration)
    x0 = _state_at(prev, shift)
    # knots strictly after the shift point
    keep = np.nonzero(prev.t_sum > shift + 1e-12)[0]
    p = [x0[0]]; v = [x0[1]]; a = [x0[2]]; psi = [x0[3]]
    js = []; prs = []; ts = []
    cursor = shift
    for i in keep:
        seg = i - 1  # input segment ending at knot i
        ts.append(prev.t_sum[i] - cursor)
        js.append(prev.j[seg]); prs.append(prev.psi_rate[seg])
        p.append(prev.p[i]); v.append(prev.v[i]); a.append(prev.a[i]); psi.append(prev.psi[i])
        cursor = prev.t_sum[i]
    # duplicate the final input until the horizon is full again
    while len(js) < n_h:
        if js:
            j_last, pr_last, t_last = js[-1], prs[-1], ts[-1]
        else:
            j_last, pr_last, t_last = np.zeros(3), 0.0, horizon.t_min
        js.append(np.asarray(j_last)); prs.append(pr_last); ts.append(float(t_last))
    js = js[:n_h]; prs = prs[:n_h]; ts = ts[:n_h]
    # restore the budget equality and the step box, then re-propagate the
    # whole knot chain so the dynamic defects hold exactly at the guess
    ts = np.clip(np.asarray(ts), horizon.t_min, horizon.t_max)
    if horizon.c_max is not None:
        lo = np.full(n_h, horizon.t_min)
        hi = np.full(n_h, horizon.t_max)
        if horizon.pin_first_step:
            lo[0] = hi[0] = horizon.t_min
            ts[0] = horizon.t_min
        for _ in range(64):
            gap = horizon.c_max - float(np.sum(ts))
            if abs(gap) < 1e-12:
                break
            free = (ts < hi - 1e-15) if gap > 0 else (ts > lo + 1e-15)
            if not np.any(free):
                break
            ts[free] = np.clip(ts[free] + gap / np.count_nonzero(free),
                               lo[free], hi[free])
    from .model import propagate_state
    state = VehicleState(p=p[0], v=v[0], a=a[0], psi=psi[0])
    p, v, a, psi = [state.p], [state.v], [state.a], [state.psi]
    for k in range(n_h):
        state = propagate_state(state, ControlInput(j=js[k], psi_rate=prs[k],
                                                    t_step=float(ts[k])))
        p.append(state.p); v.append(state.v); a.append(state.a); psi.append(state.psi)
    t_sum = np.concatenate([[0.0], np.cumsum(ts)])
    p = np.asarray(p); v = np.asarray(v); a = np.asarray(a); psi = np.asarray(psi)
    gains = _simulate_gains(instance, p, ts, t_sum, instance.gains0())
    traj = PlannedTrajectory(p=p, v=v, a=a, psi=psi, gains=gains, t_sum=t_sum,
                             j=np.asarray(js[:n_h]), psi_rate=np.asarray(prs[:n_h]),
                             t_steps=ts, t0_abs=instance.t0_abs)
    return encode_trajectory(nlp, traj)


def _state_at(traj: PlannedTrajectory, t: float):
    """(p, v, a, psi) on the trajectory at local time t, clamped to its end."""
    if t >= traj.duration:
        return traj.p[-1].copy(), traj.v[-1].copy(), traj.a[-1].copy(), float(traj.psi[-1])
    k = int(np.searchsorted(traj.t_sum, t, side="right") - 1)
    k = min(max(k, 0), traj.n_steps - 1)
    h = t - traj.t_sum[k]
    jk = traj.j[k]
    p = traj.p[k] + traj.v[k] * h + 0.5 * traj.a[k] * h**2 + jk * h**3 / 6.0
    v = traj.v[k] + traj.a[k] * h + 0.5 * jk * h**2
    a = traj.a[k] + jk * h
    psi = traj.psi[k] + traj.psi_rate[k] * h
    return p, v, a, float(psi)


# ---------------------------------------------------------------------------
# dense sampling and feasibility audit
# ---------------------------------------------------------------------------

@dataclass
class TrajectorySamples:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    psi: np.ndarray
    j: np.ndarray
    psi_rate: np.ndarray


def sample_trajectory(traj: PlannedTrajectory, dt: float) -> TrajectorySamples:
    """Exact piecewise constant-jerk evaluation at {0, dt, 2dt, ..., duration}."""
    if dt <= 0:
        raise TranscriptionError("dt must be positive")
    if traj.n_steps == 0:
        raise TranscriptionError("empty trajectory")
    total = traj.duration
    times = np.arange(0.0, total, dt)
    if times.size == 0 or total - times[-1] > 1e-12:
        times = np.append(times, total)
    k = np.searchsorted(traj.t_sum, times, side="right") - 1
    k = np.clip(k, 0, traj.n_steps - 1)
    h = (times - traj.t_sum[k])[:, None]
    jk = traj.j[k]
    p = traj.p[k] + traj.v[k] * h + 0.5 * traj.a[k] * h**2 + jk * h**3 / 6.0
    v = traj.v[k] + traj.a[k] * h + 0.5 * jk * h**2
    a = traj.a[k] + jk * h
    psi = traj.psi[k] + traj.psi_rate[k] * h[:, 0]
    return TrajectorySamples(t=times, p=p, v=v, a=a, psi=psi,
                             j=jk.copy(), psi_rate=traj.psi_rate[k].copy())


@dataclass
class FeasibilityReport:
    ok: bool
    worst: dict  # name -> {"value", "limit", "margin", "time"}

    def __str__(self):
        lines = ["feasibility: " + ("OK" if self.ok else "VIOLATED")]
        for name, rec in self.worst.items():
            lines.append(
                f"  {name:10s} worst {rec['value']:.6g} / limit {rec['limit']:.6g} "
                f"(margin {rec['margin']:+.3g}) at t={rec['time']:.3f}s")
        return "\n".join(lines)


def check_feasibility(samples: TrajectorySamples, bounds: KinematicBounds,
                      tol: float = 1e-3) -> FeasibilityReport:
    """Audit dense samples against kinematic limits with relative slack tol."""
    if samples.t.size == 0:
        raise TranscriptionError("empty sample set")
    checks = {
        "v_norm": (np.linalg.norm(samples.v, axis=1), bounds.v_max),
        "a_norm": (np.linalg.norm(samples.a, axis=1), bounds.a_max),
        "j_axis": (np.max(np.abs(samples.j), axis=1), bounds.j_max),
        "psi_rate": (np.abs(samples.psi_rate), bounds.psi_rate_max),
    }
    worst = {}
    ok = True
    for name, (vals, limit) in checks.items():
        i = int(np.argmax(vals))
        margin = float(limit * (1.0 + tol) - vals[i])
        worst[name] = {"value": float(vals[i]), "limit": float(limit),
                       "margin": margin, "time": float(samples.t[i])}
        if margin < 0:
            ok = False
    return FeasibilityReport(ok=ok, worst=worst)
