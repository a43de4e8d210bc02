"""Deadline-aware NLP solving behind a pluggable engine registry.

The built-in engine is an augmented-Lagrangian outer loop (LANCELOT-style
multiplier and penalty schedules) whose bound-constrained subproblems are
minimized with scipy's projected limited-memory quasi-Newton solver
(L-BFGS-B).  Inequalities use the Rockafellar shifted-penalty form, so no
slack variables are introduced.  External engines (e.g. an interior-point
library) attach through :func:`register_engine` with the same callback
contract: objective/gradient, equality and inequality constraints, sparse
Jacobians and box bounds, all carried by the NlpProblem.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.optimize as sopt

from .transcription import NlpProblem, SolveStats

__all__ = [
    "SolveRequest",
    "SolveResult",
    "SolverError",
    "solve",
    "engine_registry",
    "register_engine",
    "try_register_ipopt",
]

log = logging.getLogger(__name__)


class SolverError(ValueError):
    """Malformed solve request."""


@dataclass
class SolveRequest:
    problem: NlpProblem
    warm_start: Optional[np.ndarray] = None
    deadline: Optional[float] = None
    tol_constraint: float = 1e-6
    tol_optimality: float = 1e-4
    max_iterations: int = 50000
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.deadline is not None and not (self.deadline > 0):
            raise SolverError(f"deadline must be positive, got {self.deadline}")
        if self.warm_start is not None:
            self.warm_start = np.asarray(self.warm_start, float)
            if self.warm_start.shape != (self.problem.n,):
                raise SolverError(
                    f"warm start has shape {self.warm_start.shape}, "
                    f"expected ({self.problem.n},)")


@dataclass
class SolveResult:
    converged: bool
    z: np.ndarray
    stats: SolveStats


# ---------------------------------------------------------------------------
# engine registry
# ---------------------------------------------------------------------------

_ENGINES: dict = {}


def register_engine(name: str, fn: Callable[[SolveRequest], SolveResult]):
    """Register a solver engine; rejects duplicate names."""
    if name in _ENGINES:
        raise SolverError(f"engine {name!r} already registered")
    _ENGINES[name] = fn


def engine_registry() -> list:
    """Names of available engines; always contains the built-in fallback."""
    return sorted(_ENGINES)


def try_register_ipopt() -> bool:
    """Attach an interior-point engine if cyipopt is importable."""
    if "ipopt" in _ENGINES:
        return True
    try:
        import cyipopt  # noqa: F401
    except ImportError:
        log.warning("ipopt engine requested but cyipopt is not installed; skipping")
        return False
    register_engine("ipopt", _solve_ipopt)
    return True


def solve(req: SolveRequest, engine: str = "builtin") -> SolveResult:
    """Solve the request with the named engine (deterministic per engine)."""
    if engine not in _ENGINES:
        raise SolverError(f"unknown engine {engine!r}; available: {engine_registry()}")
    return _ENGINES[engine](req)


# ---------------------------------------------------------------------------
# built-in augmented-Lagrangian engine
# ---------------------------------------------------------------------------

class _Deadline:
    def __init__(self, budget: Optional[float]):
        self.t0 = time.monotonic()
        self.budget = budget

    def exceeded(self) -> bool:
        return self.budget is not None and time.monotonic() - self.t0 > self.budget

    def elapsed(self) -> float:
        return time.monotonic() - self.t0


class _BestIterate:
    """(constraint violation, objective) merit tracking.

    Violations at or below the feasibility tolerance compare equal, so a
    better objective among feasible iterates is preferred; above it the
    comparison is lexicographic.
    """

    def __init__(self, n, tol):
        self.z = np.zeros(n)
        self.tol = tol
        self.viol = np.inf
        self.obj = np.inf

    def offer(self, z, viol, obj):
        if (max(viol, self.tol), obj) < (max(self.viol, self.tol), self.obj):
            self.z = z.copy()
            self.viol = viol
            self.obj = obj


def _violation(c_eq: np.ndarray, c_in: np.ndarray) -> float:
    v = 0.0
    if c_eq.size:
        v = float(np.max(np.abs(c_eq)))
    if c_in.size:
        v = max(v, float(np.max(np.clip(c_in, 0.0, None))))
    return v


def _solve_builtin(req: SolveRequest) -> SolveResult:
    nlp = req.problem
    opts = req.options
    deadline = _Deadline(req.deadline)
    rho = float(opts.get("rho0", 10.0))
    rho_max = float(opts.get("rho_max", 1e7))
    tau = float(opts.get("rho_growth", 10.0))
    max_outer = int(opts.get("max_outer", 60))
    lbfgs_m = int(opts.get("lbfgs_memory", 50))
    inner_cap = int(opts.get("inner_maxiter", 10000))

    z = req.warm_start.copy() if req.warm_start is not None else 0.5 * (np.where(
        np.isfinite(nlp.lb), nlp.lb, 0.0) + np.where(np.isfinite(nlp.ub), nlp.ub, 0.0))
    z = np.clip(z, nlp.lb, nlp.ub)
    lam = np.zeros(nlp.m_eq)
    mu = np.zeros(nlp.m_ineq)

    # LANCELOT-style subproblem tolerance / feasibility target schedules;
    # the subproblem tolerance never needs to go below the requested
    # optimality: after a multiplier update the projected Lagrangian
    # gradient equals the projected AL gradient the inner solver achieved.
    omega_floor = 0.5 * req.tol_optimality
    omega = max(float(opts.get("omega0", 1.0)) / rho, omega_floor)
    eta = float(opts.get("eta0", 1.0)) / rho**0.1

    best = _BestIterate(nlp.n, req.tol_constraint)
    total_iter = 0
    message = "iteration limit"
    converged = False
    failed_eval = False

    # most recent evaluation, so the per-iterate merit offer in the callback
    # normally costs an array comparison instead of a re-evaluation
    last_eval = {"x": None, "f": np.nan, "viol": np.inf}

    def al_fun(x):
        f = nlp.objective(x)
        g = nlp.gradient(x)
        c_eq = nlp.eq(x)
        val = f
        grad = g
        if c_eq.size:
            w = lam + rho * c_eq
            val += float(c_eq @ lam) + 0.5 * rho * float(c_eq @ c_eq)
            grad = grad + nlp.jac_eq(x).T @ w
        c_in = nlp.ineq(x)
        if c_in.size:
            w = np.maximum(0.0, mu + rho * c_in)
            val += float(np.sum(w**2 - mu**2)) / (2.0 * rho)
            grad = grad + nlp.jac_ineq(x).T @ w
        last_eval["x"] = x.copy()
        last_eval["f"] = f
        last_eval["viol"] = _violation(c_eq, c_in)
        return val, grad

    try:
        # the warm start competes on merit, so a feasible warm start is
        # never traded for a less feasible iterate
        best.offer(z, _violation(nlp.eq(z), nlp.ineq(z)), nlp.objective(z))
    except FloatingPointError as exc:
        message = f"warm-start evaluation failed: {exc}"
        failed_eval = True

    for _outer in range(max_outer):
        if failed_eval or deadline.exceeded() or total_iter >= req.max_iterations:
            if not failed_eval:
                message = ("deadline exceeded" if deadline.exceeded()
                           else "iteration limit")
            break

        def cb(xk):
            # every accepted inner iterate competes on merit, so a
            # deadline-bounded solve still returns its best visited point
            if last_eval["x"] is not None and np.array_equal(xk, last_eval["x"]):
                best.offer(xk, last_eval["viol"], last_eval["f"])
            else:
                best.offer(xk, _violation(nlp.eq(xk), nlp.ineq(xk)),
                           nlp.objective(xk))
            if deadline.exceeded():
                raise StopIteration

        inner_max = min(inner_cap, max(1, req.max_iterations - total_iter))
        try:
            res = sopt.minimize(
                al_fun, z, jac=True, method="L-BFGS-B",
                bounds=np.stack([nlp.lb, nlp.ub], axis=1),
                callback=cb,
                options={"maxiter": inner_max, "maxcor": lbfgs_m,
                         "ftol": 0.0, "gtol": omega})
            z = np.clip(res.x, nlp.lb, nlp.ub)
            total_iter += res.nit
        except FloatingPointError as exc:
            message = f"callback evaluation failed: {exc}"
            failed_eval = True
            break

        c_eq = nlp.eq(z)
        c_in = nlp.ineq(z)
        viol = _violation(c_eq, c_in)
        best.offer(z, viol, nlp.objective(z))

        # progress measure for the multiplier update uses the shifted
        # inequality residual max(c, -mu/rho)
        parts = []
        if c_eq.size:
            parts.append(float(np.max(np.abs(c_eq))))
        if c_in.size:
            parts.append(float(np.max(np.abs(np.maximum(c_in, -mu / rho)))))
        shifted = max(parts) if parts else 0.0

        if shifted <= max(eta, req.tol_constraint):
            lam = lam + rho * c_eq
            if mu.size:
                mu = np.maximum(0.0, mu + rho * c_in)
            opt = _projected_lagrangian_gradient(nlp, z, lam, mu)
            if viol <= req.tol_constraint and opt <= req.tol_optimality:
                converged = True
                message = "converged"
                break
            eta = max(eta / rho**0.9, req.tol_constraint)
            omega = max(omega / rho, omega_floor)
        else:
            rho = min(rho * tau, rho_max)
            eta = max(1.0 / rho**0.1, req.tol_constraint)
            omega = max(1.0 / rho, omega_floor)

    # a converged run reports its converged iterate; otherwise the best
    # iterate by (violation, objective) merit seen so far
    z_out = z if converged else (best.z if np.isfinite(best.viol) else z)
    c_eq = nlp.eq(z_out)
    c_in = nlp.ineq(z_out)
    stats = SolveStats(
        iterations=total_iter,
        wall_time=deadline.elapsed(),
        constraint_violation=_violation(c_eq, c_in),
        optimality=_projected_lagrangian_gradient(nlp, z_out, lam, mu),
        message=message,
    )
    if failed_eval:
        converged = False
    return SolveResult(converged=converged, z=z_out, stats=stats)


def _projected_lagrangian_gradient(nlp: NlpProblem, z, lam, mu) -> float:
    """Max-norm of the box-projected Lagrangian gradient (optimality measure)."""
    g = nlp.gradient(z)
    if lam.size:
        g = g + nlp.jac_eq(z).T @ lam
    if mu.size:
        g = g + nlp.jac_ineq(z).T @ mu
    step = np.clip(z - g, nlp.lb, nlp.ub) - z
    return float(np.max(np.abs(step))) if step.size else 0.0


def _solve_ipopt(req: SolveRequest) -> SolveResult:
    """Interior-point engine via cyipopt (available only when installed)."""
    import cyipopt

    nlp = req.problem
    t0 = time.monotonic()
    eq_rows, eq_cols = nlp.eq_pattern
    in_rows, in_cols = nlp.ineq_pattern

    class _Wrapper:
        def objective(self, x):
            return nlp.objective(x)

        def gradient(self, x):
            return nlp.gradient(x)

        def constraints(self, x):
            return np.concatenate([nlp.eq(x), nlp.ineq(x)])

        def jacobian(self, x):
            return np.concatenate([nlp.jac_eq(x).toarray()[eq_rows, eq_cols],
                                   nlp.jac_ineq(x).toarray()[in_rows, in_cols]])

        def jacobianstructure(self):
            return (np.concatenate([eq_rows, in_rows + nlp.m_eq]),
                    np.concatenate([eq_cols, in_cols]))

    cl = np.concatenate([np.zeros(nlp.m_eq), np.full(nlp.m_ineq, -np.inf)])
    cu = np.zeros(nlp.m_eq + nlp.m_ineq)
    prob = cyipopt.Problem(n=nlp.n, m=nlp.m_eq + nlp.m_ineq, problem_obj=_Wrapper(),
                           lb=nlp.lb, ub=nlp.ub, cl=cl, cu=cu)
    prob.add_option("hessian_approximation", "limited-memory")
    prob.add_option("tol", req.tol_optimality)
    prob.add_option("constr_viol_tol", req.tol_constraint)
    if req.deadline is not None:
        prob.add_option("max_wall_time", float(req.deadline))
    z0 = req.warm_start if req.warm_start is not None else np.clip(
        np.zeros(nlp.n), nlp.lb, nlp.ub)
    z, info = prob.solve(z0)
    stats = SolveStats(iterations=int(info.get("iter", 0)),
                       wall_time=time.monotonic() - t0,
                       constraint_violation=_violation(nlp.eq(z), nlp.ineq(z)),
                       optimality=np.nan, message=str(info.get("status_msg", "")))
    return SolveResult(converged=info["status"] == 0, z=z, stats=stats)


register_engine("builtin", _solve_builtin)
