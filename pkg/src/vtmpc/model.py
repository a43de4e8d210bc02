"""Point-mass vehicle, sensor and reward models.

Pure functions shared by the transcription and the replanning simulator:
constant-jerk state propagation, the Butterworth collection kernel, reward
gain dynamics, stage/terminal costs, and target motion models.  Everything
here is stateless and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "VehicleState",
    "ControlInput",
    "SensorModel",
    "TargetMotion",
    "StaticMotion",
    "TrefoilMotion",
    "FunctionMotion",
    "TargetSpec",
    "KinematicBounds",
    "CostWeights",
    "ProblemInstance",
    "butterworth",
    "butterworth_sq",
    "target_distance",
    "propagate_state",
    "propagate_reward",
    "heading_cost",
    "stage_cost",
    "terminal_cost",
    "trefoil_offset",
    "trefoil_velocity",
    "target_phase",
    "target_position",
]


class ModelError(ValueError):
    """Domain error in a model evaluation (non-finite or out-of-range input)."""


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v.copy()


@dataclass
class VehicleState:
    """Flat-output state: position, velocity, acceleration (3D) and heading."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    psi: float = 0.0

    def __post_init__(self):
        self.p = _vec3(self.p)
        self.v = _vec3(self.v)
        self.a = _vec3(self.a)
        self.psi = float(self.psi)

    @classmethod
    def rest(cls, p=(0.0, 0.0, 0.0), psi: float = 0.0) -> "VehicleState":
        return cls(p=np.asarray(p, float), v=np.zeros(3), a=np.zeros(3), psi=psi)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.a, [self.psi]])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        x = np.asarray(x, float).reshape(10)
        return cls(p=x[0:3], v=x[3:6], a=x[6:9], psi=x[9])


@dataclass
class ControlInput:
    """Model input: jerk vector, heading rate and the step length t_step."""

    j: np.ndarray
    psi_rate: float = 0.0
    t_step: float = 0.0

    def __post_init__(self):
        self.j = _vec3(self.j)
        self.psi_rate = float(self.psi_rate)
        self.t_step = float(self.t_step)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.j, [self.psi_rate, self.t_step]])


@dataclass(frozen=True)
class SensorModel:
    """Butterworth collection kernel parameters: cutoff c_b and even order n_b."""

    c_b: float = 0.05
    n_b: int = 2

    def __post_init__(self):
        if not (self.c_b > 0):
            raise ModelError(f"sensor cutoff must be positive, got {self.c_b}")
        if self.n_b < 2 or self.n_b % 2 != 0:
            raise ModelError(f"sensor order must be a positive even integer, got {self.n_b}")


class TargetMotion:
    """Smooth displacement of a target from its initial position over absolute time."""

    def offset(self, t_abs):
        raise NotImplementedError

    def velocity(self, t_abs):
        # central difference fallback for user-supplied motions
        h = 1e-6
        return (np.asarray(self.offset(np.asarray(t_abs) + h), float)
                - np.asarray(self.offset(np.asarray(t_abs) - h), float)) / (2 * h)


class StaticMotion(TargetMotion):
    def offset(self, t_abs):
        t = np.asarray(t_abs, float)
        return np.zeros(t.shape + (3,))

    def velocity(self, t_abs):
        t = np.asarray(t_abs, float)
        return np.zeros(t.shape + (3,))


@dataclass
class TrefoilMotion(TargetMotion):
    """Trefoil-knot displacement, phase-shifted and optionally amplitude-scaled."""

    phase: float = 0.0
    scale: float = 1.0

    def offset(self, t_abs):
        return self.scale * trefoil_offset(np.asarray(t_abs, float), self.phase)

    def velocity(self, t_abs):
        return self.scale * trefoil_velocity(np.asarray(t_abs, float), self.phase)


@dataclass
class FunctionMotion(TargetMotion):
    """User-supplied smooth displacement function of absolute time."""

    fn: object
    vel_fn: object = None

    def offset(self, t_abs):
        return np.asarray(self.fn(t_abs), float)

    def velocity(self, t_abs):
        if self.vel_fn is not None:
            return np.asarray(self.vel_fn(t_abs), float)
        return super().velocity(t_abs)


@dataclass
class TargetSpec:
    """A reward target: initial position/gain, gain growth rate and motion model."""

    q0: np.ndarray
    g0: float
    alpha_g: float = 0.0
    motion: TargetMotion = field(default_factory=StaticMotion)

    def __post_init__(self):
        self.q0 = _vec3(self.q0)
        self.g0 = float(self.g0)
        self.alpha_g = float(self.alpha_g)
        if self.g0 < 0:
            raise ModelError(f"initial gain must be non-negative, got {self.g0}")
        if self.alpha_g < 0:
            raise ModelError(f"gain growth rate must be non-negative, got {self.alpha_g}")


@dataclass(frozen=True)
class KinematicBounds:
    v_max: float = 3.0
    a_max: float = 1.5
    j_max: float = 30.0
    psi_rate_max: float = 1.5

    def __post_init__(self):
        for name in ("v_max", "a_max", "j_max", "psi_rate_max"):
            if not (getattr(self, name) > 0):
                raise ModelError(f"{name} must be strictly positive")


def default_input_weights() -> np.ndarray:
    # jerk (3), heading rate, t_step; the step-length component is unpenalized
    return np.array([1e-3, 1e-3, 1e-3, 1e-3, 0.0])


@dataclass
class CostWeights:
    """Scales for the heading, input-change and terminal-position cost terms."""

    k_psi: float = 0.01
    c_u: np.ndarray = field(default_factory=default_input_weights)
    k_f: float = 10.0

    def __post_init__(self):
        self.c_u = np.asarray(self.c_u, float).reshape(5).copy()
        if self.k_psi < 0 or self.k_f < 0 or np.any(self.c_u < 0):
            raise ModelError("cost weights must be non-negative")


@dataclass
class ProblemInstance:
    """Targets plus vehicle limits, sensor, cost weights and the start state."""

    targets: list
    bounds: KinematicBounds = field(default_factory=KinematicBounds)
    sensor: SensorModel = field(default_factory=SensorModel)
    weights: CostWeights = field(default_factory=CostWeights)
    start: VehicleState = field(default_factory=VehicleState.rest)
    t0_abs: float = 0.0

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def with_start(self, start: VehicleState, t0_abs: float) -> "ProblemInstance":
        return replace(self, start=start, t0_abs=float(t0_abs))

    def gains0(self) -> np.ndarray:
        return np.array([t.g0 for t in self.targets], float)

    def target_positions(self, t_abs) -> np.ndarray:
        """Positions of all targets at absolute time(s) t_abs, shape (..., n_t, 3)."""
        t = np.asarray(t_abs, float)
        out = np.stack([tg.q0 + tg.motion.offset(t) for tg in self.targets], axis=-2)
        return out


# ---------------------------------------------------------------------------
# scalar model operations
# ---------------------------------------------------------------------------

def butterworth(x, sensor: SensorModel):
    """Collection kernel f_b(x) = 1 / (1 + (x / c_b)^n_b), in (0, 1]."""
    x = np.asarray(x, float)
    if not np.all(np.isfinite(x)):
        raise ModelError("butterworth: non-finite distance")
    if np.any(x < 0):
        raise ModelError("butterworth: negative distance")
    return 1.0 / (1.0 + (x / sensor.c_b) ** sensor.n_b)


def butterworth_sq(d_sq, sensor: SensorModel):
    """f_b evaluated from squared distance; smooth at d = 0 for even n_b."""
    d_sq = np.asarray(d_sq, float)
    return 1.0 / (1.0 + (d_sq / sensor.c_b**2) ** (sensor.n_b // 2))


def target_distance(p, q) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ModelError("target_distance: non-finite input")
    return float(np.linalg.norm(p - q))


def propagate_state(x: VehicleState, u: ControlInput) -> VehicleState:
    """Exact constant-jerk integration of the point-mass model over one step."""
    t = u.t_step
    if t < 0:
        raise ModelError("propagate_state: negative step length")
    a = x.a + u.j * t
    v = x.v + x.a * t + 0.5 * u.j * t**2
    p = x.p + x.v * t + 0.5 * x.a * t**2 + u.j * t**3 / 6.0
    psi = x.psi + u.psi_rate * t
    return VehicleState(p=p, v=v, a=a, psi=psi)


def propagate_reward(g, d, t_step, alpha_g, sensor: SensorModel):
    """One step of reward-gain dynamics: (g + alpha_g * t) * (1 - f_b(d))."""
    return (np.asarray(g, float) + alpha_g * t_step) * (1.0 - butterworth(d, sensor))


def heading_cost(v, psi):
    """Negative dot product of planar velocity with the heading direction."""
    v = np.asarray(v, float)
    return -(v[..., 0] * np.cos(psi) + v[..., 1] * np.sin(psi))


def stage_cost(gains, heading_term, du, w: CostWeights):
    """Per-step cost: uncollected reward + scaled heading cost + input-change penalty."""
    gains = np.asarray(gains, float)
    du = np.asarray(du, float)
    quad = float(du @ (w.c_u[: du.size] * du)) if du.size else 0.0
    return float(np.sum(gains)) + w.k_psi * float(heading_term) + quad


def terminal_cost(p_end, p_f, k_f):
    """Soft final-position constraint: k_f * ||p_end - p_f||."""
    return float(k_f) * target_distance(p_end, p_f)


def trefoil_offset(t, t_r):
    """Trefoil-knot displacement at absolute time t with phase t_r, shape (..., 3)."""
    s = np.asarray(t, float) + t_r
    x = np.sin(s) + 2.0 * np.sin(2.0 * s)
    y = np.cos(s) - 2.0 * np.cos(2.0 * s)
    z = -3.0 * np.sin(s)
    return np.stack([x, y, z], axis=-1)


def trefoil_velocity(t, t_r):
    """Time derivative of trefoil_offset."""
    s = np.asarray(t, float) + t_r
    x = np.cos(s) + 4.0 * np.cos(2.0 * s)
    y = -np.sin(s) + 4.0 * np.sin(2.0 * s)
    z = -3.0 * np.cos(s)
    return np.stack([x, y, z], axis=-1)


def target_phase(r: int, n_t: int) -> float:
    """Phase offset 2*pi*r/n_t de-synchronizing target r of n_t."""
    if n_t <= 0:
        raise ModelError("target_phase: target count must be positive")
    if r < 0:
        raise ModelError("target_phase: index must be non-negative")
    return 2.0 * math.pi * r / n_t


def target_position(target: TargetSpec, t_abs):
    """Target position at absolute time(s) t_abs: q0 plus its motion displacement."""
    return target.q0 + target.motion.offset(np.asarray(t_abs, float))
