"""Pose-alignment controller: deviations, twist map, PD law, and the closed loop.

The error fed to the PD law is the twist itself (deviation divided by an
execution time), exactly as the control chain is written.  The execution
time is kept separate from the control period; see ``ControllerGains``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .frames import FrameTree, RigidTransform, normalize_angle, relative


@dataclass(frozen=True)
class Twist:
    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        lin = np.array(self.linear, dtype=float).reshape(3)
        ang = np.array(self.angular, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("non-finite twist")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    @classmethod
    def zero(cls) -> Twist:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> Twist:
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


@dataclass(frozen=True)
class ControllerGains:
    """PD gains and timing.

    ``dt`` is the control period (plant step and derivative step).
    ``execution_time`` is the horizon dividing the deviation in the twist map;
    with ``execution_time == dt`` and ``kp = 2`` the discrete loop is not
    contractive, so the default is 1 s.
    """

    kp: float = 2.0
    kd: float = 0.2
    dt: float = 1.0 / 30.0
    execution_time: float = 1.0

    def __post_init__(self):
        if self.kp < 0 or self.kd < 0:
            raise ValueError("gains must be non-negative")
        if not (self.dt > 0 and self.execution_time > 0):
            raise ValueError("periods must be positive")


@dataclass(frozen=True)
class Thresholds:
    translation: float = 0.01  # m
    rotation: float = 0.02  # rad

    def __post_init__(self):
        if not (self.translation > 0 and self.rotation > 0):
            raise ValueError("thresholds must be positive")

    def satisfied(self, error) -> bool:
        e = np.abs(np.asarray(error, dtype=float))
        return bool(e[:3].max() < self.translation and e[3:].max() < self.rotation)


@dataclass(frozen=True)
class TwistLimits:
    linear: float = 1.5  # m/s
    angular: float = 0.6  # rad/s

    def __post_init__(self):
        if not (self.linear > 0 and self.angular > 0):
            raise ValueError("limits must be positive")


@dataclass
class ControlState:
    prev_error: Optional[np.ndarray] = None
    prev_time: Optional[float] = None
    iterations: int = 0


def pose_vector(t: RigidTransform) -> np.ndarray:
    return t.as_vector()


def pose_deviation(T_ee_pre: RigidTransform, T_ee_ct: RigidTransform) -> np.ndarray:
    """``pose(T_ee_pre) - pose(T_ee_ct)`` with the angle differences wrapped."""
    a, b = T_ee_pre.as_vector(), T_ee_ct.as_vector()
    d = a - b
    d[3:] = normalize_angle(d[3:])
    return d


def euler_rate_matrix(d_roll: float, d_pitch: float) -> np.ndarray:
    """Maps roll/pitch/yaw rates to body angular velocity."""
    sa, ca = math.sin(d_roll), math.cos(d_roll)
    sb, cb = math.sin(d_pitch), math.cos(d_pitch)
    return np.array([
        [1.0, 0.0, -sb],
        [0.0, ca, cb * sa],
        [0.0, -sa, cb * ca],
    ])


def twist_from_deviation(deviation, dt: float) -> Twist:
    if not dt > 0:
        raise ValueError(f"period must be positive, got {dt}")
    d = np.asarray(deviation, dtype=float).reshape(6)
    E = euler_rate_matrix(d[3], d[4])
    return Twist(d[:3] / dt, E @ d[3:] / dt)


def pd_control(error, state: ControlState, gains: ControllerGains) -> np.ndarray:
    """``kp * e + kd * de/dt``; the derivative is zero on the first call."""
    e = np.asarray(error, dtype=float).reshape(6).copy()
    if state.prev_error is None:
        e_dot = np.zeros(6)
    else:
        e_dot = (e - state.prev_error) / gains.dt
    state.prev_error = e
    state.prev_time = state.iterations * gains.dt
    state.iterations += 1
    return gains.kp * e + gains.kd * e_dot


def clamp_twist(t: Twist, lim: TwistLimits) -> Twist:
    """Scale the linear and angular parts (separately) down to their limits."""
    lin, ang = t.linear, t.angular
    nl, na = np.linalg.norm(lin), np.linalg.norm(ang)
    if nl > lim.linear:
        lin = lin * (lim.linear / nl)
    if na > lim.angular:
        ang = ang * (lim.angular / na)
    return Twist(lin, ang)


def clamp_active(t: Twist, lim: TwistLimits) -> bool:
    return bool(np.linalg.norm(t.linear) > lim.linear or np.linalg.norm(t.angular) > lim.angular)


def resolve_joints(twist, J, damping: float = 0.01, sigma_min: float = 1e-3) -> np.ndarray:
    """Joint velocities for a Cartesian twist.

    Plain inverse when the Jacobian is well conditioned, damped least
    squares once its smallest singular value drops below ``sigma_min``.
    """
    x = twist.as_vector() if isinstance(twist, Twist) else np.asarray(twist, dtype=float).reshape(6)
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise ValueError("Jacobian must be finite")
    if np.linalg.svd(J, compute_uv=False).min() >= sigma_min:
        return np.linalg.solve(J, x)
    n = J.shape[0]
    return J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(n), x)


class AlignmentPlant(Protocol):
    """What the alignment loop needs from the world."""

    time: float

    def observe(self) -> FrameTree:
        """Frames ``end-effector``, ``cable_tip`` and ``pre-insert`` (world-rooted)."""

    def jacobian(self) -> np.ndarray:
        ...

    def step(self, qdot: np.ndarray, dt: float) -> None:
        ...


@dataclass(frozen=True)
class AlignmentStep:
    iteration: int
    time: float
    deviation: np.ndarray  # ee-frame deviation driving the twist
    error: np.ndarray  # cable tip in the pre-insert frame
    twist: np.ndarray  # commanded after clamping
    qdot: np.ndarray
    clamped: bool
    converged: bool


@dataclass
class AlignmentResult:
    converged: bool
    iterations: int
    steps: list[AlignmentStep] = field(default_factory=list)

    @property
    def final_error(self) -> np.ndarray:
        return self.steps[-1].error if self.steps else np.zeros(6)


def alignment_loop(
    plant: AlignmentPlant,
    gains: ControllerGains = ControllerGains(),
    thresholds: Thresholds = Thresholds(),
    limits: TwistLimits = TwistLimits(),
    max_iters: int = 500,
    damping: float = 0.01,
    sigma_min: float = 1e-3,
) -> AlignmentResult:
    """Drive the cable tip onto the pre-insert frame.

    Runs while any translational error component is >= ``thresholds.translation``
    or any rotational one is >= ``thresholds.rotation``.  Returns after
    convergence or ``max_iters`` commands, whichever comes first.
    """
    state = ControlState()
    steps: list[AlignmentStep] = []
    zeros = np.zeros(6)
    for it in range(max_iters + 1):
        tree = plant.observe()
        T_pre_ct = relative(tree, "cable_tip", "pre-insert")
        T_ee_pre = relative(tree, "pre-insert", "end-effector")
        T_ee_ct = relative(tree, "cable_tip", "end-effector")
        error = T_pre_ct.as_vector()
        deviation = pose_deviation(T_ee_pre, T_ee_ct)
        if thresholds.satisfied(error):
            steps.append(AlignmentStep(it, plant.time, deviation, error, zeros, zeros, False, True))
            return AlignmentResult(True, it, steps)
        if it == max_iters:
            steps.append(AlignmentStep(it, plant.time, deviation, error, zeros, zeros, False, False))
            break
        twist = twist_from_deviation(deviation, gains.execution_time)
        raw = Twist.from_vector(pd_control(twist.as_vector(), state, gains))
        cmd = clamp_twist(raw, limits)
        qdot = resolve_joints(cmd, plant.jacobian(), damping, sigma_min)
        steps.append(AlignmentStep(it, plant.time, deviation, error, cmd.as_vector(), qdot,
                                   clamp_active(raw, limits), False))
        plant.step(qdot, gains.dt)
    return AlignmentResult(False, max_iters, steps)
