"""Deterministic stand-in for the physical rig.

World layout: the wall is the plane ``y = wall_y`` with outward normal +y,
gravity is -z, and a plugged cable leaves its socket along +y following
the generator quadratics.  Once grasped and pulled out, the cable hangs
from the gripper by a quasi-static sag map; there is no cable dynamics.

Every random draw comes from a generator seeded by ``(seed, stream,
sim-time in microseconds)`` so identical scenarios replay bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cablemodel import QuadCoeffs
from .controller import Twist
from .frames import FrameTree, RigidTransform, axis_angle_to_matrix, compose, frame_from_x_axis
from .perception import CameraIntrinsics, DepthImage, NotVisibleError, project

CABLE, WALL, OUTLIER = 0, 1, 2
STREAM_CLOUD, STREAM_VIEW = 1, 2
GRAVITY_UP = np.array([0.0, 0.0, 1.0])


def frame_rng(seed: int, stream: int, time: float) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(round(time * 1e6))])


# -- sag ----------------------------------------------------------------------


@dataclass(frozen=True)
class SagModel:
    dangle_length: float  # grasp-to-tip length along the grasp axis, m
    kappa: float  # 1/m
    mass: float = 0.0  # payload at the tip, kg
    mass_gain: float = 10.0  # 1/kg

    def __post_init__(self):
        if self.kappa < 0 or self.mass < 0:
            raise ValueError("kappa and mass must be non-negative")

    def curvature(self) -> float:
        """Quadratic drop coefficient, reduced so the drop never exceeds the dangle length."""
        k = self.kappa * (1.0 + self.mass * self.mass_gain)
        L = self.dangle_length
        if L > 0 and k * L * L > L:
            k = 1.0 / L
        return k

    def drop(self) -> float:
        return self.curvature() * self.dangle_length**2

    def tip_angle(self) -> float:
        return math.atan(2.0 * self.curvature() * self.dangle_length)


def sag_curve(grasp_pose: RigidTransform, sag: SagModel, u) -> np.ndarray:
    """Hanging cable points at distance ``u`` behind the grasp along its x-axis."""
    u = np.asarray(u, dtype=float)
    k = sag.curvature()
    x_axis = grasp_pose.axis(0)
    return grasp_pose.translation - u[..., None] * x_axis - (k * u * u)[..., None] * GRAVITY_UP


def apply_sag(grasp_pose: RigidTransform, sag: SagModel) -> RigidTransform:
    """Tip frame of a cable hanging from ``grasp_pose``.

    The tip x-axis points from the tip toward the grasp, tilted away from the
    grasp axis by ``atan(2 k L)``; roll is the gravity-consistent completion.
    """
    if not sag.dangle_length > 0:
        raise ValueError("dangle length must be positive")
    L = sag.dangle_length
    k = sag.curvature()
    origin = sag_curve(grasp_pose, sag, L)
    tangent = grasp_pose.axis(0) + 2.0 * k * L * GRAVITY_UP
    frame, _ = frame_from_x_axis(origin, tangent)
    return frame


# -- world --------------------------------------------------------------------


@dataclass(frozen=True)
class Socket:
    name: str
    center: np.ndarray
    normal: np.ndarray  # out of the wall
    hole_radius: float = 0.02

    def frame(self) -> RigidTransform:
        return frame_from_x_axis(self.center, self.normal)[0]


@dataclass(frozen=True)
class GroundTruthCable:
    coeffs: QuadCoeffs
    length: float
    y_start: float
    y_end: float
    kappa: float = 0.05
    radius: float = 0.005
    plugged_into: Optional[str] = "source"
    grasp_offset: Optional[float] = None  # arc length from the tip
    hanging: bool = False

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("cable length must be positive")
        if self.grasp_offset is not None and not 0 <= self.grasp_offset <= self.length:
            raise ValueError("grasp offset must lie on the cable")


def curve_end(coeffs: QuadCoeffs, y_start: float, length: float, n: int = 20001) -> float:
    """y at which the generator curve reaches arc length ``length`` from ``y_start``."""
    ys = np.linspace(y_start, y_start + length, n)
    speed = np.linalg.norm(coeffs.tangent(ys), axis=1)
    arc = np.r_[0.0, np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(ys))]
    return float(np.interp(length, arc, ys))


def make_cable(coeffs: QuadCoeffs, length: float, y_start: float, kappa: float = 0.05,
               radius: float = 0.005, plugged_into: Optional[str] = "source") -> GroundTruthCable:
    return GroundTruthCable(coeffs, length, y_start, curve_end(coeffs, y_start, length),
                            kappa, radius, plugged_into)


@dataclass(frozen=True)
class SensorConfig:
    cloud_rate: float = 30.0
    model_rate: float = 30.0
    noise: float = 0.002
    outlier_fraction: float = 0.02
    points_per_frame: int = 1500
    outlier_box: tuple = ((-0.6, -0.3, -0.2), (0.6, 1.0, 0.8))
    intensity_noise: float = 0.02
    depth_noise: float = 0.001

    def __post_init__(self):
        if not (self.cloud_rate > 0 and self.model_rate > 0):
            raise ValueError("rates must be positive")
        if self.noise < 0 or not 0 <= self.outlier_fraction < 1:
            raise ValueError("invalid noise settings")


@dataclass(frozen=True)
class WorldState:
    cable: GroundTruthCable
    sockets: tuple[Socket, ...]
    ee_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    time: float = 0.0
    seed: int = 0
    payload_mass: float = 0.0
    mass_gain: float = 10.0
    wall_y: float = 0.0
    jacobian: np.ndarray = field(default_factory=lambda: np.eye(6))

    def socket(self, name: str) -> Socket:
        for s in self.sockets:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def sag(self) -> SagModel:
        return SagModel(self.cable.grasp_offset or 0.0, self.cable.kappa, self.payload_mass, self.mass_gain)


def _param_table(state: WorldState, n: int = 4001):
    """Dense parametrization of the true cable ordered from the tip.

    Returns ``(arc, points, evaluate)`` where ``evaluate(s)`` maps the
    parameter ``s in [0, 1]`` to exact curve points.
    """
    cab = state.cable
    if not cab.hanging:
        def evaluate(s):
            return cab.coeffs.point(cab.y_start + np.asarray(s) * (cab.y_end - cab.y_start))
    else:
        L = cab.grasp_offset
        tail = cab.length - L
        pose = state.ee_pose
        sag = state.sag
        frac = L / cab.length

        def evaluate(s):
            s = np.asarray(s, dtype=float)
            # dangle for s < frac (tip to grasp), straight tail beyond
            u_d = L * (1.0 - np.clip(s / frac, 0.0, 1.0)) if frac > 0 else np.zeros_like(s)
            u_t = tail * np.clip((s - frac) / max(1.0 - frac, 1e-12), 0.0, 1.0)
            dangle = sag_curve(pose, sag, u_d)
            tail_pts = pose.translation + u_t[..., None] * pose.axis(0)
            return np.where((s <= frac)[..., None], dangle, tail_pts)
    s = np.linspace(0.0, 1.0, n)
    pts = evaluate(s)
    arc = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]
    return s, arc, pts, evaluate


def cable_points(state: WorldState, n: int = 4001) -> np.ndarray:
    """Dense ground-truth polyline from the tip outward."""
    return _param_table(state, n)[2]


def arc_offset_of(state: WorldState, point) -> tuple[float, float]:
    """Arc length from the tip of the true-cable point nearest ``point``, and that distance."""
    _, arc, pts, _ = _param_table(state)
    d = np.linalg.norm(pts - np.asarray(point, dtype=float), axis=1)
    k = int(np.argmin(d))
    return float(arc[k]), float(d[k])


def tip_pose(state: WorldState) -> RigidTransform:
    cab = state.cable
    if cab.hanging:
        return apply_sag(state.ee_pose, state.sag)
    frame, _ = frame_from_x_axis(cab.coeffs.point(cab.y_start), cab.coeffs.tangent(cab.y_start))
    return frame


def world_frames(state: WorldState) -> FrameTree:
    tree = FrameTree()
    tree.set("end-effector", "world", state.ee_pose)
    tree.set("cable_tip", "world", tip_pose(state))
    for s in state.sockets:
        tree.set("Target_Socket" if s.name == "target" else f"socket_{s.name}", "world", s.frame())
    return tree


@dataclass(frozen=True)
class RenderedCloud:
    points: np.ndarray
    labels: np.ndarray  # CABLE / OUTLIER, ground truth only


def render_cloud(state: WorldState, cfg: SensorConfig) -> RenderedCloud:
    """Noisy cable samples (uniform in arc length) plus uniform outliers, world frame."""
    rng = frame_rng(state.seed, STREAM_CLOUD, state.time)
    n_total = int(cfg.points_per_frame)
    n_out = int(round(cfg.outlier_fraction * n_total))
    n_cable = n_total - n_out
    s, arc, _, evaluate = _param_table(state)
    targets = rng.uniform(0.0, arc[-1], n_cable)
    pts = evaluate(np.interp(targets, arc, s))
    if cfg.noise > 0:
        pts = pts + rng.normal(0.0, cfg.noise, pts.shape)
    lo, hi = (np.asarray(b, dtype=float) for b in cfg.outlier_box)
    outliers = rng.uniform(lo, hi, (n_out, 3))
    points = np.vstack([pts, outliers])
    labels = np.r_[np.full(n_cable, CABLE), np.full(n_out, OUTLIER)]
    perm = rng.permutation(len(points))
    return RenderedCloud(points[perm], labels[perm])


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose with z toward ``target``, x to the right and y down."""
    p = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - p
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(p, np.column_stack([x, y, z]))


def render_socket_view(
    state: WorldState,
    cam: CameraIntrinsics,
    cam_pose: RigidTransform,
    cfg: Optional[SensorConfig] = None,
    hole_intensity: float = 0.3,
    cable_intensity: float = 0.0,
    wall_intensity: float = 1.0,
) -> DepthImage:
    """Wall depth, dark socket holes, and the cable drawn on top.

    Sockets with a plug in them are not drawn as holes.
    """
    cfg = cfg or SensorConfig(intensity_noise=0.0, depth_noise=0.0)
    inv = cam_pose.inverse()
    target = state.socket("target")
    if inv.apply(target.center)[2] <= 1e-6:
        raise NotVisibleError("target socket is behind the camera")

    h, w = cam.height, cam.width
    vs, us = np.mgrid[0:h, 0:w].astype(float)
    rays = np.stack([(us - cam.cx) / cam.f, (vs - cam.cy) / cam.f, np.ones_like(us)], axis=-1)
    rays_w = rays @ cam_pose.rotation.T
    n = np.array([0.0, 1.0, 0.0])
    denom = rays_w @ n
    origin = cam_pose.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (state.wall_y - origin @ n) / denom
    valid = np.isfinite(t) & (t > 0)
    depth = np.where(valid, t, 0.0)
    intensity = np.full((h, w), wall_intensity)
    hits = origin + np.where(valid, t, 0.0)[..., None] * rays_w

    occupied = state.cable.plugged_into if not state.cable.hanging else None
    for sock in state.sockets:
        if sock.name == occupied:
            continue
        hole = valid & (np.linalg.norm(hits - sock.center, axis=-1) <= sock.hole_radius)
        intensity[hole] = hole_intensity

    # cable splats with a z-buffer
    pts = inv.apply(cable_points(state, 1501))
    pts = pts[pts[:, 2] > 1e-3]
    if len(pts):
        px = project(pts, cam)
        rad = np.maximum(1.0, cam.f * state.cable.radius / pts[:, 2])
        reach = int(math.ceil(rad.max()))
        zbuf = np.full(h * w, np.inf)
        for du in range(-reach, reach + 1):
            for dv in range(-reach, reach + 1):
                r2 = du * du + dv * dv
                sel = r2 <= rad**2
                pu = np.rint(px[sel, 0]).astype(int) + du
                pv = np.rint(px[sel, 1]).astype(int) + dv
                ok = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
                np.minimum.at(zbuf, pv[ok] * w + pu[ok], pts[sel][ok, 2])
        zbuf = zbuf.reshape(h, w)
        front = np.isfinite(zbuf) & ((depth == 0) | (zbuf < depth))
        depth = np.where(front, zbuf, depth)
        intensity = np.where(front, cable_intensity, intensity)

    if cfg.intensity_noise > 0 or cfg.depth_noise > 0:
        rng = frame_rng(state.seed, STREAM_VIEW, state.time)
        intensity = intensity + rng.normal(0.0, cfg.intensity_noise, intensity.shape)
        noise = rng.normal(0.0, cfg.depth_noise, depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)
    return DepthImage(depth, intensity, cam, cam_pose)


# -- plant --------------------------------------------------------------------


def integrate_pose(pose: RigidTransform, twist: Twist, dt: float) -> RigidTransform:
    """First-order hold of a body-frame twist over ``dt``."""
    step = RigidTransform(twist.linear * dt, axis_angle_to_matrix(twist.angular * dt))
    return compose(pose, step)


def step_plant(state: WorldState, command=None, dt: float = 1.0 / 30.0, *, qdot=None) -> WorldState:
    """Advance the end-effector by a body twist (or joint velocities through the Jacobian)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if qdot is not None:
        command = Twist.from_vector(state.jacobian @ np.asarray(qdot, dtype=float))
    elif command is None:
        command = Twist.zero()
    elif not isinstance(command, Twist):
        command = Twist.from_vector(command)
    return replace(state, ee_pose=integrate_pose(state.ee_pose, command, dt), time=state.time + dt)


def inject_disturbance(state: WorldState, mass: float) -> WorldState:
    """Hang ``mass`` kg at the tip from now on (0 removes it)."""
    if mass < 0:
        raise ValueError("mass must be non-negative")
    return replace(state, payload_mass=float(mass))


class IdealPlant:
    """End-effector twist integrated directly, tip observed without noise.

    The tip either rides rigidly at ``tip_offset`` in the end-effector frame
    or hangs from it through ``sag``.  ``disturbances`` is a list of
    ``(time, mass)`` applied once the plant clock reaches ``time``.
    """

    def __init__(self, ee_pose: RigidTransform, pre_insert: RigidTransform,
                 tip_offset: Optional[RigidTransform] = None, sag: Optional[SagModel] = None,
                 jacobian=None, disturbances=()):
        self.ee_pose = ee_pose
        self.pre_insert = pre_insert
        self.tip_offset = tip_offset if tip_offset is not None else RigidTransform.identity()
        self.sag = sag
        self.J = np.eye(6) if jacobian is None else np.asarray(jacobian, dtype=float)
        self.disturbances = sorted(disturbances)
        self.time = 0.0

    def tip(self) -> RigidTransform:
        if self.sag is not None:
            return apply_sag(self.ee_pose, self.sag)
        return compose(self.ee_pose, self.tip_offset)

    def observe(self) -> FrameTree:
        tree = FrameTree()
        tree.set("end-effector", "world", self.ee_pose)
        tree.set("cable_tip", "world", self.tip())
        tree.set("pre-insert", "world", self.pre_insert)
        return tree

    def jacobian(self) -> np.ndarray:
        return self.J

    def step(self, qdot, dt: float) -> None:
        twist = Twist.from_vector(self.J @ np.asarray(qdot, dtype=float))
        self.ee_pose = integrate_pose(self.ee_pose, twist, dt)
        self.time += dt
        while self.disturbances and self.disturbances[0][0] <= self.time + 1e-12:
            _, mass = self.disturbances.pop(0)
            if self.sag is not None:
                self.sag = replace(self.sag, mass=mass)
