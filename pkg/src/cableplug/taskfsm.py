"""Five-phase plug task: transition table and the simulated end-to-end driver."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cablemodel import (
    CableEstimate,
    CableModelError,
    GraspSpec,
    NoFeasibleGraspError,
    QuadCoeffs,
    select_grasp,
    track_cable,
)
from .config import Scenario
from .controller import (
    AlignmentResult,
    ControllerGains,
    Thresholds,
    Twist,
    TwistLimits,
    alignment_loop,
)
from .frames import FrameTree, RigidTransform, compose, normalize_angle
from .perception import (
    CameraIntrinsics,
    PassThroughBounds,
    PerceptionError,
    SocketEstimate,
    bbox_oracle,
    cable_pixels,
    estimate_socket,
    object_center,
    pass_through,
    remove_isolated,
)
from .simworld import (
    SensorConfig,
    Socket,
    WorldState,
    arc_offset_of,
    cable_points,
    frame_rng,
    inject_disturbance,
    integrate_pose,
    look_at,
    make_cable,
    render_cloud,
    render_socket_view,
    tip_pose,
)

STREAM_SCENE = 0


class Phase(enum.Enum):
    INITIALIZE = "Initialize"
    GRASP = "Grasp"
    UNPLUG = "Unplug"
    PRE_INSERT = "PreInsert"
    INSERT = "Insert"
    DONE = "Done"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (Phase.DONE, Phase.FAILED)


class TaskEvent(enum.Enum):
    SOCKET_FOUND = "socket-found"
    MODEL_READY = "model-ready"
    GRASP_REACHED = "grasp-reached"
    UNPLUG_COMPLETE = "unplug-complete"
    ALIGNED = "aligned"
    INSERTED = "inserted"
    TIMEOUT = "timeout"
    PERCEPTION_LOST = "perception-lost"


class ProtocolViolation(RuntimeError):
    """An event arrived in a phase that has no edge for it."""


@dataclass(frozen=True)
class TaskState:
    phase: Phase = Phase.INITIALIZE
    socket_found: bool = False
    reason: Optional[str] = None


FORWARD = {
    (Phase.GRASP, TaskEvent.GRASP_REACHED): Phase.UNPLUG,
    (Phase.UNPLUG, TaskEvent.UNPLUG_COMPLETE): Phase.PRE_INSERT,
    (Phase.PRE_INSERT, TaskEvent.ALIGNED): Phase.INSERT,
    (Phase.INSERT, TaskEvent.INSERTED): Phase.DONE,
}


def advance(state: TaskState, ev: TaskEvent) -> TaskState:
    """Pure transition function.  Undefined (state, event) pairs raise."""
    p = state.phase
    if p.terminal:
        raise ProtocolViolation(f"{ev.value} after terminal phase {p.value}")
    if ev is TaskEvent.TIMEOUT:
        return TaskState(Phase.FAILED, state.socket_found, "timeout")
    if p is Phase.INITIALIZE:
        if ev is TaskEvent.SOCKET_FOUND:
            return TaskState(Phase.INITIALIZE, True)
        if ev is TaskEvent.MODEL_READY and state.socket_found:
            return TaskState(Phase.GRASP, True)
        if ev is TaskEvent.PERCEPTION_LOST:
            return TaskState(Phase.INITIALIZE, False)
    elif ev is TaskEvent.PERCEPTION_LOST:
        return TaskState(Phase.FAILED, state.socket_found, "perception-lost")
    nxt = FORWARD.get((p, ev))
    if nxt is None:
        raise ProtocolViolation(f"event {ev.value} is not valid in phase {p.value}")
    return TaskState(nxt, state.socket_found)


def fail(state: TaskState, reason: str) -> TaskState:
    """Driver-side failure with a specific reason (phase-local errors)."""
    if state.phase.terminal:
        raise ProtocolViolation(f"cannot fail from terminal phase {state.phase.value}")
    return TaskState(Phase.FAILED, state.socket_found, reason)


def pre_insert_frame(socket, standoff: float) -> RigidTransform:
    """Goal frame ``standoff`` in front of the socket along the socket x-axis.

    The socket x-axis points out of the wall, so the goal sits in free space.
    Accepts a :class:`SocketEstimate` or a bare frame.
    """
    if not standoff > 0:
        raise ValueError("standoff must be positive")
    frame = socket.frame if isinstance(socket, SocketEstimate) else socket
    return compose(frame, RigidTransform.from_translation(standoff, 0.0, 0.0))


# -- scene construction -------------------------------------------------------


def build_world(sc: Scenario, seed: int) -> WorldState:
    shapes = sc.cable.shapes
    shape = shapes[seed % len(shapes)]
    rng = frame_rng(seed, STREAM_SCENE, 0.0)
    jit = sc.cable.shape_jitter * rng.uniform(-1.0, 1.0, 2)
    src = np.array(sc.sockets.source, dtype=float)
    tgt = np.array(sc.sockets.target, dtype=float)
    wy = sc.sockets.wall_y
    # quadratics in y measured from the wall; re-expand about y = 0
    a1, a2 = shape.a1 + jit[0], shape.a2
    b1, b2 = shape.b1 + jit[1], shape.b2
    coeffs = QuadCoeffs(
        src[0] - a1 * wy + a2 * wy * wy, a1 - 2 * a2 * wy, a2,
        src[2] - b1 * wy + b2 * wy * wy, b1 - 2 * b2 * wy, b2,
    )
    cable = make_cable(coeffs, sc.cable.length, wy, sc.cable.stiffness(), sc.cable.radius, "source")
    normal = np.array([0.0, 1.0, 0.0])
    sockets = (
        Socket("source", src, normal, sc.sockets.hole_radius),
        Socket("target", tgt, normal, sc.sockets.hole_radius),
    )
    home = RigidTransform.from_rpy(sc.task.home, [0.0, 0.0, math.pi / 2])
    return WorldState(cable, sockets, home, 0.0, int(seed), 0.0, sc.task.mass_gain, wy)


def sensor_config(sc: Scenario) -> SensorConfig:
    s = sc.sensor
    return SensorConfig(s.cloud_rate, s.model_rate, s.noise, s.outlier_fraction, s.points_per_frame,
                        s.outlier_box, s.intensity_noise, s.depth_noise)


def camera(sc: Scenario) -> tuple[CameraIntrinsics, RigidTransform]:
    c = sc.camera
    return CameraIntrinsics(c.f, c.cx, c.cy, c.width, c.height), look_at(c.position, c.look_at)


# -- perception in the loop ---------------------------------------------------


def perceive_socket(world: WorldState, sc: Scenario):
    cam, pose = camera(sc)
    img = render_socket_view(world, cam, pose, sensor_config(sc))
    p = sc.perception
    rng = frame_rng(world.seed, 3, world.time)
    est = estimate_socket(img, p.radius_range, p.circle_threshold, p.ransac_iters, p.ransac_tol,
                          p.cloud_stride, rng)
    return est, img


def perceive_cable_initial(world: WorldState, sc: Scenario, img, socket: SocketEstimate) -> CableEstimate:
    """Locate the cable in the socket view, then crop and fit its cloud."""
    cam, pose = camera(sc)
    p = sc.perception
    box = bbox_oracle(cable_points(world, 400), cam, pose, p.bbox_margin)
    px = cable_pixels(img, box, p.cable_threshold)
    center_cam, _ = object_center(px, img)
    c = pose.apply(center_cam)
    h = p.crop_half_width
    bounds = PassThroughBounds(c[0] - h, c[0] + h, socket.center[1] - 0.005, c[1] + p.crop_depth,
                               c[2] - h, c[2] + h)
    cloud = pass_through(render_cloud(world, sensor_config(sc)).points, bounds)
    cloud = remove_isolated(cloud, p.isolation_radius, p.isolation_neighbors)
    return track_cable(cloud, p.n_samples, socket.center, p.plug_exclusion, p.bin_width,
                       p.spread_threshold)


def perceive_cable_held(world: WorldState, sc: Scenario, d_s: float) -> CableEstimate:
    """Tip estimate while grasped: crop the dangling part in the gripper frame."""
    p = sc.perception
    ee = world.ee_pose
    pts = render_cloud(world, sensor_config(sc)).points
    local = ee.inverse().apply(pts)
    reach = d_s + 0.1
    keep = (local[:, 0] <= -0.01) & (local[:, 0] >= -reach) \
        & (np.abs(local[:, 1]) <= 0.15) & (np.abs(local[:, 2]) <= reach)
    hint = ee.apply([-d_s, 0.0, 0.0])
    pts = remove_isolated(pts[keep], p.isolation_radius, p.isolation_neighbors)
    return track_cable(pts, p.n_samples, hint, p.plug_exclusion, p.bin_width, p.spread_threshold)


class PerceptionLost(RuntimeError):
    pass


class SimPlant:
    """Alignment plant backed by the simulated world and live tip perception.

    One failed model update is bridged with the previous estimate; two in a
    row raise :class:`PerceptionLost`.
    """

    def __init__(self, world: WorldState, sc: Scenario, pre_insert: RigidTransform, d_s: float,
                 disturbances=()):
        self.world = world
        self.sc = sc
        self.pre_insert = pre_insert
        self.d_s = d_s
        self.t0 = world.time
        self.pending = sorted((d.time, d.mass) for d in disturbances)
        self.last_tip: Optional[RigidTransform] = None
        self.misses = 0
        self.ee_log: list[RigidTransform] = []

    @property
    def time(self) -> float:
        return self.world.time

    def observe(self) -> FrameTree:
        try:
            tip = perceive_cable_held(self.world, self.sc, self.d_s).tip
            self.last_tip, self.misses = tip, 0
        except (CableModelError, PerceptionError, ValueError) as exc:
            self.misses += 1
            if self.last_tip is None or self.misses > 1:
                raise PerceptionLost(str(exc)) from exc
            tip = self.last_tip
        self.ee_log.append(self.world.ee_pose)
        tree = FrameTree()
        tree.set("end-effector", "world", self.world.ee_pose)
        tree.set("cable_tip", "world", tip)
        tree.set("pre-insert", "world", self.pre_insert)
        return tree

    def jacobian(self) -> np.ndarray:
        return self.world.jacobian

    def step(self, qdot, dt: float) -> None:
        twist = Twist.from_vector(self.world.jacobian @ np.asarray(qdot, dtype=float))
        w = self.world
        w = replace(w, ee_pose=integrate_pose(w.ee_pose, twist, dt), time=w.time + dt)
        while self.pending and self.pending[0][0] <= w.time - self.t0 + 1e-9:
            _, mass = self.pending.pop(0)
            w = inject_disturbance(w, mass)
        self.world = w
        if w.time > self.sc.task.timeout:
            raise TimeoutError("timeout during alignment")


# -- metrics and trace --------------------------------------------------------


TRACE_HEADER = (
    ["phase", "event", "iteration", "time"]
    + [f"ee_{k}" for k in ("x", "y", "z", "roll", "pitch", "yaw")]
    + [f"dev_{k}" for k in ("x", "y", "z", "roll", "pitch", "yaw")]
    + [f"twist_{k}" for k in ("vx", "vy", "vz", "wx", "wy", "wz")]
    + [f"qdot_{i}" for i in range(1, 7)]
    + ["converged"]
)


@dataclass
class PhaseRecord:
    name: str
    start: float
    duration: float = 0.0


@dataclass
class TaskMetrics:
    seed: int
    scenario: str
    status: str = "Failed"
    reason: Optional[str] = None
    failed_in: Optional[str] = None
    phases: list[PhaseRecord] = field(default_factory=list)
    converged: bool = False
    alignment_iterations: int = 0
    aligned_error: Optional[list[float]] = None  # estimated tip in pre-insert frame
    aligned_error_true: Optional[list[float]] = None
    insert_radial_error: Optional[float] = None
    insert_angle_error: Optional[float] = None
    grasp_arc: Optional[float] = None
    grasp_sample: Optional[int] = None

    @property
    def total_duration(self) -> float:
        return float(sum(p.duration for p in self.phases))

    @property
    def success(self) -> bool:
        return self.status == "Done"

    def phase_sequence(self) -> list[str]:
        return [p.name for p in self.phases]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scenario": self.scenario,
            "status": self.status,
            "reason": self.reason,
            "failed_in": self.failed_in,
            "phases": [{"name": p.name, "start": p.start, "duration": p.duration} for p in self.phases],
            "total_duration": self.total_duration,
            "converged": self.converged,
            "alignment_iterations": self.alignment_iterations,
            "aligned_error": self.aligned_error,
            "aligned_error_true": self.aligned_error_true,
            "insert_radial_error": self.insert_radial_error,
            "insert_angle_error": self.insert_angle_error,
            "grasp_arc": self.grasp_arc,
            "grasp_sample": self.grasp_sample,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class TaskRun:
    metrics: TaskMetrics
    trace: list[list]
    states: list[TaskState]
    socket: Optional[SocketEstimate] = None
    initial_model: Optional[CableEstimate] = None
    alignment: Optional[AlignmentResult] = None
    world: Optional[WorldState] = None

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in self.trace:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def _row(phase: Phase, event: str, iteration: int, time: float, ee: RigidTransform,
         dev=None, twist=None, qdot=None, converged: bool = False) -> list:
    z = [0.0] * 6
    vals = lambda a: [float(v) for v in a] if a is not None else z  # noqa: E731
    return [phase.value, event, int(iteration), float(time), *vals(ee.as_vector()),
            *vals(dev), *vals(twist), *vals(qdot), int(bool(converged))]


# -- driver -------------------------------------------------------------------


class _Driver:
    def __init__(self, sc: Scenario, seed: int):
        self.sc = sc
        self.world = build_world(sc, seed)
        self.state = TaskState()
        self.states = [self.state]
        self.metrics = TaskMetrics(seed=int(seed), scenario=sc.name)
        self.trace: list[list] = []
        self.run = TaskRun(self.metrics, self.trace, self.states)
        self._enter(Phase.INITIALIZE)

    def _enter(self, phase: Phase) -> None:
        if self.metrics.phases:
            last = self.metrics.phases[-1]
            last.duration = self.world.time - last.start
        if not phase.terminal:
            self.metrics.phases.append(PhaseRecord(phase.value, self.world.time))

    def emit(self, ev: TaskEvent) -> None:
        before = self.state.phase
        self.state = advance(self.state, ev)
        self.states.append(self.state)
        self.trace.append(_row(self.state.phase, ev.value, 0, self.world.time, self.world.ee_pose))
        if self.state.phase is not before:
            self._enter(self.state.phase)
        if self.state.phase is Phase.FAILED:
            self._finish_failed(before)

    def fail(self, reason: str) -> None:
        before = self.state.phase
        self.state = fail(self.state, reason)
        self.states.append(self.state)
        self.trace.append(_row(Phase.FAILED, reason, 0, self.world.time, self.world.ee_pose))
        self._enter(Phase.FAILED)
        self._finish_failed(before)

    def _finish_failed(self, before: Phase) -> None:
        self.metrics.status = "Failed"
        self.metrics.reason = self.state.reason
        self.metrics.failed_in = before.value

    def advance_time(self, dt: float) -> bool:
        """Move the clock; returns False (and fails the task) past the timeout."""
        self.world = replace(self.world, time=self.world.time + dt)
        if self.world.time > self.sc.task.timeout:
            self.emit(TaskEvent.TIMEOUT)
            return False
        return True

    @property
    def alive(self) -> bool:
        return not self.state.phase.terminal

    # phases

    def initialize(self) -> None:
        tries = 0
        while self.alive:
            try:
                est, img = perceive_socket(self.world, self.sc)
                self.run.socket = est
                self.emit(TaskEvent.SOCKET_FOUND)
                self.run.initial_model = perceive_cable_initial(self.world, self.sc, img, est)
                self.emit(TaskEvent.MODEL_READY)
                return
            except (PerceptionError, CableModelError) as exc:
                tries += 1
                self.emit(TaskEvent.PERCEPTION_LOST)
                if tries > self.sc.task.perception_retries:
                    self.fail(f"perception-lost: {exc}")
                    return
                if not self.advance_time(1.0 / self.sc.sensor.cloud_rate):
                    return

    def grasp(self) -> Optional[float]:
        lo, hi = self.sc.grasp_range()
        try:
            choice = select_grasp(self.run.initial_model.model.chain, GraspSpec(lo, hi))
        except (NoFeasibleGraspError, ValueError):
            self.fail("no-feasible-grasp")
            return None
        self.metrics.grasp_arc = choice.d_s
        self.metrics.grasp_sample = choice.s
        arc, dist = arc_offset_of(self.world, choice.frame.translation)
        if dist > self.sc.task.grasp_tolerance:
            self.fail("grasp-missed")
            return None
        cable = replace(self.world.cable, grasp_offset=arc)
        self.world = replace(self.world, ee_pose=choice.frame, cable=cable)
        if not self.advance_time(self.sc.task.grasp_duration):
            return None
        self.emit(TaskEvent.GRASP_REACHED)
        return choice.d_s

    def unplug(self) -> None:
        t = self.sc.task
        dt = self.sc.control.dt
        self.world = replace(self.world, cable=replace(self.world.cable, plugged_into=None, hanging=True))
        steps = int(math.ceil(t.unplug_distance / (t.unplug_speed * dt) - 1e-9))
        step = t.unplug_distance / steps
        pull = np.array([0.0, step, 0.0])
        for k in range(steps):
            ee = self.world.ee_pose
            self.world = replace(self.world, ee_pose=RigidTransform(ee.translation + pull, ee.rotation))
            if not self.advance_time(step / t.unplug_speed):
                return
            self.trace.append(_row(Phase.UNPLUG, "", k + 1, self.world.time, self.world.ee_pose))
        self.emit(TaskEvent.UNPLUG_COMPLETE)

    def pre_insert(self, d_s: float) -> Optional[RigidTransform]:
        c = self.sc.control
        goal = pre_insert_frame(self.run.socket, self.sc.task.standoff)
        plant = SimPlant(self.world, self.sc, goal, d_s, self.sc.disturbances)
        try:
            res = alignment_loop(
                plant,
                ControllerGains(c.kp, c.kd, c.dt, c.execution_time),
                Thresholds(c.eps_translation, c.eps_rotation),
                TwistLimits(c.max_linear, c.max_angular),
                c.max_iters, c.damping, c.sigma_min,
            )
        except PerceptionLost:
            self.world = plant.world
            self.emit(TaskEvent.PERCEPTION_LOST)
            return None
        except TimeoutError:
            self.world = plant.world
            self.emit(TaskEvent.TIMEOUT)
            return None
        self.world = plant.world
        self.run.alignment = res
        self.metrics.converged = res.converged
        self.metrics.alignment_iterations = res.iterations
        for s, ee in zip(res.steps, plant.ee_log):
            self.trace.append(_row(Phase.PRE_INSERT, "", s.iteration, s.time, ee,
                                   s.deviation, s.twist, s.qdot, s.converged))
        if not res.converged:
            self.fail("alignment-not-converged")
            return None
        self.metrics.aligned_error = [float(v) for v in res.final_error]
        true_err = compose(goal.inverse(), tip_pose(self.world)).as_vector()
        self.metrics.aligned_error_true = [float(v) for v in true_err]
        self.emit(TaskEvent.ALIGNED)
        return goal

    def insert(self) -> None:
        t = self.sc.task
        dt = self.sc.control.dt
        target = self.world.socket("target")
        tip0 = tip_pose(self.world)
        direction = -tip0.axis(0)
        limit = t.standoff + t.insert_overshoot
        step = t.insert_speed * dt
        travelled = 0.0
        k = 0
        while travelled < limit:
            ee = self.world.ee_pose
            self.world = replace(self.world, ee_pose=RigidTransform(ee.translation + step * direction, ee.rotation))
            travelled += step
            k += 1
            if not self.advance_time(dt):
                return
            self.trace.append(_row(Phase.INSERT, "", k, self.world.time, self.world.ee_pose))
            tip = tip_pose(self.world)
            depth = float(np.dot(tip.translation - target.center, target.normal))
            if depth <= 0.0:
                offset = tip.translation - target.center
                radial = float(np.linalg.norm(offset - np.dot(offset, target.normal) * target.normal))
                angle = float(math.acos(min(1.0, max(-1.0, float(np.dot(tip.axis(0), target.normal))))))
                self.metrics.insert_radial_error = radial
                self.metrics.insert_angle_error = angle
                if radial <= t.capture_radius and angle <= t.capture_angle:
                    self.world = replace(self.world, cable=replace(self.world.cable, plugged_into="target"))
                    self.emit(TaskEvent.INSERTED)
                    self.metrics.status = "Done"
                else:
                    self.fail("insertion-missed")
                return
        self.fail("insertion-overshoot")


def run_task(sc: Scenario, seed: Optional[int] = None, stop_after: Optional[Phase] = None) -> TaskRun:
    """Run the plug task for one seed.  Never raises on task failure."""
    d = _Driver(sc, sc.seed if seed is None else seed)
    run = d.run
    d.initialize()
    if d.alive and stop_after is not Phase.INITIALIZE:
        d_s = d.grasp()
        if d.alive and stop_after is not Phase.GRASP:
            d.unplug()
            if d.alive and stop_after is not Phase.UNPLUG:
                if d.pre_insert(d_s) is not None and stop_after is not Phase.PRE_INSERT:
                    d.insert()
    run.world = d.world
    return run
