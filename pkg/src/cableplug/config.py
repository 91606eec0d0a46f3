"""Scenario files: YAML validated into typed settings."""
from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ScenarioError(ValueError):
    """Unreadable or invalid scenario; the message names the file and field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec3 = tuple[float, float, float]


class ShapeSettings(_Strict):
    """Generator slopes/curvatures; the offsets come from the source socket."""

    a1: float = 0.0
    a2: float = 0.0
    b1: float = 0.0
    b2: float = 0.0


class CableSettings(_Strict):
    kind: Literal["power", "hdmi"] = "power"
    length: float = Field(0.6, gt=0)
    kappa: Optional[float] = Field(None, ge=0)  # defaults per kind
    radius: float = Field(0.005, gt=0)
    shapes: list[ShapeSettings] = Field(default_factory=lambda: [ShapeSettings()], min_length=1)
    shape_jitter: float = Field(0.02, ge=0)

    def stiffness(self) -> float:
        if self.kappa is not None:
            return self.kappa
        return 0.05 if self.kind == "power" else 0.15


class SocketSettings(_Strict):
    source: Vec3 = (-0.15, 0.0, 0.3)
    target: Vec3 = (0.15, 0.0, 0.3)
    hole_radius: float = Field(0.02, gt=0)
    wall_y: float = 0.0

    @model_validator(mode="after")
    def _on_wall(self):
        for name in ("source", "target"):
            if abs(getattr(self, name)[1] - self.wall_y) > 1e-9:
                raise ValueError(f"{name} socket must lie on the wall plane y={self.wall_y}")
        return self


class CameraSettings(_Strict):
    f: float = Field(525.0, gt=0)
    cx: float = 319.5
    cy: float = 239.5
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)
    position: Vec3 = (0.0, 1.0, 0.35)
    look_at: Vec3 = (0.0, 0.0, 0.35)


class SensorSettings(_Strict):
    cloud_rate: float = Field(30.0, gt=0)
    model_rate: float = Field(30.0, gt=0)
    noise: float = Field(0.002, ge=0)
    outlier_fraction: float = Field(0.02, ge=0, lt=1)
    points_per_frame: int = Field(1500, gt=0)
    outlier_box: tuple[Vec3, Vec3] = ((-0.6, -0.3, -0.2), (0.6, 1.0, 0.8))
    intensity_noise: float = Field(0.02, ge=0)
    depth_noise: float = Field(0.001, ge=0)


class PerceptionSettings(_Strict):
    radius_range: tuple[int, int] = (5, 40)
    circle_threshold: float = Field(0.6, gt=0, le=1)
    ransac_iters: int = Field(200, gt=0)
    ransac_tol: float = Field(0.005, gt=0)
    cloud_stride: int = Field(8, gt=0)
    cable_threshold: float = 0.15
    bbox_margin: float = Field(5.0, ge=0)
    crop_half_width: float = Field(0.25, gt=0)
    crop_depth: float = Field(0.45, gt=0)
    isolation_radius: float = Field(0.01, gt=0)
    isolation_neighbors: int = Field(3, ge=0)
    n_samples: int = Field(10, ge=2)
    plug_exclusion: float = Field(0.04, ge=0)
    bin_width: float = Field(0.01, gt=0)
    spread_threshold: float = Field(0.03, gt=0)


class ControlSettings(_Strict):
    kp: float = Field(2.0, ge=0)
    kd: float = Field(0.2, ge=0)
    dt: float = Field(1.0 / 30.0, gt=0)
    execution_time: float = Field(1.0, gt=0)
    eps_translation: float = Field(0.01, gt=0)
    eps_rotation: float = Field(0.02, gt=0)
    max_linear: float = Field(1.5, gt=0)
    max_angular: float = Field(0.6, gt=0)
    max_iters: int = Field(500, gt=0)
    damping: float = Field(0.01, gt=0)
    sigma_min: float = Field(1e-3, gt=0)


class TaskSettings(_Strict):
    d_min: Optional[float] = Field(None, gt=0)  # defaults per cable kind
    d_max: Optional[float] = Field(None, gt=0)
    home: Vec3 = (0.0, 0.5, 0.6)
    grasp_duration: float = Field(2.0, ge=0)
    grasp_tolerance: float = Field(0.02, gt=0)
    unplug_distance: float = Field(0.15, gt=0)
    unplug_speed: float = Field(0.1, gt=0)
    standoff: float = Field(0.05, gt=0)
    insert_speed: float = Field(0.05, gt=0)
    insert_overshoot: float = Field(0.03, gt=0)
    capture_radius: float = Field(0.02, gt=0)
    capture_angle: float = Field(0.1, gt=0)
    timeout: float = Field(60.0, gt=0)
    mass_gain: float = Field(10.0, ge=0)
    perception_retries: int = Field(5, ge=0)


class Disturbance(_Strict):
    time: float = Field(ge=0)  # seconds after alignment starts
    mass: float = Field(ge=0)


class Scenario(_Strict):
    name: str = "scenario"
    seed: int = 0
    cable: CableSettings = CableSettings()
    sockets: SocketSettings = SocketSettings()
    camera: CameraSettings = CameraSettings()
    sensor: SensorSettings = SensorSettings()
    perception: PerceptionSettings = PerceptionSettings()
    control: ControlSettings = ControlSettings()
    task: TaskSettings = TaskSettings()
    disturbances: list[Disturbance] = Field(default_factory=list)

    def grasp_range(self) -> tuple[float, float]:
        lo, hi = (0.18, 0.30) if self.cable.kind == "power" else (0.12, 0.24)
        lo = self.task.d_min if self.task.d_min is not None else lo
        hi = self.task.d_max if self.task.d_max is not None else hi
        return lo, hi


def _format_error(source: str, err: ValidationError) -> str:
    lines = [f"{source}: invalid scenario"]
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {where}: {e['msg']}")
    return "\n".join(lines)


def set_path(data: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dot-separated key path, creating mappings on the way."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if k.isdigit() and isinstance(node, list):
            node = node[int(k)]
            continue
        nxt = node.get(k)
        if not isinstance(nxt, (dict, list)):
            nxt = {}
            node[k] = nxt
        node = nxt
    last = keys[-1]
    if last.isdigit() and isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ScenarioError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ScenarioError(f"override {text!r} has an empty key")
    return key, yaml.safe_load(raw)


BUILTIN = {"canonical"}


def builtin_path(name: str):
    return resources.files("cableplug") / "scenarios" / f"{name}.yaml"


def load_scenario(path, overrides=()) -> Scenario:
    """Read a scenario file (or a builtin name) and apply ``key=value`` overrides."""
    if str(path) in BUILTIN:
        source = f"<builtin {path}>"
        text = builtin_path(str(path)).read_text()
    else:
        p = Path(path)
        source = str(p)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ScenarioError(f"{source}: cannot read ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{source}: YAML parse error: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{source}: top level must be a mapping")
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_path(data, key, value)
    try:
        return Scenario.model_validate(data)
    except ValidationError as err:
        raise ScenarioError(_format_error(source, err)) from None
