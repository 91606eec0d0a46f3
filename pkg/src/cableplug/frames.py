"""Rigid-transform algebra shared by every other module.

Rotation convention for the whole package: roll/pitch/yaw are extrinsic
X-Y-Z angles, i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.  A pose is
serialized as the six reals ``[x, y, z, roll, pitch, yaw]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GIMBAL_EPS = 1e-9


def normalize_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_matrix(rpy) -> np.ndarray:
    roll, pitch, yaw = (float(v) for v in rpy)
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_rpy_flagged(R: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of :func:`rpy_to_matrix`.

    Returns ``(rpy, degenerate)``.  At pitch = +-pi/2 roll and yaw are not
    separable; yaw is then forced to 0 and ``degenerate`` is True.
    """
    R = np.asarray(R, dtype=float)
    cos_pitch = math.hypot(R[0, 0], R[1, 0])
    pitch = math.atan2(-R[2, 0], cos_pitch)
    if cos_pitch < GIMBAL_EPS:
        roll = math.atan2(-R[1, 2], R[1, 1])
        return normalize_angle(np.array([roll, pitch, 0.0])), True
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return normalize_angle(np.array([roll, pitch, yaw])), False


def matrix_to_rpy(R: np.ndarray) -> np.ndarray:
    return matrix_to_rpy_flagged(R)[0]


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula for a rotation vector (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(rotvec))
    K = skew(rotvec)
    if theta < 1e-12:
        return np.eye(3) + K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-9:
        return 0.5 * w
    if math.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[:, int(np.argmax(np.diag(M)))]
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * theta
    return w * (theta / (2.0 * math.sin(theta)))


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix."""
    return float(np.linalg.norm(matrix_to_axis_angle(R)))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class RigidTransform:
    """Pose of a child frame in a parent frame.

    Maps child coordinates to parent coordinates: ``p_parent = R @ p_child + t``.
    """

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(R))):
            raise ValueError("non-finite transform")
        t.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", R)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> RigidTransform:
        return cls(np.array([x, y, z], dtype=float))

    @classmethod
    def from_rpy(cls, translation, rpy) -> RigidTransform:
        return cls(np.asarray(translation, dtype=float), rpy_to_matrix(rpy))

    @classmethod
    def from_vector(cls, v) -> RigidTransform:
        v = np.asarray(v, dtype=float).reshape(6)
        return cls.from_rpy(v[:3], v[3:])

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, 3], M[:3, :3])

    @property
    def rpy(self) -> np.ndarray:
        return matrix_to_rpy(self.rotation)

    def as_vector(self) -> np.ndarray:
        """``[x, y, z, roll, pitch, yaw]``."""
        return np.concatenate([self.translation, self.rpy])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Map point(s) given in the child frame into the parent frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(-Rt @ self.translation, Rt)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def axis(self, i: int) -> np.ndarray:
        return self.rotation[:, i].copy()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: maps a point through ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.translation + a.translation, a.rotation @ b.rotation)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def frame_from_x_axis(origin, x_axis) -> tuple[RigidTransform, bool]:
    """Frame whose x-axis is ``x_axis`` with zero roll about it.

    The z-axis is world-z with its x component projected out, and
    ``y = z × x``.  When ``x_axis`` is parallel to world-z the completion
    falls back to world-y, and the returned flag is True.
    """
    x = np.asarray(x_axis, dtype=float)
    n = np.linalg.norm(x)
    if n == 0 or not np.isfinite(n):
        raise ValueError("x-axis must be a nonzero finite vector")
    x = x / n
    up = np.array([0.0, 0.0, 1.0])
    fallback = np.linalg.norm(np.cross(x, up)) < 1e-6
    if fallback:
        # complete from world-y instead: y is world-y minus its x part
        y = np.array([0.0, 1.0, 0.0]) - np.dot(x, [0.0, 1.0, 0.0]) * x
        y /= np.linalg.norm(y)
        z = np.cross(x, y)
    else:
        z = up - np.dot(up, x) * x
        z /= np.linalg.norm(z)
        y = np.cross(z, x)
    R = np.column_stack([x, y, z])
    return RigidTransform(np.asarray(origin, dtype=float), R), bool(fallback)


class FrameLookupError(KeyError):
    pass


class FrameTree:
    """Named frames, each stored relative to a parent; rooted at ``world``."""

    ROOT = "world"

    def __init__(self):
        self._edges: dict[str, tuple[str, RigidTransform]] = {}

    def __contains__(self, name: str) -> bool:
        return name == self.ROOT or name in self._edges

    def names(self) -> list[str]:
        return [self.ROOT, *self._edges]

    def set(self, name: str, parent: str, transform: RigidTransform) -> None:
        """Insert or replace the edge ``parent -> name``."""
        if name == self.ROOT:
            raise ValueError("cannot re-parent the world frame")
        if parent not in self:
            raise FrameLookupError(parent)
        # walk up from the new parent; reaching `name` would close a cycle
        node = parent
        while node != self.ROOT:
            if node == name:
                raise ValueError(f"setting {name!r} under {parent!r} creates a cycle")
            node = self._edges[node][0]
        self._edges[name] = (parent, transform)

    def parent(self, name: str) -> str:
        if name not in self._edges:
            raise FrameLookupError(name)
        return self._edges[name][0]

    def to_world(self, name: str) -> RigidTransform:
        if name == self.ROOT:
            return RigidTransform.identity()
        if name not in self._edges:
            raise FrameLookupError(name)
        parent, t = self._edges[name]
        return compose(self.to_world(parent), t)

    def copy(self) -> FrameTree:
        out = FrameTree()
        out._edges = dict(self._edges)
        return out


def relative(tree: FrameTree, frm: str, to: str) -> RigidTransform:
    """Pose of frame ``frm`` expressed in frame ``to``."""
    return compose(tree.to_world(to).inverse(), tree.to_world(frm))
