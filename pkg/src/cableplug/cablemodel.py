"""Dual-plane quadratic cable model.

The cable is described by two quadratics in the world y coordinate,
``x(y) = a0 + a1 y + a2 y^2`` and ``z(y) = b0 + b1 y + b2 y^2``, fit by least
squares to the filtered cloud and resampled uniformly in y into a
piecewise-linear chain ``p_1 .. p_N`` that starts at the cable tip.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .frames import RigidTransform, frame_from_x_axis


class CableModelError(ValueError):
    pass


class RankDeficientError(CableModelError):
    pass


class DegenerateShapeError(CableModelError):
    pass


class DegenerateTangentError(CableModelError):
    pass


class NoFeasibleGraspError(CableModelError):
    pass


@dataclass(frozen=True)
class QuadCoeffs:
    a0: float
    a1: float
    a2: float
    b0: float
    b1: float
    b2: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_list())):
            raise ValueError("coefficients must be finite")

    @classmethod
    def from_list(cls, values) -> QuadCoeffs:
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.a0, self.a1, self.a2, self.b0, self.b1, self.b2]

    def x(self, y):
        y = np.asarray(y, dtype=float)
        return self.a0 + self.a1 * y + self.a2 * y * y

    def z(self, y):
        y = np.asarray(y, dtype=float)
        return self.b0 + self.b1 * y + self.b2 * y * y

    def point(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.stack([self.x(y), y, self.z(y)], axis=-1)

    def tangent(self, y) -> np.ndarray:
        """d(point)/dy."""
        y = np.asarray(y, dtype=float)
        one = np.ones_like(y)
        return np.stack([self.a1 + 2 * self.a2 * y, one, self.b1 + 2 * self.b2 * y], axis=-1)


@dataclass(frozen=True)
class SampledCable:
    """Chain ``p_1 .. p_N`` ordered from the tip outward."""

    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if len(p) < 2:
            raise CableModelError("a chain needs at least 2 points")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def segments(self) -> np.ndarray:
        """Segment lengths ``l_1 .. l_{N-1}``."""
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)


@dataclass(frozen=True)
class CableModel:
    coeffs: QuadCoeffs
    chain: SampledCable
    y_range: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "coeffs": self.coeffs.as_list(),
            "y_range": [float(self.y_range[0]), float(self.y_range[1])],
            "points": self.chain.points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CableModel:
        return cls(QuadCoeffs.from_list(d["coeffs"]), SampledCable(np.array(d["points"])),
                   (float(d["y_range"][0]), float(d["y_range"][1])))


@dataclass(frozen=True)
class GraspSpec:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError("grasp range needs 0 < d_min < d_max")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.d_min + self.d_max)


POWER_CABLE_GRASP = GraspSpec(0.18, 0.30)
HDMI_CABLE_GRASP = GraspSpec(0.12, 0.24)


def fit_quadratic(y, v) -> tuple[float, float, float]:
    """Least-squares ``v ≈ c0 + c1 y + c2 y^2`` via a QR factorization."""
    y = np.asarray(y, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if y.shape != v.shape:
        raise ValueError("y and v differ in length")
    if len(np.unique(y)) < 3:
        raise RankDeficientError("need at least 3 distinct y values")
    A = np.column_stack([np.ones_like(y), y, y * y])
    Q, R = np.linalg.qr(A)
    c = np.linalg.solve(R, Q.T @ v)
    return float(c[0]), float(c[1]), float(c[2])


def fold_filter(
    cloud,
    bin_width: float = 0.01,
    spread_threshold: float = 0.03,
    tip_side: str = "min",
) -> np.ndarray:
    """Keep the tip-side part of the cloud on which x(y) and z(y) are single-valued.

    Points are bucketed into y-bins starting at the tip-side end.  Walking
    outward, the first bin whose x- or z-spread (5th to 95th percentile)
    exceeds ``spread_threshold`` marks a fold; it and everything beyond
    are dropped.  Order of the kept points is preserved.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise DegenerateShapeError("empty cloud")
    y = pts[:, 1]
    if tip_side == "min":
        dist = y - y.min()
    elif tip_side == "max":
        dist = y.max() - y
    else:
        raise ValueError("tip_side must be 'min' or 'max'")
    bins = np.floor(dist / bin_width).astype(np.int64)
    order = np.argsort(bins, kind="stable")
    sorted_bins = bins[order]
    starts = np.flatnonzero(np.r_[True, sorted_bins[1:] != sorted_bins[:-1]])
    ends = np.r_[starts[1:], len(order)]
    cutoff = None
    for s, e in zip(starts, ends):
        members = pts[order[s:e]]
        lo, hi = np.percentile(members[:, [0, 2]], [5, 95], axis=0)
        if np.any(hi - lo > spread_threshold):
            cutoff = sorted_bins[s]
            break
    if cutoff is None:
        return pts
    kept = pts[bins < cutoff]
    if len(kept) == 0:
        raise DegenerateShapeError("fold detected in the first bin")
    return kept


def build_model(cloud, n_samples: int = 10, tip_hint=None, y_range=None) -> CableModel:
    """Fit both projections and resample ``n_samples`` points uniformly in y.

    The samples span the cloud's y extent unless ``y_range`` is given.  The
    chain starts at the y-extreme nearer ``tip_hint`` (default: minimum y).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    y = pts[:, 1]
    a = fit_quadratic(y, pts[:, 0])
    b = fit_quadratic(y, pts[:, 2])
    coeffs = QuadCoeffs(*a, *b)
    y_min, y_max = (float(y.min()), float(y.max())) if y_range is None else map(float, y_range)
    ys = np.linspace(y_min, y_max, n_samples)
    chain = coeffs.point(ys)
    if tip_hint is not None:
        hint = np.asarray(tip_hint, dtype=float)
        if np.linalg.norm(chain[-1] - hint) < np.linalg.norm(chain[0] - hint):
            chain = chain[::-1]
    return CableModel(coeffs, SampledCable(chain), (y_min, y_max))


def arc_lengths(chain: SampledCable) -> np.ndarray:
    """Cumulative chord lengths ``d_1 .. d_{N-1}`` from the tip."""
    return np.cumsum(chain.segments)


def _segment_frame(chain: SampledCable, start: int, origin_index: int) -> RigidTransform:
    p = chain.points
    tangent = p[start + 1] - p[start]
    if np.linalg.norm(tangent) < 1e-9:
        raise DegenerateTangentError("zero-length segment")
    frame, _ = frame_from_x_axis(p[origin_index], tangent)
    return frame


def tip_frame(chain: SampledCable) -> RigidTransform:
    """Frame at ``p_1`` with x along the first segment and zero roll."""
    return _segment_frame(chain, 0, 0)


@dataclass(frozen=True)
class GraspChoice:
    s: int  # 1-based sample index of d_s; the grasp point is chain.points[s]
    d_s: float
    frame: RigidTransform


def select_grasp(chain: SampledCable, spec: GraspSpec) -> GraspChoice:
    """Feasible sample nearest the middle of ``[d_min, d_max]`` (ties: smaller s)."""
    d = arc_lengths(chain)
    feasible = np.flatnonzero((d >= spec.d_min) & (d <= spec.d_max))
    if len(feasible) == 0:
        raise NoFeasibleGraspError(
            f"no sample with arc length in [{spec.d_min}, {spec.d_max}] (max {d[-1]:.3f})"
        )
    k = int(feasible[np.argmin(np.abs(d[feasible] - spec.midpoint))])
    s = k + 1
    return GraspChoice(s, float(d[k]), _segment_frame(chain, s - 1, s))


def point_at_arc(chain: SampledCable, arc: float) -> np.ndarray:
    """Point at cumulative chord length ``arc`` from ``p_1`` (clamped to the chain)."""
    d = np.r_[0.0, arc_lengths(chain)]
    arc = min(max(arc, 0.0), d[-1])
    k = min(int(np.searchsorted(d, arc, side="right")) - 1, len(d) - 2)
    t = (arc - d[k]) / (d[k + 1] - d[k])
    return chain.points[k] + t * (chain.points[k + 1] - chain.points[k])


def exclude_near_tip(cloud, chain: SampledCable, arc: float) -> np.ndarray:
    """Drop points whose y lies on the tip side of the chain point at ``arc``."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    y_cut = point_at_arc(chain, arc)[1]
    increasing = chain.points[-1, 1] > chain.points[0, 1]
    keep = pts[:, 1] >= y_cut if increasing else pts[:, 1] <= y_cut
    return pts[keep]


@dataclass(frozen=True)
class CableEstimate:
    model: CableModel
    tip: RigidTransform


def track_cable(
    cloud,
    n_samples: int = 10,
    tip_hint=None,
    plug_exclusion: float = 0.0,
    bin_width: float = 0.01,
    spread_threshold: float = 0.03,
) -> CableEstimate:
    """Fold-filter, fit, and locate the tip frame.

    With ``plug_exclusion > 0`` the points within that arc length of the tip
    (the rigid plug) are left out of the final fit; the chain still spans the
    whole cloud, so the plug section is the fitted curve's extrapolation.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    tip_side = "min"
    if tip_hint is not None and len(pts):
        hint_y = float(np.asarray(tip_hint)[1])
        tip_side = "min" if abs(pts[:, 1].min() - hint_y) <= abs(pts[:, 1].max() - hint_y) else "max"
    pts = fold_filter(pts, bin_width, spread_threshold, tip_side)
    model = build_model(pts, n_samples, tip_hint)
    if plug_exclusion > 0:
        trimmed = exclude_near_tip(pts, model.chain, plug_exclusion)
        model = build_model(trimmed, n_samples, model.chain.points[0], y_range=model.y_range)
    return CableEstimate(model, tip_frame(model.chain))
