"""Socket pose estimation and point-cloud reduction.

Pinhole camera convention: camera frame x right, y down, z along the
optical axis; pixel ``(u, v) = (f X / Z + cx, f Y / Z + cy)``.  Setting
``cx = cy = 0`` gives the textbook perspective projection without a
principal point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .frames import RigidTransform, frame_from_x_axis


class PerceptionError(RuntimeError):
    """Base class for perception failures."""


class NotFoundError(PerceptionError):
    pass


class InvalidDepthError(PerceptionError, ValueError):
    pass


class DegenerateInputError(PerceptionError, ValueError):
    pass


class NotVisibleError(PerceptionError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class DepthImage:
    """Depth grid in meters (0 = no return) with a paired intensity grid."""

    depth: np.ndarray
    intensity: np.ndarray
    camera: CameraIntrinsics
    camera_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.intensity = np.asarray(self.intensity, dtype=float)
        if self.depth.shape != self.intensity.shape:
            raise ValueError("depth and intensity grids differ in shape")
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise ValueError("image shape does not match intrinsics")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depths must be finite and non-negative")


def project(points, cam: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point(s) to pixel coordinates ``(u, v)``."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    u = cam.f * p[..., 0] / z + cam.cx
    v = cam.f * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def back_project(pixel, depth: float, cam: CameraIntrinsics) -> np.ndarray:
    """Pixel plus depth to a camera-frame point."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([(u - cam.cx) * depth / cam.f, (v - cam.cy) * depth / cam.f, float(depth)])


def depth_to_cloud(img: DepthImage, stride: int = 1) -> np.ndarray:
    """Back-project every ``stride``-th valid pixel; camera frame."""
    cam = img.camera
    vs, us = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
    z = img.depth[::stride, ::stride]
    ok = z > 0
    z, us, vs = z[ok], us[ok], vs[ok]
    return np.column_stack([(us - cam.cx) * z / cam.f, (vs - cam.cy) * z / cam.f, z])


# -- circle detection ---------------------------------------------------------


@dataclass(frozen=True)
class CircleDetection:
    center: tuple[float, float]
    radius: float
    score: float


def _circle_support(center, r, edge_mask, gx, gy, mag, max_dist=1.5, min_cos=0.8) -> float:
    """Fraction of circumference samples backed by a radially oriented edge."""
    h, w = edge_mask.shape
    n = max(8, int(math.ceil(2 * math.pi * r)))
    theta = np.arange(n) * (2 * math.pi / n)
    cu, cv = center
    hits = 0
    reach = int(math.ceil(max_dist))
    offsets = [(du, dv) for du in range(-reach, reach + 1) for dv in range(-reach, reach + 1)
               if du * du + dv * dv <= max_dist * max_dist]
    for t in theta:
        su, sv = cu + r * math.cos(t), cv + r * math.sin(t)
        bu, bv = int(round(su)), int(round(sv))
        for du, dv in offsets:
            pu, pv = bu + du, bv + dv
            if 0 <= pu < w and 0 <= pv < h and edge_mask[pv, pu]:
                radial = np.array([pu - cu, pv - cv])
                rn = np.linalg.norm(radial)
                if rn == 0:
                    continue
                c = abs(gx[pv, pu] * radial[0] + gy[pv, pu] * radial[1]) / (rn * mag[pv, pu])
                if c >= min_cos:
                    hits += 1
                    break
    return hits / n


def _fit_circle(us, vs) -> tuple[float, float, float]:
    # algebraic (Kasa) fit: u^2 + v^2 + D u + E v + F = 0
    A = np.column_stack([us, vs, np.ones_like(us)])
    b = -(us**2 + vs**2)
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    cu, cv = -D / 2, -E / 2
    return cu, cv, math.sqrt(max(cu * cu + cv * cv - F, 0.0))


def detect_circle(
    intensity: np.ndarray,
    radius_range: tuple[float, float] = (5, 40),
    threshold: float = 0.6,
    smooth_sigma: float = 1.0,
    edge_fraction: float = 0.3,
    n_candidates: int = 8,
) -> CircleDetection:
    """Find the best-supported circle by gradient-direction voting.

    Each edge pixel votes for centers along its gradient line at every
    radius in ``radius_range``.  Accumulator peaks are then scored by the
    fraction of the circumference carrying a radially oriented edge (1.0 for
    a perfect rendered circle); the best candidate above ``threshold`` wins.
    """
    img = np.asarray(intensity, dtype=float)
    if img.size == 0:
        raise NotFoundError("empty image")
    if smooth_sigma > 0:
        img = ndimage.gaussian_filter(img, smooth_sigma)
    gx = ndimage.sobel(img, axis=1)
    gy = ndimage.sobel(img, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak < 1e-9:
        raise NotFoundError("no intensity edges")
    edges = mag > edge_fraction * peak
    ev, eu = np.nonzero(edges)
    nu, nv = gx[ev, eu] / mag[ev, eu], gy[ev, eu] / mag[ev, eu]

    h, w = img.shape
    r_min, r_max = radius_range
    radii = np.arange(math.floor(r_min), math.ceil(r_max) + 1, dtype=float)
    acc = np.zeros(h * w)
    for sign in (1.0, -1.0):
        cu = np.rint(eu[:, None] + sign * nu[:, None] * radii[None, :]).astype(np.int64)
        cv = np.rint(ev[:, None] + sign * nv[:, None] * radii[None, :]).astype(np.int64)
        ok = (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
        acc += np.bincount((cv[ok] * w + cu[ok]), minlength=h * w)
    acc = ndimage.gaussian_filter(acc.reshape(h, w), 1.0)

    local_max = (acc == ndimage.maximum_filter(acc, size=2 * int(r_min) + 1)) & (acc > 0)
    cand_v, cand_u = np.nonzero(local_max)
    order = np.argsort(-acc[cand_v, cand_u], kind="stable")[:n_candidates]

    best: Optional[CircleDetection] = None
    for k in order:
        c = (float(cand_u[k]), float(cand_v[k]))
        d = np.hypot(eu - c[0], ev - c[1])
        radial_cos = np.abs(nu * (eu - c[0]) + nv * (ev - c[1])) / np.maximum(d, 1e-9)
        near = (d >= r_min - 1) & (d <= r_max + 1) & (radial_cos > 0.9)
        if near.sum() < 8:
            continue
        hist, bin_edges = np.histogram(d[near], bins=np.arange(r_min - 1, r_max + 2, 1.0))
        r0 = 0.5 * (bin_edges[np.argmax(hist)] + bin_edges[np.argmax(hist) + 1])
        ring = near & (np.abs(d - r0) <= 2.0)
        if ring.sum() < 8:
            continue
        fu, fv, fr = _fit_circle(eu[ring].astype(float), ev[ring].astype(float))
        if not (r_min - 1 <= fr <= r_max + 1):
            continue
        score = _circle_support((fu, fv), fr, edges, gx, gy, mag)
        if best is None or score > best.score:
            best = CircleDetection((fu, fv), fr, score)
    if best is None or best.score < threshold:
        raise NotFoundError("no circle above the score threshold")
    return best


# -- plane fitting ------------------------------------------------------------


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    offset: float
    inliers: np.ndarray  # boolean mask

    def distance(self, points) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset


def ransac_plane(
    points,
    iters: int = 200,
    inlier_tol: float = 0.005,
    rng=None,
    viewpoint=None,
) -> PlaneFit:
    """Plane ``n·p = offset`` with the most inliers over sampled triples.

    The winning inlier set is refit by least squares (smallest singular
    vector of the centered inliers) and the normal is oriented toward
    ``viewpoint`` (default: the origin, i.e. the camera).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < 3:
        raise DegenerateInputError("need at least 3 points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateInputError("points are collinear")
    rng = np.random.default_rng(rng)

    # draw all hypotheses up front so the result depends only on (rng, points)
    idx = np.array([rng.choice(n, 3, replace=False) for _ in range(iters)])
    p0, p1, p2 = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    lens = np.linalg.norm(normals, axis=1)
    valid = lens > 1e-12
    if not np.any(valid):
        raise DegenerateInputError("every sampled triple was collinear")
    normals = normals[valid] / lens[valid, None]
    offsets = np.einsum("ij,ij->i", normals, p0[valid])
    counts = (np.abs(pts @ normals.T - offsets) <= inlier_tol).sum(axis=0)
    best = int(np.argmax(counts))
    inliers = np.abs(pts @ normals[best] - offsets[best]) <= inlier_tol

    normal = normals[best]
    if inliers.sum() >= 3:
        sub = pts[inliers]
        c = sub.mean(axis=0)
        _, s, vt = np.linalg.svd(sub - c)
        if s[1] > 1e-12 * max(s[0], 1e-300):
            normal = vt[2]
    else:
        c = pts[inliers].mean(axis=0)
    view = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=float)
    if np.dot(normal, view - c) < 0:
        normal = -normal
    offset = float(np.dot(normal, c))
    inliers = np.abs(pts @ normal - offset) <= inlier_tol
    return PlaneFit(normal, offset, inliers)


def socket_frame(center, normal) -> RigidTransform:
    """Socket frame: origin at ``center``, x-axis along ``normal``, zero roll."""
    nrm = np.asarray(normal, dtype=float)
    if abs(np.linalg.norm(nrm) - 1.0) > 1e-6:
        raise ValueError("normal must be a unit vector")
    frame, _ = frame_from_x_axis(center, nrm)
    return frame


@dataclass(frozen=True)
class SocketEstimate:
    pixel: tuple[float, float]
    center: np.ndarray  # world frame
    normal: np.ndarray  # world frame, unit, pointing out of the wall
    frame: RigidTransform
    radius_px: float = 0.0


def read_depth(img: DepthImage, u: float, v: float) -> tuple[float, bool]:
    """Depth at the pixel nearest ``(u, v)``; nearest valid pixel if it is empty.

    Returns ``(depth, substituted)``.
    """
    h, w = img.depth.shape
    iu = min(max(int(round(u)), 0), w - 1)
    iv = min(max(int(round(v)), 0), h - 1)
    z = img.depth[iv, iu]
    if z > 0:
        return float(z), False
    vv, uu = np.nonzero(img.depth > 0)
    if len(vv) == 0:
        raise InvalidDepthError("image has no valid depth")
    k = int(np.argmin((uu - iu) ** 2 + (vv - iv) ** 2))
    return float(img.depth[vv[k], uu[k]]), True


def estimate_socket(
    img: DepthImage,
    radius_range=(5, 40),
    circle_threshold: float = 0.6,
    ransac_iters: int = 200,
    ransac_tol: float = 0.005,
    cloud_stride: int = 8,
    rng=None,
) -> SocketEstimate:
    """Socket hole center from circle detection + depth, orientation from the wall plane."""
    det = detect_circle(img.intensity, radius_range, circle_threshold)
    z, _ = read_depth(img, *det.center)
    center_cam = back_project(det.center, z, img.camera)
    plane = ransac_plane(depth_to_cloud(img, cloud_stride), ransac_iters, ransac_tol, rng=rng)
    pose = img.camera_pose
    center = pose.apply(center_cam)
    normal = pose.rotation @ plane.normal
    normal = normal / np.linalg.norm(normal)
    return SocketEstimate(det.center, center, normal, socket_frame(center, normal), det.radius)


# -- cloud filtering and the cable pixel pipeline -----------------------------


@dataclass(frozen=True)
class PassThroughBounds:
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    y_min: Optional[float] = None
    y_max: Optional[float] = None
    z_min: Optional[float] = None
    z_max: Optional[float] = None

    def __post_init__(self):
        for axis in "xyz":
            lo, hi = getattr(self, f"{axis}_min"), getattr(self, f"{axis}_max")
            if lo is not None and hi is not None and lo > hi:
                raise ValueError(f"{axis}_min > {axis}_max")

    def mask(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        keep = np.ones(len(pts), dtype=bool)
        for i, axis in enumerate("xyz"):
            lo, hi = getattr(self, f"{axis}_min"), getattr(self, f"{axis}_max")
            if lo is not None:
                keep &= pts[:, i] >= lo
            if hi is not None:
                keep &= pts[:, i] <= hi
        return keep


def pass_through(cloud, bounds: PassThroughBounds) -> np.ndarray:
    """Points inside every bounded closed interval, order preserved."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    return pts[bounds.mask(pts)]


def remove_isolated(cloud, radius: float = 0.01, min_neighbors: int = 3) -> np.ndarray:
    """Drop points with fewer than ``min_neighbors`` others within ``radius``."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    counts = cKDTree(pts).query_ball_point(pts, radius, return_length=True) - 1
    return pts[counts >= min_neighbors]


@dataclass(frozen=True)
class BoundingBox2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise ValueError("bounding box must have positive area")

    def contains(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return (
            (p[:, 0] >= self.u_min) & (p[:, 0] <= self.u_max)
            & (p[:, 1] >= self.v_min) & (p[:, 1] <= self.v_max)
        )


def bbox_oracle(points_world, cam: CameraIntrinsics, camera_pose: RigidTransform,
                margin: float = 5.0) -> BoundingBox2D:
    """Padded pixel bounds of the projected ground-truth cable.

    Stands in for a learned detector: the simulator knows where the cable is.
    """
    p_cam = camera_pose.inverse().apply(np.asarray(points_world, dtype=float).reshape(-1, 3))
    front = p_cam[:, 2] > 1e-6
    if not np.any(front):
        raise NotVisibleError("cable is behind the camera")
    px = project(p_cam[front], cam)
    inside = (px[:, 0] >= 0) & (px[:, 0] <= cam.width - 1) & (px[:, 1] >= 0) & (px[:, 1] <= cam.height - 1)
    if not np.any(inside):
        raise NotVisibleError("cable projects outside the image")
    px = px[inside]
    u0, v0 = px.min(axis=0) - margin
    u1, v1 = px.max(axis=0) + margin
    if u1 <= u0:
        u0, u1 = u0 - 0.5, u1 + 0.5
    if v1 <= v0:
        v0, v1 = v0 - 0.5, v1 + 0.5
    return BoundingBox2D(
        max(u0, 0.0), max(v0, 0.0), min(u1, cam.width - 1.0), min(v1, cam.height - 1.0)
    )


def cable_pixels(img: DepthImage, box: BoundingBox2D, threshold: float = 0.15) -> np.ndarray:
    """Dark pixels inside ``box`` as ``(u, v)`` rows, top-to-bottom then left-to-right."""
    u0, v0 = int(math.ceil(box.u_min)), int(math.ceil(box.v_min))
    u1, v1 = int(math.floor(box.u_max)), int(math.floor(box.v_max))
    sub = img.intensity[v0 : v1 + 1, u0 : u1 + 1]
    vv, uu = np.nonzero(sub < threshold)  # row-major order
    return np.column_stack([uu + u0, vv + v0])


def object_center(pixels, img: DepthImage, cam: Optional[CameraIntrinsics] = None) -> tuple[np.ndarray, bool]:
    """Back-project the middle pixel of an ordered pixel set (camera frame).

    Returns ``(point, substituted)``; ``substituted`` is True when the middle
    pixel had no depth and the nearest pixel of the set with depth was used.
    """
    cam = cam or img.camera
    px = np.asarray(pixels).reshape(-1, 2)
    if len(px) == 0:
        raise NotFoundError("empty pixel set")
    mid = px[len(px) // 2]
    z = img.depth[int(mid[1]), int(mid[0])]
    if z > 0:
        return back_project(mid, z, cam), False
    depths = img.depth[px[:, 1].astype(int), px[:, 0].astype(int)]
    valid = np.nonzero(depths > 0)[0]
    if len(valid) == 0:
        raise InvalidDepthError("no pixel in the set has depth")
    d2 = ((px[valid] - mid) ** 2).sum(axis=1)
    k = valid[int(np.argmin(d2))]
    return back_project(px[k], depths[k], cam), True


# -- file formats -------------------------------------------------------------


def save_cloud(path, points, comment: str = "") -> None:
    """One ``x y z`` line per point; ``#`` lines are comments."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def load_cloud(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    return np.array(rows, dtype=float).reshape(-1, 3)


def save_depth_image(path, img: DepthImage) -> None:
    """JSON header line, then little-endian float64 depth and intensity grids."""
    cam = img.camera
    header = {
        "width": cam.width,
        "height": cam.height,
        "f": cam.f,
        "cx": cam.cx,
        "cy": cam.cy,
        "camera_pose": img.camera_pose.as_vector().tolist(),
        "dtype": "<f8",
        "layers": ["depth", "intensity"],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(img.depth.astype("<f8").tobytes())
        fh.write(img.intensity.astype("<f8").tobytes())


def load_depth_image(path) -> DepthImage:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    cam = CameraIntrinsics(header["f"], header["cx"], header["cy"], header["width"], header["height"])
    n = cam.width * cam.height
    data = np.frombuffer(raw[nl + 1 :], dtype=header.get("dtype", "<f8"))
    if data.size != 2 * n:
        raise ValueError(f"{path}: expected {2 * n} values, found {data.size}")
    depth = data[:n].reshape(cam.height, cam.width).astype(float)
    intensity = data[n:].reshape(cam.height, cam.width).astype(float)
    pose = RigidTransform.from_vector(header.get("camera_pose", [0.0] * 6))
    return DepthImage(depth, intensity, cam, pose)
