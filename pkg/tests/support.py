"""Scene and image generators shared by the tests."""
import numpy as np

from cableplug.frames import RigidTransform, axis_angle_to_matrix


def disk_image(center, radius, shape=(128, 128), inside=0.3, outside=1.0, noise=0.0, rng=None):
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    img = np.where((uu - center[0]) ** 2 + (vv - center[1]) ** 2 <= radius**2, inside, outside)
    if noise > 0:
        img = img + np.random.default_rng(rng).normal(0.0, noise, img.shape)
    return img


def random_transform(rng, scale=1.0, max_angle=np.pi) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform(rng.normal(size=3) * scale, axis_angle_to_matrix(axis * rng.uniform(0, max_angle)))


def random_offset(rng, max_dist, max_angle, min_dist=0.0) -> RigidTransform:
    d = rng.normal(size=3)
    d *= rng.uniform(min_dist, max_dist) / np.linalg.norm(d)
    a = rng.normal(size=3)
    a *= rng.uniform(0.0, max_angle) / np.linalg.norm(a)
    return RigidTransform(d, axis_angle_to_matrix(a))


def plane_with_outliers(rng, n_plane=70, n_out=30, sigma=0.002, normal=(0.0, 0.0, 1.0), offset=1.0):
    """Points on ``normal . p = offset`` (camera-facing) plus uniform outliers."""
    normal = np.asarray(normal, dtype=float)
    normal /= np.linalg.norm(normal)
    u = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    ab = rng.uniform(-0.5, 0.5, (n_plane, 2))
    pts = offset * normal + ab[:, :1] * u + ab[:, 1:] * v + rng.normal(0.0, sigma, (n_plane, 3))
    out = offset * normal + rng.uniform(-0.5, 0.5, (n_out, 3))
    return np.vstack([pts, out])
