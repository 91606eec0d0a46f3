import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial import cKDTree

from cableplug.cablemodel import QuadCoeffs
from cableplug.controller import Twist
from cableplug.frames import RigidTransform, axis_angle_to_matrix, compose
from cableplug.perception import CameraIntrinsics, NotVisibleError, back_project, detect_circle, project
from cableplug.simworld import (
    CABLE,
    OUTLIER,
    GroundTruthCable,
    IdealPlant,
    SagModel,
    SensorConfig,
    Socket,
    WorldState,
    apply_sag,
    cable_points,
    inject_disturbance,
    look_at,
    make_cable,
    render_cloud,
    render_socket_view,
    sag_curve,
    step_plant,
    tip_pose,
)

CAM = CameraIntrinsics(525.0, 319.5, 239.5, 640, 480)
CAM_POSE = look_at([0.0, 1.0, 0.35], [0.0, 0.0, 0.35])
COEFFS = QuadCoeffs(-0.15, 0.0, 0.3, 0.3, 0.0, -0.3)
NOISELESS = SensorConfig(noise=0.0, outlier_fraction=0.0, intensity_noise=0.0, depth_noise=0.0)


def world(**kw) -> WorldState:
    n = np.array([0.0, 1.0, 0.0])
    sockets = (Socket("source", np.array([-0.15, 0, 0.3]), n), Socket("target", np.array([0.15, 0, 0.3]), n))
    return WorldState(make_cable(COEFFS, 0.6, 0.0), sockets, **kw)


def hanging_world(mass=0.0) -> WorldState:
    w = world(ee_pose=RigidTransform.from_rpy([0.0, 0.4, 0.3], [0, 0, math.pi / 2]), payload_mass=mass)
    cab = replace(w.cable, grasp_offset=0.25, hanging=True, plugged_into=None)
    return replace(w, cable=cab)


class TestSag:
    def test_rigid_limit(self):
        g = RigidTransform.from_rpy([0.1, 0.2, 0.3], [0.2, -0.1, 0.5])
        tip = apply_sag(g, SagModel(0.3, 0.0))
        np.testing.assert_allclose(tip.translation, g.translation - 0.3 * g.axis(0), atol=1e-12)
        np.testing.assert_allclose(tip.axis(0), g.axis(0), atol=1e-12)

    def test_mass_increases_drop(self):
        drops = [SagModel(0.25, 0.05, m).drop() for m in (0.0, 0.02, 0.05, 0.1)]
        assert all(b > a for a, b in zip(drops, drops[1:]))
        assert SagModel(0.25, 0.05, 0.1).drop() == pytest.approx(0.05 * 2.0 * 0.25**2)

    def test_drop_capped(self):
        s = SagModel(0.5, 100.0)
        assert s.drop() == pytest.approx(0.5)

    def test_tangent_matches_derivative(self):
        g = RigidTransform.from_rpy([0, 0.4, 0.3], [0, 0, math.pi / 2])
        s = SagModel(0.25, 0.15, 0.05)
        h = 1e-6
        d = (sag_curve(g, s, 0.25 - h) - sag_curve(g, s, 0.25 + h)) / (2 * h)
        tip = apply_sag(g, s)
        np.testing.assert_allclose(tip.axis(0), d / np.linalg.norm(d), atol=1e-8)
        np.testing.assert_allclose(g.translation - tip.translation - 0.25 * g.axis(0),
                                   [0, 0, s.drop()], atol=1e-12)
        assert math.atan(np.linalg.norm(np.cross(d, g.axis(0))) / (d @ g.axis(0))) == pytest.approx(s.tip_angle())

    def test_continuity(self):
        g = RigidTransform.from_rpy([0, 0.4, 0.3], [0.1, 0.2, 1.5])
        base = apply_sag(g, SagModel(0.25, 0.1, 0.05))
        for eps in (1e-4, 1e-5, 1e-6):
            g2 = compose(g, RigidTransform(np.full(3, eps), axis_angle_to_matrix(np.full(3, eps))))
            t = apply_sag(g2, SagModel(0.25, 0.1, 0.05 + eps))
            assert np.linalg.norm(t.translation - base.translation) < 10 * eps
            assert np.abs(t.rotation - base.rotation).max() < 10 * eps

    def test_validation(self):
        with pytest.raises(ValueError):
            SagModel(0.2, -0.1)
        with pytest.raises(ValueError):
            apply_sag(RigidTransform.identity(), SagModel(0.0, 0.1))


class TestCable:
    def test_invariants(self):
        with pytest.raises(ValueError):
            GroundTruthCable(COEFFS, 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            GroundTruthCable(COEFFS, 0.6, 0.0, 0.5, grasp_offset=0.7)

    def test_length(self):
        pts = cable_points(world())
        assert np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() == pytest.approx(0.6, rel=1e-6)
        pts = cable_points(hanging_world())
        assert np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() == pytest.approx(0.6, rel=0.02)

    def test_plugged_tip_at_socket(self):
        tip = tip_pose(world())
        np.testing.assert_allclose(tip.translation, [-0.15, 0, 0.3])
        np.testing.assert_allclose(tip.axis(0), [0, 1, 0], atol=1e-12)


class TestRenderCloud:
    def test_noiseless_on_curve(self):
        cloud = render_cloud(world(), NOISELESS)
        p = cloud.points
        np.testing.assert_array_less(np.linalg.norm(p - COEFFS.point(p[:, 1]), axis=1), 1e-9)

    def test_noiseless_hanging_on_curve(self):
        w = hanging_world(0.05)
        p = render_cloud(w, NOISELESS).points
        g = w.ee_pose
        local = g.inverse().apply(p)
        dangle = local[:, 0] < 0
        u = -(p[dangle] - g.translation) @ g.axis(0)
        # the drop is along world z, so undo the planar projection exactly
        k = w.sag.curvature()
        for _ in range(3):
            u = -(p[dangle] - g.translation + (k * u * u)[:, None] * [0, 0, 1]) @ g.axis(0)
        np.testing.assert_array_less(np.linalg.norm(p[dangle] - sag_curve(g, w.sag, u), axis=1), 1e-9)

    def test_deterministic(self):
        cfg = SensorConfig()
        a, b = render_cloud(world(seed=3, time=0.5), cfg), render_cloud(world(seed=3, time=0.5), cfg)
        np.testing.assert_array_equal(a.points, b.points)
        c = render_cloud(world(seed=3, time=0.5 + 1 / 30), cfg)
        assert not np.array_equal(a.points, c.points)

    def test_outlier_fraction(self):
        cloud = render_cloud(world(), SensorConfig(outlier_fraction=0.1, points_per_frame=1000))
        assert (cloud.labels == OUTLIER).sum() == 100
        assert (cloud.labels == CABLE).sum() == 900

    def test_noise_statistics(self):
        sigma = 0.005
        dense = cable_points(world(), 200001)
        tree = cKDTree(dense)
        cfg = SensorConfig(noise=sigma, outlier_fraction=0.0, points_per_frame=300)
        dists = []
        for k in range(100):
            c = render_cloud(world(seed=1, time=k / 30), cfg)
            dists.append(tree.query(c.points)[0])
        mean = np.concatenate(dists).mean()
        assert mean == pytest.approx(sigma * math.sqrt(2 / math.pi) * math.sqrt(2), rel=0.2)
        # perpendicular part of isotropic noise is 2-D Gaussian: Rayleigh mean
        assert mean == pytest.approx(sigma * math.sqrt(math.pi / 2), rel=0.05)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SensorConfig(cloud_rate=0)
        with pytest.raises(ValueError):
            SensorConfig(outlier_fraction=1.0)


class TestStepPlant:
    def test_zero_twist(self):
        w = world(ee_pose=RigidTransform.from_rpy([1, 2, 3], [0.1, 0.2, 0.3]))
        for dt in (1e-3, 0.1, 10.0):
            w2 = step_plant(w, Twist.zero(), dt)
            np.testing.assert_array_equal(w2.ee_pose.as_matrix(), w.ee_pose.as_matrix())
            assert w2.time == w.time + dt

    def test_euler_step(self):
        w2 = step_plant(world(), Twist([1, 0, 0], [0, 0, 0]), 0.1)
        np.testing.assert_allclose(w2.ee_pose.translation, [0.1, 0, 0])

    def test_composition_order(self):
        rng = np.random.default_rng(0)
        w = world()
        product = RigidTransform.identity()
        for _ in range(100):
            v = rng.normal(size=6) * 0.1
            w = step_plant(w, v, 0.01)
            product = compose(product, RigidTransform(v[:3] * 0.01, axis_angle_to_matrix(v[3:] * 0.01)))
        np.testing.assert_allclose(w.ee_pose.as_matrix(), product.as_matrix(), atol=1e-6)

    def test_joint_velocities(self):
        J = 2 * np.eye(6)
        w = replace(world(), jacobian=J)
        w2 = step_plant(w, dt=0.1, qdot=[1, 0, 0, 0, 0, 0])
        np.testing.assert_allclose(w2.ee_pose.translation, [0.2, 0, 0])

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            step_plant(world(), Twist.zero(), 0.0)

    def test_grasped_tip_follows(self):
        w = hanging_world()
        w2 = step_plant(w, Twist([0, 0, 0.1], [0, 0, 0]), 1.0)
        np.testing.assert_allclose(tip_pose(w2).translation - tip_pose(w).translation,
                                   w.ee_pose.rotation @ [0, 0, 0.1], atol=1e-12)

    def test_bitwise_replay(self):
        rng = np.random.default_rng(1)
        cmds = rng.normal(size=(30, 6))

        def roll():
            w = hanging_world()
            out = []
            for c in cmds:
                w = step_plant(w, c, 1 / 30)
                out.append(render_cloud(w, SensorConfig()).points)
            return np.stack(out)

        np.testing.assert_array_equal(roll(), roll())


class TestDisturbance:
    def test_drop_increases_then_restores(self):
        w = hanging_world()
        z0 = tip_pose(w).translation[2]
        heavy = inject_disturbance(w, 0.02)
        assert tip_pose(heavy).translation[2] < z0
        np.testing.assert_array_equal(tip_pose(inject_disturbance(heavy, 0.0)).translation,
                                      tip_pose(w).translation)

    def test_ordered(self):
        w = hanging_world()
        z = [tip_pose(inject_disturbance(w, m)).translation[2] for m in (0.0, 0.02, 0.05, 0.1)]
        assert all(b < a for a, b in zip(z, z[1:]))

    def test_negative(self):
        with pytest.raises(ValueError):
            inject_disturbance(world(), -0.1)


class TestSocketView:
    def test_detect_round_trip(self):
        img = render_socket_view(world(), CAM, CAM_POSE)
        truth = project(CAM_POSE.inverse().apply([0.15, 0, 0.3]), CAM)
        det = detect_circle(img.intensity)
        assert math.dist(det.center, truth) <= 1.0

    def test_wall_consistency(self):
        img = render_socket_view(world(), CAM, CAM_POSE, NOISELESS)
        rng = np.random.default_rng(0)
        for _ in range(200):
            u, v = rng.integers(0, 640), rng.integers(0, 480)
            if img.intensity[v, u] < 0.5:
                continue
            p = CAM_POSE.apply(back_project((u, v), img.depth[v, u], CAM))
            assert abs(p[1]) < 1e-6

    def test_facing_away(self):
        away = look_at([0.0, 1.0, 0.35], [0.0, 2.0, 0.35])
        with pytest.raises(NotVisibleError):
            render_socket_view(world(), CAM, away)

    def test_plugged_socket_not_drawn(self):
        img = render_socket_view(world(), CAM, CAM_POSE, NOISELESS)
        u, v = project(CAM_POSE.inverse().apply([-0.15, 0.0, 0.3]), CAM)
        # the plugged source shows the cable or the wall, never the hole shade
        assert img.intensity[int(round(v)), int(round(u))] != pytest.approx(0.3)


class TestIdealPlant:
    def test_scheduled_mass(self):
        g = RigidTransform.from_rpy([0, 0.4, 0.3], [0, 0, math.pi / 2])
        p = IdealPlant(g, RigidTransform.identity(), sag=SagModel(0.25, 0.1), disturbances=[(0.1, 0.05)])
        z0 = p.tip().translation[2]
        for _ in range(2):
            p.step(np.zeros(6), 1 / 30)
        assert p.tip().translation[2] == pytest.approx(z0)
        p.step(np.zeros(6), 1 / 30)
        p.step(np.zeros(6), 1 / 30)
        assert p.tip().translation[2] < z0
        assert set(p.observe().names()) == {"world", "end-effector", "cable_tip", "pre-insert"}
