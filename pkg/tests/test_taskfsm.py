import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cableplug.config import load_scenario
from cableplug.frames import RigidTransform, compose, inverse, rotation_angle
from cableplug.taskfsm import (
    FORWARD,
    Phase,
    ProtocolViolation,
    TaskEvent,
    TaskState,
    advance,
    build_world,
    fail,
    pre_insert_frame,
    run_task,
)
from cableplug.simworld import tip_pose

E = TaskEvent
P = Phase
ORDER = ["Initialize", "Grasp", "Unplug", "PreInsert", "Insert"]


@pytest.fixture(scope="module")
def canonical():
    return load_scenario("canonical")


@pytest.fixture(scope="module")
def seed0(canonical):
    return run_task(canonical, 0)


def drive(events, state=TaskState()):
    for ev in events:
        state = advance(state, ev)
    return state


class TestAdvance:
    def test_happy_path(self):
        s = drive([E.SOCKET_FOUND, E.MODEL_READY, E.GRASP_REACHED, E.UNPLUG_COMPLETE, E.ALIGNED, E.INSERTED])
        assert s.phase is P.DONE and s.reason is None

    def test_model_needs_socket(self):
        with pytest.raises(ProtocolViolation):
            advance(TaskState(), E.MODEL_READY)
        assert advance(TaskState(socket_found=True), E.MODEL_READY).phase is P.GRASP

    def test_lost_during_initialize_retries(self):
        s = drive([E.SOCKET_FOUND, E.PERCEPTION_LOST])
        assert s == TaskState(P.INITIALIZE, False)
        with pytest.raises(ProtocolViolation):
            advance(s, E.MODEL_READY)

    def test_lost_later_fails(self):
        s = drive([E.SOCKET_FOUND, E.MODEL_READY, E.GRASP_REACHED, E.PERCEPTION_LOST])
        assert s.phase is P.FAILED and s.reason == "perception-lost"

    @pytest.mark.parametrize("phase", [P.INITIALIZE, P.GRASP, P.UNPLUG, P.PRE_INSERT, P.INSERT])
    def test_timeout_everywhere(self, phase):
        s = advance(TaskState(phase, True), E.TIMEOUT)
        assert s.phase is P.FAILED and s.reason == "timeout"

    def test_skip_phase_rejected(self):
        with pytest.raises(ProtocolViolation):
            advance(TaskState(P.GRASP, True), E.ALIGNED)

    @pytest.mark.parametrize("phase", [P.DONE, P.FAILED])
    @pytest.mark.parametrize("ev", list(TaskEvent))
    def test_terminal_absorbing(self, phase, ev):
        with pytest.raises(ProtocolViolation):
            advance(TaskState(phase, True), ev)

    def test_fail_reason(self):
        assert fail(TaskState(P.GRASP, True), "no-feasible-grasp") == TaskState(P.FAILED, True, "no-feasible-grasp")
        with pytest.raises(ProtocolViolation):
            fail(TaskState(P.DONE), "x")

    @given(st.lists(st.sampled_from(list(TaskEvent)), max_size=20))
    def test_random_sequences(self, events):
        # every step either follows a defined edge or raises; the index never moves backwards
        rank = {p: i for i, p in enumerate([P.INITIALIZE, P.GRASP, P.UNPLUG, P.PRE_INSERT, P.INSERT, P.DONE])}
        s = TaskState()
        for ev in events:
            try:
                nxt = advance(s, ev)
            except ProtocolViolation:
                assert s.phase.terminal or (s.phase, ev) not in FORWARD
                continue
            if nxt.phase is not P.FAILED:
                assert rank[nxt.phase] - rank[s.phase] in (0, 1)
            s = nxt


class TestPreInsert:
    def test_offset_along_socket_x(self):
        sock = RigidTransform.from_rpy([0.15, 0.0, 0.3], [0.0, 0.0, math.pi / 2])
        pre = pre_insert_frame(sock, 0.05)
        np.testing.assert_allclose(pre.translation, [0.15, 0.05, 0.3], atol=1e-12)
        np.testing.assert_allclose(pre.rotation, sock.rotation)

    @given(st.floats(0.001, 1.0), st.integers(0, 10_000))
    def test_round_trip(self, standoff, seed):
        rng = np.random.default_rng(seed)
        sock = RigidTransform.from_rpy(rng.normal(size=3), rng.uniform(-3, 3, 3))
        back = compose(inverse(sock), pre_insert_frame(sock, standoff))
        np.testing.assert_allclose(back.translation, [standoff, 0, 0], atol=1e-9)
        assert rotation_angle(back.rotation) < 1e-9

    @pytest.mark.parametrize("d", [0.0, -0.01])
    def test_standoff_positive(self, d):
        with pytest.raises(ValueError):
            pre_insert_frame(RigidTransform.identity(), d)


class TestRun:
    def test_seed0_done(self, seed0):
        m = seed0.metrics
        assert m.status == "Done", m.reason
        assert m.phase_sequence() == ORDER
        assert m.total_duration == pytest.approx(sum(p.duration for p in m.phases), abs=1e-12)
        assert seed0.world.cable.plugged_into == "target"

    def test_states_follow_table(self, seed0):
        phases = [s.phase for s in seed0.states]
        assert phases[0] is P.INITIALIZE and phases[-1] is P.DONE

    def test_converged_then_inserted(self, seed0):
        m = seed0.metrics
        assert m.converged and 0 < m.alignment_iterations <= 500
        assert m.insert_radial_error <= 0.02

    def test_tip_in_target(self, seed0, canonical):
        tip = tip_pose(seed0.world)
        assert np.linalg.norm(tip.translation - np.array(canonical.sockets.target)) <= 0.02

    def test_grasp_infeasible(self, canonical):
        sc = load_scenario("canonical", ["task.d_min=0.7", "task.d_max=0.8"])
        run = run_task(sc, 0)
        assert run.metrics.status == "Failed"
        assert run.metrics.reason == "no-feasible-grasp"
        assert run.metrics.failed_in == "Grasp"
        assert run.metrics.phase_sequence() == ["Initialize", "Grasp"]

    def test_disturbance_still_done(self):
        sc = load_scenario("canonical", ["disturbances=[{time: 0.5, mass: 0.1}]"])
        run = run_task(sc, 1)
        assert run.metrics.status == "Done", run.metrics.reason
        assert run.world.payload_mass == pytest.approx(0.1)

    def test_timeout(self):
        sc = load_scenario("canonical", ["task.timeout=2.0"])
        run = run_task(sc, 0)
        assert run.metrics.status == "Failed" and run.metrics.reason == "timeout"

    def test_deterministic(self, canonical, seed0):
        again = run_task(canonical, 0)
        assert again.trace_csv() == seed0.trace_csv()
        assert again.metrics.to_json() == seed0.metrics.to_json()

    def test_world_varies_with_seed(self, canonical):
        a, b = build_world(canonical, 0), build_world(canonical, 3)
        assert a.cable.coeffs != b.cable.coeffs
