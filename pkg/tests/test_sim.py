import numpy as np
import pytest

from graspsim.hand import HandState, default_desk_hand
from graspsim.se3 import Pose, Twist, quat_from_axis_angle, quat_to_rotvec
from graspsim.sim import (Action, ContactPoint, ObjectBody, Shape, SimConfig,
                          SimNanError, Simulator, detect_contacts, link_forces,
                          mechanical_energy, pd_torque, shape_inertia,
                          wrist_pd_wrench)

FAR = Pose(np.array([5.0, 5.0, 5.0]))


def far_hand(model):
    return HandState(FAR.copy(), Twist(), np.zeros(model.n_joints),
                     np.zeros(model.n_joints))


def idle_action(model):
    return Action(np.zeros(model.n_joints), FAR.copy())


def sphere(radius=0.04, mass=0.1, z=0.04):
    obj = ObjectBody(Shape("sphere", radius=radius), mass=mass)
    obj.pose = Pose(np.array([0.0, 0.0, z]))
    return obj


def unbiased(model):
    """Copy of the hand with zero PD bias (pure tracking)."""
    m = default_desk_hand()
    object.__setattr__(m, "bias", np.zeros(m.n_joints))
    return m


def unactuated():
    """Hand with all gains and bias zeroed, for zero-actuation scenarios."""
    from graspsim.hand import WristGains
    m = default_desk_hand()
    object.__setattr__(m, "kp", np.zeros(m.n_joints))
    object.__setattr__(m, "kd", np.zeros(m.n_joints))
    object.__setattr__(m, "bias", np.zeros(m.n_joints))
    object.__setattr__(m, "wrist_gains", WristGains(0.0, 0.0, 0.0, 0.0))
    return m


class TestPdTorque:
    def test_equilibrium_zero_bias(self, model):
        m = unbiased(model)
        q = np.full(m.n_joints, 0.3)
        tau = pd_torque(m, q, q, np.zeros(m.n_joints))
        np.testing.assert_allclose(tau, 0.0, atol=1e-15)

    def test_bias_enters_proportional_term(self, model):
        q = np.full(model.n_joints, 0.3)
        tau = pd_torque(model, q, q, np.zeros(model.n_joints))
        np.testing.assert_allclose(tau, model.kp * model.bias)

    def test_linear_law(self):
        m = default_desk_hand()
        object.__setattr__(m, "kp", np.full(6, 10.0))
        object.__setattr__(m, "kd", np.zeros(6))
        object.__setattr__(m, "bias", np.zeros(6))
        tau = pd_torque(m, np.full(6, 0.5), np.zeros(6), np.zeros(6))
        np.testing.assert_allclose(tau, 5.0)

    def test_pure_damping(self):
        m = default_desk_hand()
        object.__setattr__(m, "kp", np.zeros(6))
        object.__setattr__(m, "kd", np.full(6, 2.0))
        tau = pd_torque(m, np.zeros(6), np.zeros(6), np.ones(6))
        np.testing.assert_allclose(tau, -2.0)

    def test_length_mismatch(self, model):
        with pytest.raises(ValueError):
            pd_torque(model, np.zeros(2), np.zeros(model.n_joints),
                      np.zeros(model.n_joints))


class TestWristWrench:
    def test_zero_at_target_at_rest(self, model):
        state = far_hand(model)
        f, t = wrist_pd_wrench(FAR, state, model.wrist_gains)
        np.testing.assert_allclose(f, 0.0, atol=1e-12)
        np.testing.assert_allclose(t, 0.0, atol=1e-12)

    def test_position_gap(self, model):
        state = far_hand(model)
        target = Pose(FAR.position + np.array([0.02, 0.0, 0.0]))
        f, _ = wrist_pd_wrench(target, state, model.wrist_gains)
        np.testing.assert_allclose(
            f, [model.wrist_gains.kp_lin * 0.02, 0.0, 0.0], atol=1e-12)

    def test_rotation_gap_axis_angle(self, model):
        # gap of theta about z must produce torque kp*theta*z minus damping
        theta = 0.4
        state = far_hand(model)
        state.wrist_twist.angular = np.array([0.0, 0.0, 0.1])
        target = Pose.from_parts(FAR.position,
                                 quat_from_axis_angle([0, 0, 1], theta))
        expected_gap = quat_to_rotvec(target.quat)  # oracle: axis-angle log
        _, t = wrist_pd_wrench(target, state, model.wrist_gains)
        expected = (model.wrist_gains.kp_ang * expected_gap
                    - model.wrist_gains.kd_ang * state.wrist_twist.angular)
        np.testing.assert_allclose(t, expected, atol=1e-12)


class TestInertia:
    def test_sphere(self):
        i = shape_inertia(Shape("sphere", radius=0.1), 2.0)
        np.testing.assert_allclose(i, 0.4 * 2.0 * 0.01)

    def test_box(self):
        i = shape_inertia(Shape("box", half_extents=(0.1, 0.2, 0.3)), 3.0)
        np.testing.assert_allclose(i, [(0.2 ** 2 + 0.3 ** 2),
                                       (0.1 ** 2 + 0.3 ** 2),
                                       (0.1 ** 2 + 0.2 ** 2)])

    def test_cylinder(self):
        m, r, hh = 2.0, 0.1, 0.2
        i = shape_inertia(Shape("cylinder", radius=r, half_height=hh), m)
        np.testing.assert_allclose(i[2], 0.5 * m * r * r)
        np.testing.assert_allclose(i[0], m * (3 * r * r + 4 * hh * hh) / 12.0)


class TestDetectContacts:
    def test_sphere_far_from_box(self, model):
        obj = ObjectBody(Shape("box", half_extents=(0.5, 0.5, 0.5)), 1.0)
        obj.pose = Pose(np.array([0.0, 0.0, 0.5]))
        hand = HandState(Pose(np.array([0.0, 0.0, 1.25])), Twist(),
                         np.zeros(model.n_joints), np.zeros(model.n_joints))
        # palm collider r=0.03: center sits 0.2 m beyond the box face
        hand.wrist.position[2] = 1.0 + 0.2 + 0.03
        sim = Simulator(model, SimConfig())
        st = sim.initial_state(obj, hand)
        assert not any(c.body == "object" for c in st.contacts)

    def test_sphere_above_plane_depth(self, model):
        # collider sphere r=0.05 with center 0.03 above the plane: depth 0.02
        from graspsim.hand import HandModel, Link
        links = (Link("ball", -1, Pose(), None, 0.05, np.zeros(3)),)
        m = HandModel(links, np.zeros((0, 2)), (), np.zeros(0), np.zeros(0),
                      np.zeros(0))
        pos = np.array([[0.0, 0.0, 0.03]])
        rot = np.eye(3)[None]
        obj = sphere(z=3.0)
        contacts = detect_contacts(m, pos, rot, obj, 0.0, True, True)
        plane = [c for c in contacts if c.body == "surface" and c.link == 0]
        assert len(plane) == 1
        assert plane[0].depth == pytest.approx(0.02, abs=1e-12)

    def test_sphere_vs_sphere_normal_along_center_line(self, model):
        obj = sphere(radius=0.05, z=0.0)
        sim = Simulator(model, SimConfig())
        hand = far_hand(model)
        # overlap = r_obj + r_palm - center distance, normal on the center line
        palm_r = model.links[0].collider_radius
        dist = 0.05 + palm_r - 0.02
        direction = np.array([1.0, 2.0, 2.0]) / 3.0
        hand.wrist.position = obj.pose.position + dist * direction \
            - model.links[0].collider_center
        st = sim.initial_state(obj, hand)
        hits = [c for c in st.contacts if c.body == "object" and c.link == 0]
        assert len(hits) == 1
        np.testing.assert_allclose(hits[0].normal, direction, atol=1e-12)
        assert hits[0].depth == pytest.approx(0.02, abs=1e-12)

    def test_hand_plane_toggle(self, model):
        obj = sphere(z=3.0)
        cfg = SimConfig(hand_surface_collision=False)
        sim = Simulator(model, cfg)
        hand = HandState(Pose(np.array([0.0, 0.0, -0.2])), Twist(),
                         np.zeros(model.n_joints), np.zeros(model.n_joints))
        st = sim.initial_state(obj, hand)
        assert not any(c.link >= 0 and c.body == "surface" for c in st.contacts)
        sim_on = Simulator(model, SimConfig(hand_surface_collision=True))
        st_on = sim_on.initial_state(obj, hand)
        assert any(c.link >= 0 and c.body == "surface" for c in st_on.contacts)


class TestStep:
    def test_free_fall_within_one_percent(self, model):
        cfg = SimConfig()
        sim = Simulator(model, cfg)
        obj = sphere(z=2.0)
        st = sim.set_surface(sim.initial_state(obj, far_hand(model)), "removed")
        n = int(round(1.0 / cfg.action_dt))
        for _ in range(n):
            st = sim.step(st, idle_action(model))
        t = n * cfg.action_dt
        dz = 2.0 - st.object.pose.position[2]
        assert dz == pytest.approx(0.5 * 9.81 * t * t, rel=0.01)

    def test_resting_penetration_bounded(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(), far_hand(model))
        for _ in range(70):
            st = sim.step(st, idle_action(model))
        depth = 0.04 - st.object.pose.position[2]
        limit = 0.1 * 9.81 / sim_config.k_normal
        assert depth <= limit * (1.0 + 1e-9)
        assert np.linalg.norm(st.object.twist.linear) < 1e-8

    def test_zero_gravity_idle_is_identity(self):
        model = unactuated()
        cfg = SimConfig(gravity=(0.0, 0.0, 0.0))
        sim = Simulator(model, cfg)
        obj = sphere(z=1.0)
        st = sim.set_surface(sim.initial_state(obj, far_hand(model)), "removed")
        before_obj = st.object.pose.as_array()
        before_q = st.hand.q.copy()
        before_wrist = st.hand.wrist.as_array()
        st2 = sim.step(st, Action(np.zeros(model.n_joints), FAR.copy()))
        np.testing.assert_array_equal(st2.object.pose.as_array(), before_obj)
        np.testing.assert_array_equal(st2.hand.q, before_q)
        np.testing.assert_array_equal(st2.hand.wrist.as_array(), before_wrist)
        assert st2.step_count == st.step_count + 1

    def test_determinism_bit_identical(self, model, sim_config):
        sim = Simulator(model, sim_config)
        results = []
        for _ in range(2):
            obj = sphere(z=0.06)
            hand = HandState(Pose(np.array([0.0, 0.0, 0.14])), Twist(),
                             np.full(model.n_joints, 0.3), np.zeros(model.n_joints))
            st = sim.initial_state(obj, hand)
            act = Action(np.full(model.n_joints, 0.9),
                         Pose(np.array([0.0, 0.0, 0.12])))
            for _ in range(40):
                st = sim.step(st, act)
            results.append((st.object.pose.as_array().tobytes(),
                            st.hand.wrist.as_array().tobytes(),
                            st.hand.q.tobytes(), st.hand.qdot.tobytes()))
        assert results[0] == results[1]

    def test_nan_detection(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(), far_hand(model))
        st.object.twist.linear[0] = np.inf
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(SimNanError):
                sim.step(st, idle_action(model))

    def test_joint_limits_respected(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(z=3.0), far_hand(model))
        act = Action(np.full(model.n_joints, 50.0), FAR.copy())
        for _ in range(120):
            st = sim.step(st, act)
        hi = model.joint_limits[:, 1]
        slack = np.abs(st.hand.qdot) * sim_config.dt
        assert (st.hand.q <= hi + slack + 1e-12).all()


class TestSurface:
    def test_removed_starts_free_fall(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(), far_hand(model))
        for _ in range(40):
            st = sim.step(st, idle_action(model))
        z_rest = st.object.pose.position[2]
        st = sim.set_surface(st, "removed")
        for _ in range(20):
            st = sim.step(st, idle_action(model))
        assert st.object.pose.position[2] < z_rest - 0.1

    def test_present_is_idempotent(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(), far_hand(model))
        st2 = sim.set_surface(st, "present")
        assert st2.surface_on and st2.surface_height == sim_config.surface_height

    def test_lowered_drops_contacts(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(), far_hand(model))
        for _ in range(40):
            st = sim.step(st, idle_action(model))
        assert any(c.link == -1 for c in st.contacts)
        st = sim.set_surface(st, "lowered")
        st = sim.step(st, idle_action(model))
        assert not any(c.link == -1 for c in st.contacts)

    def test_unknown_mode(self, model, sim_config):
        sim = Simulator(model, sim_config)
        st = sim.initial_state(sphere(), far_hand(model))
        with pytest.raises(ValueError):
            sim.set_surface(st, "sideways")


class TestEnergyAndFriction:
    def test_no_energy_injection_drop_and_settle(self, sim_config):
        # zero actuation: all PD gains off, object drops 2 cm onto the plane
        model = unactuated()
        sim = Simulator(model, sim_config)
        obj = sphere(z=0.06)
        hand = far_hand(model)
        hand.wrist.position[2] = 0.2  # the hand free-falls onto the plane too
        st = sim.initial_state(obj, hand)
        e_prev = mechanical_energy(sim, st)
        for _ in range(140):
            st = sim.step(st, idle_action(model))
            e = mechanical_energy(sim, st)
            assert e - e_prev <= 1e-4
            e_prev = e

    def test_friction_within_coulomb_cone(self, model, sim_config):
        # slide the object sideways across the plane and check every contact
        sim = Simulator(model, sim_config)
        obj = sphere()
        obj.twist.linear = np.array([0.5, 0.0, 0.0])
        st = sim.initial_state(obj, far_hand(model))
        from graspsim.sim import _manifold_counts
        for _ in range(30):
            st = sim.step(st, idle_action(model))
            axes = sim._joint_axes(st.link_rot)
            iw = sim._world_inertia_inv(st.object)
            n_po, n_ph = _manifold_counts(st.contacts)
            for c in st.contacts:
                f_vec, _ = sim._contact_force(c, st.hand, st.object, st.link_pos,
                                              axes, iw, dict(st.anchors),
                                              sim_config.dt, n_po, n_ph)
                f_n = float(f_vec @ c.normal)
                f_t = np.linalg.norm(f_vec - f_n * c.normal)
                assert f_n >= -1e-12
                assert f_t <= st.object.friction * f_n + 1e-9

    def test_sliding_box_decelerates_and_stops(self, model, sim_config):
        # a flat box cannot trade slip for roll, so friction must stop it
        sim = Simulator(model, sim_config)
        obj = ObjectBody(Shape("box", half_extents=(0.04, 0.04, 0.02)), 0.2)
        obj.pose = Pose(np.array([0.0, 0.0, 0.02]))
        obj.twist.linear = np.array([0.3, 0.0, 0.0])
        st = sim.initial_state(obj, far_hand(model))
        for _ in range(120):
            st = sim.step(st, idle_action(model))
        assert np.linalg.norm(st.object.twist.linear) < 0.02


class TestRestingOtherShapes:
    @pytest.mark.parametrize("shape,z", [
        (Shape("box", half_extents=(0.03, 0.04, 0.05)), 0.05),
        (Shape("cylinder", radius=0.03, half_height=0.05), 0.05),
    ])
    def test_settles_upright(self, model, sim_config, shape, z):
        sim = Simulator(model, sim_config)
        obj = ObjectBody(shape, mass=0.2)
        obj.pose = Pose(np.array([0.0, 0.0, z]))
        st = sim.initial_state(obj, far_hand(model))
        for _ in range(150):
            st = sim.step(st, idle_action(model))
        rest_depth = 0.2 * 9.81 / sim_config.k_normal
        assert st.object.pose.position[2] == pytest.approx(z, abs=rest_depth * 1.01)
        assert np.linalg.norm(st.object.twist.linear) < 1e-6
        up = st.object.pose.rotation_matrix()[:, 2]
        assert up[2] > 0.999
        depth = z - st.object.pose.position[2]
        assert depth <= rest_depth * (1 + 1e-9)


def test_link_forces_sums_object_contacts(model):
    contacts = [
        ContactPoint(2, "object", np.zeros(3), np.array([0, 0, 1.0]), 0.001, 3.0),
        ContactPoint(2, "object", np.zeros(3), np.array([0, 0, 1.0]), 0.001, 2.0),
        ContactPoint(2, "surface", np.zeros(3), np.array([0, 0, 1.0]), 0.001, 9.0),
        ContactPoint(-1, "surface", np.zeros(3), np.array([0, 0, 1.0]), 0.001, 7.0),
    ]
    f = link_forces(model, contacts)
    assert f[2] == 5.0
    assert f.sum() == 5.0
