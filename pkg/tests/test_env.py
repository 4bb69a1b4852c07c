"""World geometry: shapes, kinematics, grasp construction, IK, predicate."""

import numpy as np
import pytest

from fabricgrasp.core import InvalidArgumentError, NoGraspError, NoIKError
from fabricgrasp.env import (
    ArmModel,
    GRIP_INTERFERENCE,
    SceneObject,
    Shape,
    aabb,
    above_region,
    arm_collision_points,
    boundary_points,
    extent,
    fingertip_positions,
    forward_kinematics,
    grasp_menu,
    grasp_success,
    grasp_target,
    ik_solve,
    jacobian,
    position_fk,
    sample_above_region,
    signed_distance,
    unit,
)

ARM = ArmModel()


def random_object(rng):
    shape = [Shape.CIRCLE, Shape.BOX, Shape.CAPSULE][int(rng.integers(0, 3))]
    if shape == Shape.CIRCLE:
        size = (float(rng.uniform(0.03, 0.05)),)
    elif shape == Shape.BOX:
        size = (float(rng.uniform(0.04, 0.10)), float(rng.uniform(0.04, 0.09)))
    else:
        size = (float(rng.uniform(0.08, 0.14)), float(rng.uniform(0.02, 0.04)))
    pose = np.array([rng.uniform(0.35, 0.7), rng.uniform(-0.2, 0.2),
                     rng.uniform(-np.pi, np.pi)])
    return SceneObject(shape, size, pose)


class FixedRng:
    """Minimal generator stub returning preset uniform draws."""

    def __init__(self, values):
        self.values = list(values)

    def random(self, n):
        return np.array(self.values[:n])


class TestShapes:
    def test_boundary_points_on_boundary(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            obj = random_object(rng)
            d = signed_distance(obj, boundary_points(obj))
            assert np.max(np.abs(d)) <= 1e-9

    def test_boundary_respects_support(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            obj = random_object(rng)
            pts = boundary_points(obj, 256) - obj.centroid
            for _ in range(10):
                d = unit(rng.uniform(0, 2 * np.pi))
                proj = float(np.max(pts @ d))
                ext = extent(obj, d)
                assert proj <= ext + 1e-9
                assert proj >= ext - 0.02

    def test_signed_distance_against_dense_boundary(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            obj = random_object(rng)
            dense = boundary_points(obj, 4096)
            for _ in range(10):
                p = obj.centroid + rng.uniform(-0.3, 0.3, size=2)
                sd = float(signed_distance(obj, p[None, :])[0])
                brute = float(np.min(np.linalg.norm(dense - p, axis=1)))
                assert abs(abs(sd) - brute) <= 2e-3

    def test_circle_signed_distance_exact(self):
        obj = SceneObject(Shape.CIRCLE, (0.05,), np.array([0.5, 0.1, 0.3]))
        d = signed_distance(obj, np.array([[0.6, 0.1], [0.5, 0.1]]))
        np.testing.assert_allclose(d, [0.05, -0.05], atol=1e-12)

    def test_object_must_fit_table(self):
        with pytest.raises(InvalidArgumentError):
            SceneObject(Shape.CIRCLE, (0.05,), np.array([0.21, 0.0, 0.0]))

    def test_size_validation(self):
        with pytest.raises(InvalidArgumentError):
            SceneObject(Shape.BOX, (0.05,), np.array([0.5, 0.0, 0.0]))
        with pytest.raises(InvalidArgumentError):
            SceneObject(Shape.CIRCLE, (-0.01,), np.array([0.5, 0.0, 0.0]))


class TestKinematics:
    def test_straight_arm(self):
        ee, pts = forward_kinematics(ARM, np.zeros(6))
        np.testing.assert_allclose(ee, [ARM.reach, 0.0, 0.0], atol=1e-15)
        assert pts.shape == (5, 2)

    def test_rotated_base(self):
        q = np.zeros(6)
        q[0] = np.pi / 2.0
        ee, _ = forward_kinematics(ARM, q)
        np.testing.assert_allclose(ee, [0.0, ARM.reach, np.pi / 2.0],
                                   atol=1e-12)

    def test_single_joint_textbook_column(self):
        arm = ArmModel(link_lengths=np.array([0.4]),
                       home_q=np.zeros(3))
        jac = jacobian(arm, np.zeros(3))
        np.testing.assert_allclose(jac[:, 0], [0.0, 0.4, 1.0], atol=1e-15)
        np.testing.assert_array_equal(jac[:, 1:], np.zeros((3, 2)))

    def test_jacobian_finite_difference(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        for _ in range(1000):
            q = rng.uniform(-np.pi, np.pi, size=6)
            jac = jacobian(ARM, q)
            fd = np.zeros((3, 6))
            for j in range(6):
                e = np.zeros(6)
                e[j] = h
                hi, _ = forward_kinematics(ARM, q + e)
                lo, _ = forward_kinematics(ARM, q - e)
                fd[:, j] = (hi - lo) / (2.0 * h)
            err = np.max(np.abs(jac - fd))
            assert err <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_position_fk_matches(self):
        rng = np.random.default_rng(8)
        q = rng.uniform(-1, 1, size=6)
        pos, jac2 = position_fk(ARM, q)
        ee, _ = forward_kinematics(ARM, q)
        np.testing.assert_allclose(pos, ee[:2], atol=1e-15)
        np.testing.assert_allclose(jac2, jacobian(ARM, q)[:2], atol=1e-15)

    def test_gripper_does_not_move_ee(self):
        q = np.array([0.3, -0.2, 0.5, 0.1, 0.2, 0.9])
        q2 = q.copy()
        q2[4:] = [1.0, 0.1]
        ee1, _ = forward_kinematics(ARM, q)
        ee2, _ = forward_kinematics(ARM, q2)
        np.testing.assert_array_equal(ee1, ee2)

    def test_collision_points_exclude_fingers(self):
        pts = arm_collision_points(ARM, np.zeros(6), samples_per_link=4)
        assert pts.shape == (16, 2)
        assert np.max(pts[:, 0]) <= ARM.reach + 1e-12


class TestGraspConstruction:
    def test_circle_grasp_geometry(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        spec = grasp_target(obj, ARM)
        # Wrist on the approach ray, heading at the centroid.
        np.testing.assert_allclose(spec.ee_pose[:2], [0.57, 0.0], atol=1e-12)
        assert spec.ee_pose[2] == pytest.approx(np.pi, abs=1e-12)
        # Fingertip separation hits the object width minus interference.
        sep = 2.0 * ARM.finger_length * np.sin(spec.closures[0])
        assert sep == pytest.approx(0.08 - GRIP_INTERFERENCE, abs=1e-12)

    def test_unreachable_object(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.85, 0.3, 0.0]))
        with pytest.raises(NoGraspError):
            grasp_target(obj, ARM)

    def test_too_wide_object(self):
        obj = SceneObject(Shape.CAPSULE, (0.14, 0.03),
                          np.array([0.5, 0.0, 0.0]))
        with pytest.raises(NoGraspError):
            grasp_target(obj, ARM, obj.pose[2] + np.pi / 2.0)

    def test_rotation_equivariance(self):
        base = SceneObject(Shape.BOX, (0.08, 0.05), np.array([0.5, 0.1, 0.2]))
        spec0 = grasp_target(base, ARM)
        dth = 0.7
        rot = SceneObject(Shape.BOX, (0.08, 0.05),
                          np.array([0.5, 0.1, 0.2 + dth]))
        spec1 = grasp_target(rot, ARM)
        c, s = np.cos(dth), np.sin(dth)
        rel = spec0.ee_pose[:2] - base.centroid
        want = base.centroid + np.array([c * rel[0] - s * rel[1],
                                         s * rel[0] + c * rel[1]])
        np.testing.assert_allclose(spec1.ee_pose[:2], want, atol=1e-12)
        assert np.cos(spec1.ee_pose[2] - spec0.ee_pose[2]) == \
            pytest.approx(np.cos(dth), abs=1e-12)
        np.testing.assert_allclose(spec1.closures, spec0.closures, atol=1e-12)

    def test_menu_filters_infeasible(self):
        obj = SceneObject(Shape.CAPSULE, (0.12, 0.03),
                          np.array([0.5, 0.0, 0.0]))
        menu = grasp_menu(obj, ARM)
        assert 1 <= len(menu) < 7
        circle = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.45, 0.0, 0.0]))
        assert len(grasp_menu(circle, ARM)) == 7


class TestAboveRegion:
    def test_degenerate_rng_hits_corner(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        pose = sample_above_region(obj, FixedRng([0.0, 0.0]))
        x_lo, _, y_lo, _ = above_region(obj)
        np.testing.assert_allclose(pose[:2], [x_lo, y_lo], atol=1e-15)

    def test_membership_sweep(self):
        obj = SceneObject(Shape.BOX, (0.08, 0.05), np.array([0.5, 0.1, 0.4]))
        x_lo, x_hi, y_lo, y_hi = above_region(obj)
        _, _, _, box_top = aabb(obj)
        rng = np.random.default_rng(12)
        for _ in range(10000):
            pose = sample_above_region(obj, rng)
            assert x_lo <= pose[0] <= x_hi
            assert y_lo <= pose[1] <= y_hi
            assert pose[1] >= box_top + 0.15

    def test_region_translates_with_object(self):
        a = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.45, 0.0, 0.3]))
        b = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.55, 0.1, 0.3]))
        ra, rb = np.array(above_region(a)), np.array(above_region(b))
        np.testing.assert_allclose(rb - ra, [0.1, 0.1, 0.1, 0.1], atol=1e-12)


class TestIk:
    def test_fixed_point(self):
        q0 = np.array([0.8, -0.5, 0.3, 0.2, 1.0, 1.0])
        target, _ = forward_kinematics(ARM, q0)
        q = ik_solve(ARM, target, q0)
        assert np.max(np.abs(q - q0)) <= 1e-6

    def test_round_trip_random_targets(self):
        rng = np.random.default_rng(13)
        solved = 0
        for _ in range(1000):
            q_true = np.concatenate([rng.uniform(-2.0, 2.0, size=4), [1.0, 1.0]])
            target, _ = forward_kinematics(ARM, q_true)
            if np.linalg.norm(target[:2]) < 0.1:
                continue
            q_init = q_true.copy()
            q_init[:4] += rng.uniform(-0.3, 0.3, size=4)
            q = ik_solve(ARM, target, q_init)
            ee, _ = forward_kinematics(ARM, q)
            assert np.linalg.norm(ee[:2] - target[:2]) <= 1e-4
            assert abs((ee[2] - target[2] + np.pi) % (2 * np.pi) - np.pi) <= 1e-3
            solved += 1
        assert solved >= 900

    def test_out_of_reach(self):
        with pytest.raises(NoIKError):
            ik_solve(ARM, np.array([1.5, 0.0, 0.0]), ARM.home_q)

    def test_gripper_passthrough(self):
        q0 = np.array([0.8, -0.5, 0.3, 0.2, 0.7, 0.4])
        target, _ = forward_kinematics(ARM, q0)
        q = ik_solve(ARM, target, q0)
        np.testing.assert_array_equal(q[4:], [0.7, 0.4])


class TestGraspSuccess:
    def make_grasp_config(self, obj):
        spec = grasp_target(obj, ARM)
        q_init = ARM.home_q.copy()
        q = ik_solve(ARM, spec.ee_pose, q_init)
        q[4:] = spec.closures
        return q, spec

    def test_exact_grasp_succeeds(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        q, _ = self.make_grasp_config(obj)
        assert grasp_success(ARM, q, obj)

    def test_far_ee_fails(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        q, _ = self.make_grasp_config(obj)
        q_far = q.copy()
        q_far[0] += 0.3
        assert not grasp_success(ARM, q_far, obj)

    def test_wrong_closure_fails(self):
        obj = SceneObject(Shape.BOX, (0.08, 0.05), np.array([0.5, 0.0, 0.0]))
        q, _ = self.make_grasp_config(obj)
        q_bad = q.copy()
        q_bad[4:] += 0.2
        assert not grasp_success(ARM, q_bad, obj)

    def test_thresholds_inclusive(self):
        # A 1-link arm at q=0 has the float-exact pose (0.5, 0, 0), so menu
        # overrides can place the error exactly on each threshold.
        from fabricgrasp.env import GraspSpec

        arm1 = ArmModel(link_lengths=np.array([0.5]), home_q=np.zeros(3))
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        q = np.array([0.0, 0.0, 0.05])

        at_pos = GraspSpec(np.array([0.5, 0.01, 0.0]), np.array([0.0, 0.05]))
        assert grasp_success(arm1, q, obj, menu=[at_pos])
        over_pos = GraspSpec(np.array([0.5, np.nextafter(0.01, 1.0), 0.0]),
                             np.array([0.0, 0.05]))
        assert not grasp_success(arm1, q, obj, menu=[over_pos])

        at_ori = GraspSpec(np.array([0.5, 0.0, 0.1]), np.array([0.0, 0.05]))
        assert grasp_success(arm1, q, obj, menu=[at_ori])
        over_ori = GraspSpec(np.array([0.5, 0.0, np.nextafter(0.1, 1.0)]),
                             np.array([0.0, 0.05]))
        assert not grasp_success(arm1, q, obj, menu=[over_ori])

        at_closure = GraspSpec(np.array([0.5, 0.0, 0.0]), np.array([0.05, 0.0]))
        assert grasp_success(arm1, q, obj, menu=[at_closure])
        over_closure = GraspSpec(np.array([0.5, 0.0, 0.0]),
                                 np.array([np.nextafter(0.05, 1.0), 0.0]))
        assert not grasp_success(arm1, q, obj, menu=[over_closure])

    def test_any_menu_variant_accepted(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        menu = grasp_menu(obj, ARM)
        for spec in menu[:3]:
            try:
                q = ik_solve(ARM, spec.ee_pose, ARM.home_q)
            except NoIKError:
                continue
            q[4:] = spec.closures
            assert grasp_success(ARM, q, obj)

    def test_fingertips_straddle_object(self):
        obj = SceneObject(Shape.CIRCLE, (0.04,), np.array([0.5, 0.0, 0.0]))
        q, spec = self.make_grasp_config(obj)
        tips = fingertip_positions(ARM, q)
        # Tips sit just inside the object surface (grip interference).
        d = signed_distance(obj, tips)
        assert np.all(d < 0.01)
        assert np.linalg.norm(tips[0] - tips[1]) == pytest.approx(
            0.08 - GRIP_INTERFERENCE, abs=1e-3)
