import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from exceptions import SolverDivergenceError, ValidationError
from rod_mechanics import (PointLoad, SurfaceConstraint, WhiskerSpec, build_rest_shape, find_proximal_contact,
                           joint_kinematics, lever_moments, resolve_contact, solve_equilibrium, spring_moments)
from scene_geometry import PolyObject, Pose2D, distances_to_boundary, make_shape


def push_constraint(spec, s, displacement, bilateral=False):
    """Hold the rod point at arc length s displaced along its rest left normal."""
    nodes, psi = joint_kinematics(spec, np.zeros(spec.n_segments))
    i = min(int(s // spec.segment_length), spec.n_segments - 1)
    p = nodes[i] + (s - i * spec.segment_length) * np.array([math.cos(psi[i]), math.sin(psi[i])])
    left = np.array([-math.sin(psi[i]), math.cos(psi[i])])
    return SurfaceConstraint(s, tuple(p + displacement * left), tuple(left), bilateral)


class TestRestShape:
    def test_straight_rod_tip(self, straight_spec):
        state = build_rest_shape(straight_spec)
        assert len(state.node_positions) == 31
        assert_allclose(state.node_positions[-1], [60.0, 0.0], atol=1e-12)

    def test_uniform_spacing(self, straight_spec):
        nodes = build_rest_shape(straight_spec).node_positions
        assert_allclose(np.linalg.norm(np.diff(nodes, axis=0), axis=1), 2.0, rtol=1e-12)

    def test_distal_curvature(self, whisker_spec):
        bends = whisker_spec.rest_bends()
        curvature = bends[-1] / whisker_spec.segment_length
        assert curvature == pytest.approx(1 / 20.0, rel=0.02)
        assert bends[1] == 0.0

    def test_rest_state_has_no_moment(self, whisker_spec):
        state = build_rest_shape(whisker_spec)
        assert np.all(state.joint_angles == 0)
        assert np.all(state.base_moment == 0)
        assert not state.in_contact
        assert np.array_equal(state.node_positions[0], [0.0, 0.0])

    @pytest.mark.parametrize("changes", [{"total_length": 0.0}, {"n_segments": 4}, {"distal_arc_length": 80.0}])
    def test_invalid_spec(self, changes):
        with pytest.raises(ValidationError):
            build_rest_shape(WhiskerSpec(**changes))


class TestSolveEquilibrium:
    def test_no_constraint_is_rest(self, whisker_spec):
        state = solve_equilibrium(whisker_spec, Pose2D())
        assert_allclose(state.node_positions, build_rest_shape(whisker_spec).node_positions)
        assert np.all(state.base_moment == 0)

    def test_cantilever_oracle(self, straight_spec):
        state = solve_equilibrium(straight_spec, Pose2D(), PointLoad(40.0, (0.0, 0.001)))
        assert state.base_moment[0] == pytest.approx(0.040, rel=0.01)
        assert state.base_moment[1] == pytest.approx(straight_spec.gauge_offset * 0.001)

    def test_cantilever_randomized(self, straight_spec):
        rng = np.random.default_rng(12)
        for force, d in zip(rng.uniform(1e-4, 5e-4, 20), rng.uniform(10.0, 60.0, 20)):
            state = solve_equilibrium(straight_spec, Pose2D(), PointLoad(float(d), (0.0, float(force))))
            assert state.base_moment[0] == pytest.approx(force * d, rel=0.01)

    def test_mirrored_obstacle_negates_moment(self, straight_spec):
        up = solve_equilibrium(straight_spec, Pose2D(), SurfaceConstraint(40.0, (40.0, 1.5), (0.0, 1.0)))
        down = solve_equilibrium(straight_spec, Pose2D(), SurfaceConstraint(40.0, (40.0, -1.5), (0.0, -1.0)))
        assert up.base_moment[0] > 0
        assert_allclose(down.base_moment, -up.base_moment, atol=1e-12)

    def test_moment_balance(self, whisker_spec):
        state = solve_equilibrium(whisker_spec, Pose2D(), push_constraint(whisker_spec, 45.0, 3.0))
        assert state.in_contact
        assert np.max(np.abs(spring_moments(whisker_spec, state) - lever_moments(whisker_spec, state))) < 1e-6

    def test_merit_non_increasing(self, whisker_spec):
        state = solve_equilibrium(whisker_spec, Pose2D(), push_constraint(whisker_spec, 50.0, 6.0))
        history = np.asarray(state.residual_history)
        assert len(history) > 1
        assert np.all(np.diff(history) <= 0)

    def test_frame_equivariance(self, whisker_spec):
        constraint = push_constraint(whisker_spec, 42.0, 2.0)
        pose = Pose2D(12.0, -7.0, 0.9)
        moved = SurfaceConstraint(constraint.arc_length, tuple(pose.apply(constraint.surface_point)),
                                  tuple(pose.apply_vector(constraint.normal)))
        local = solve_equilibrium(whisker_spec, Pose2D(), constraint)
        world = solve_equilibrium(whisker_spec, pose, moved)
        assert_allclose(world.base_moment, local.base_moment, rtol=1e-7, atol=1e-9)
        assert_allclose(world.node_positions, local.node_positions, atol=1e-8)

    def test_pulling_contact_releases(self, whisker_spec):
        c = push_constraint(whisker_spec, 45.0, 2.0)
        pulling = SurfaceConstraint(c.arc_length, c.surface_point, tuple(-np.asarray(c.normal)))
        state = solve_equilibrium(whisker_spec, Pose2D(), pulling)
        assert not state.in_contact
        assert np.all(state.base_moment == 0)

    def test_bilateral_constraint_can_pull(self, whisker_spec):
        c = push_constraint(whisker_spec, 45.0, 2.0)
        pulling = SurfaceConstraint(c.arc_length, c.surface_point, tuple(-np.asarray(c.normal)), bilateral=True)
        state = solve_equilibrium(whisker_spec, Pose2D(), pulling)
        assert state.in_contact

    def test_divergence_carries_diagnostics(self, whisker_spec):
        with pytest.raises(SolverDivergenceError) as info:
            solve_equilibrium(whisker_spec, Pose2D(), push_constraint(whisker_spec, 45.0, 2.0), max_iterations=0)
        assert info.value.iterations == 0
        assert info.value.residual_norm > 0

    def test_constraint_outside_rod(self, whisker_spec):
        with pytest.raises(ValidationError):
            solve_equilibrium(whisker_spec, Pose2D(), PointLoad(70.0, (0.0, 1.0)))


class TestFindProximalContact:
    def test_disjoint(self, straight_spec):
        state = build_rest_shape(straight_spec)
        far = make_shape("circle", {"radius": 5}).transformed(Pose2D(30.0, 40.0))
        assert find_proximal_contact(state, far) is None

    def test_two_crossings_returns_proximal(self, straight_spec):
        state = build_rest_shape(straight_spec)
        circle = make_shape("circle", {"radius": 10}).transformed(Pose2D(31.0, 0.5))
        contact = find_proximal_contact(state, circle)
        assert contact.arc_length == pytest.approx(31.0 - math.sqrt(100 - 0.25), abs=0.05)
        assert contact.normal[0] < 0

    def test_tip_on_boundary(self, straight_spec):
        state = build_rest_shape(straight_spec)
        block = PolyObject([[60.0, -5.0], [70.0, -5.0], [70.0, 5.0], [60.0, 5.0]])
        contact = find_proximal_contact(state, block)
        assert contact.arc_length == 60.0
        assert_allclose(contact.normal, [-1.0, 0.0], atol=1e-12)

    def test_uses_base_pose(self, straight_spec):
        pose = Pose2D(0.0, 10.0, 0.0)
        state = build_rest_shape(straight_spec, pose)
        block = PolyObject([[20.0, 5.0], [30.0, 5.0], [30.0, 15.0], [20.0, 15.0]])
        assert find_proximal_contact(state, block).arc_length == pytest.approx(20.0)


class TestResolveContact:
    def test_clear_object_gives_rest(self, whisker_spec):
        far = make_shape("circle", {"radius": 5}).transformed(Pose2D(0.0, -40.0))
        state = resolve_contact(whisker_spec, Pose2D(), far)
        assert not state.in_contact

    def test_pushes_rod_out_of_circle(self, whisker_spec):
        circle = make_shape("circle", {"radius": 10}).transformed(Pose2D(39.6, -6.5))
        state = resolve_contact(whisker_spec, Pose2D(), circle)
        assert state.in_contact
        inside = circle.contains(state.node_positions)
        assert np.all(distances_to_boundary(state.node_positions[inside], circle) <= 0.05)
        assert state.base_moment[0] > 0
        assert state.base_moment[1] > 0

    def test_rigid_motion_equivariance(self, whisker_spec):
        circle = make_shape("circle", {"radius": 10}).transformed(Pose2D(39.6, -6.5))
        pose = Pose2D(-20.0, 35.0, 1.3)
        local = resolve_contact(whisker_spec, Pose2D(), circle)
        world = resolve_contact(whisker_spec, pose, circle.transformed(pose))
        assert world.base_pose == pose
        assert_allclose(world.base_moment, local.base_moment, rtol=1e-6, atol=1e-9)
