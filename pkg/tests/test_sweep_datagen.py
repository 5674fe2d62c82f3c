import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from exceptions import ValidationError
from rod_mechanics import WhiskerSpec, build_rest_shape
from scene_geometry import PlacementConfig, ShapeSpec, make_shape, place_object
from sweep_datagen import (DatagenConfig, FilterThresholds, SignalSequence, augment, build_corpus,
                           constant_speed_trajectory, downsample, filter_sequence, run_sweep, sample_trajectory,
                           split, sweep_travel, trim_to_episode)


def make_sequence(moments, contact_pos=None, in_contact=None, rate=5.0, name="synthetic"):
    moments = np.asarray(moments, dtype=float).reshape(-1, 2)
    n = len(moments)
    return SignalSequence(
        times=np.arange(n) / rate,
        moments=moments,
        contact_pos=np.zeros((n, 2)) if contact_pos is None else contact_pos,
        in_contact=np.zeros(n, dtype=bool) if in_contact is None else in_contact,
        base_xy=np.zeros((n, 2)),
        rate=rate,
        object_name=name,
    )


class FixedDraw:
    """Generator stand-in returning a fixed prefix length and zero noise."""

    def __init__(self, k):
        self.k = k

    def integers(self, low, high):
        return self.k

    def normal(self, loc, scale, size):
        return np.zeros(size)


class TestTrajectory:
    def test_sampled_speeds_respect_limits(self):
        config = DatagenConfig()
        for seed in range(10):
            traj = sample_trajectory(np.random.default_rng(seed), config, travel=120.0)
            assert config.speed_min <= traj.initial_speed <= config.speed_max
            assert np.max(np.abs(traj.acceleration_profile)) <= config.accel_max + 1e-12
            assert np.all(traj.speeds() > 0)

    def test_trajectory_covers_travel(self):
        traj = sample_trajectory(np.random.default_rng(4), DatagenConfig(), travel=80.0)
        assert np.linalg.norm(traj.base_positions()[-1]) >= 80.0 - 1e-9

    def test_moves_along_direction(self):
        positions = constant_speed_trajectory(5.0, 10.0).base_positions()
        assert np.all(positions[:, 0] == 0)
        assert np.all(np.diff(positions[:, 1]) < 0)

    def test_duration_follows_profile_and_rate(self):
        traj = sample_trajectory(np.random.default_rng(2), DatagenConfig(), travel=60.0)
        assert traj.duration == pytest.approx((traj.n_steps - 1) / traj.sim_rate)
        assert len(traj.base_positions()) == traj.n_steps

    def test_speed_jitter_range(self):
        traj = constant_speed_trajectory(4.0, 20.0, jitter=(0.8, 1.2), rng=np.random.default_rng(0))
        speeds = traj.speeds()
        assert np.all((speeds >= 3.2) & (speeds <= 4.8))

    def test_rejects_non_positive_speed(self):
        with pytest.raises(ValidationError):
            constant_speed_trajectory(0.0, 10.0)


class TestFilterSequence:
    thresholds = FilterThresholds(moment_max=1.0, jump_max=5.0)

    def test_all_zero_accepted(self):
        assert filter_sequence(make_sequence(np.zeros((10, 2))), self.thresholds).accepted

    def test_torque_spike_rejected(self):
        moments = np.zeros((10, 2))
        moments[4] = [2.0, 0.0]
        verdict = filter_sequence(make_sequence(moments), self.thresholds)
        assert not verdict.accepted
        assert verdict.reason == "torque_threshold"

    def test_contact_jump_rejected(self):
        contact = np.array([[10.0, 0.0], [10.5, 0.0], [18.5, 0.0], [19.0, 0.0]])
        seq = make_sequence(np.full((4, 2), 0.1), contact, np.ones(4, dtype=bool))
        assert filter_sequence(seq, self.thresholds).reason == "contact_jump"

    def test_contact_jump_measured_per_output_step(self):
        # 0.8 mm per 50 Hz step stays under jump_max, 8 mm per 5 Hz step does not
        contact = np.stack([0.8 * np.arange(31), np.zeros(31)], axis=1)
        seq = make_sequence(np.full((31, 2), 0.1), contact, np.ones(31, dtype=bool), rate=50.0)
        assert np.max(np.linalg.norm(np.diff(contact, axis=0), axis=1)) < 5.0
        verdict = filter_sequence(seq, self.thresholds)
        assert not verdict.accepted
        assert verdict.reason == "contact_jump"

    def test_slow_contact_drift_accepted_at_sim_rate(self):
        contact = np.stack([0.3 * np.arange(31), np.zeros(31)], axis=1)
        seq = make_sequence(np.full((31, 2), 0.1), contact, np.ones(31, dtype=bool), rate=50.0)
        assert filter_sequence(seq, self.thresholds).accepted

    def test_jump_into_contact_is_not_a_jump(self):
        contact = np.array([[0.0, 0.0], [40.0, 0.0], [40.5, 0.0]])
        seq = make_sequence(np.full((3, 2), 0.1), contact, np.array([False, True, True]))
        assert filter_sequence(seq, self.thresholds).accepted

    def test_multiple_episodes_rejected(self):
        flags = np.array([False, True, True, False, True, False])
        seq = make_sequence(np.zeros((6, 2)), in_contact=flags)
        assert filter_sequence(seq, self.thresholds).reason == "multiple_episodes"

    def test_empty_sequence(self):
        with pytest.raises(ValidationError):
            filter_sequence(make_sequence(np.zeros((0, 2))), self.thresholds)


class TestDownsample:
    def test_count_and_grid(self):
        out = downsample(make_sequence(np.ones((1000, 2)), rate=100.0))
        assert len(out) == 50
        assert out.rate == 5.0
        assert_allclose(np.diff(out.times), 0.2)
        assert out.times[0] == 0.0

    def test_constant_stream(self):
        out = downsample(make_sequence(np.full((200, 2), 0.7), rate=50.0))
        assert np.all(out.moments == 0.7)

    def test_ramp_values_are_exact_samples(self):
        ramp = np.linspace(0.0, 1.0, 500)
        raw = make_sequence(np.stack([ramp, 2 * ramp], axis=1), rate=50.0)
        out = downsample(raw)
        assert_array_equal(out.moments, raw.moments[::10])
        assert_allclose(out.moments[:, 1], 2 * out.moments[:, 0])

    def test_indivisible_rate(self):
        with pytest.raises(ValidationError):
            downsample(make_sequence(np.zeros((20, 2)), rate=52.0))


class TestAugment:
    def setup_method(self):
        n = 20
        flags = np.ones(n, dtype=bool)
        self.seq = make_sequence(np.full((n, 2), 0.3), np.full((n, 2), 12.0), flags)

    def test_zero_prefix_leaves_sequence(self):
        out = augment(self.seq, FixedDraw(0))
        assert out.n_augmented == 0
        assert_array_equal(out.moments, self.seq.moments)
        assert_array_equal(out.in_contact, self.seq.in_contact)

    def test_prefix_is_no_contact(self):
        out = augment(self.seq, FixedDraw(5))
        assert len(out) == 25
        assert not out.in_contact[:5].any()
        assert_array_equal(out.moments[5:], self.seq.moments)
        assert_array_equal(out.contact_pos[5:], self.seq.contact_pos)

    def test_truncates_earliest_samples(self):
        long = make_sequence(np.arange(600, dtype=float).reshape(300, 2), in_contact=np.ones(300, dtype=bool))
        out = augment(long, FixedDraw(0), max_length=256)
        assert len(out) == 256
        assert_array_equal(out.moments, long.moments[-256:])
        assert_allclose(out.times, np.arange(256) / 5.0)

    def test_random_prefix_within_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            out = augment(self.seq, rng, k_max=10, noise_sigma=0.02)
            assert 0 <= out.n_augmented <= 10
            assert_array_equal(out.moments[out.n_augmented:], self.seq.moments)

    def test_trim_to_episode(self):
        flags = np.array([False, False, True, True, True, False])
        seq = trim_to_episode(make_sequence(np.zeros((6, 2)), in_contact=flags))
        assert len(seq) == 3
        assert seq.in_contact.all()


class TestSplit:
    def sequences(self, n):
        return [make_sequence(np.zeros((3, 2)), name=f"s{i}") for i in range(n)]

    @pytest.mark.parametrize("n,expected", [(100, (80, 20)), (10, (8, 2))])
    def test_ratio(self, n, expected):
        result = split(self.sequences(n), 0.8, seed=1)
        assert (len(result.train), len(result.validation)) == expected

    def test_deterministic_and_disjoint(self):
        seqs = self.sequences(30)
        a, b = split(seqs, seed=9), split(seqs, seed=9)
        assert [s.object_name for s in a.train] == [s.object_name for s in b.train]
        names = {s.object_name for s in a.train}
        assert names.isdisjoint(s.object_name for s in a.validation)

    def test_too_few(self):
        with pytest.raises(ValidationError):
            split(self.sequences(4))


class TestRunSweep:
    spec = WhiskerSpec()
    placement_config = PlacementConfig()

    def sweep(self, obj, standoff, seed=(1,)):
        rest = build_rest_shape(self.spec).node_positions
        placement = place_object(obj, 0.0, standoff, self.placement_config, rest)
        travel = sweep_travel(self.spec, placement.apply(obj), self.placement_config.sweep_direction, 15.0)
        trajectory = constant_speed_trajectory(10.0, travel, 50.0, self.placement_config.sweep_direction)
        return run_sweep(self.spec, obj, placement, trajectory, seed)

    def test_out_of_reach(self):
        outcome = self.sweep(make_shape("circle", {"radius": 10}), standoff=80.0)
        assert outcome.ok
        assert not outcome.sequence.in_contact.any()
        assert np.all(outcome.sequence.moments == 0)

    def test_circle_gives_single_episode(self):
        outcome = self.sweep(make_shape("circle", {"radius": 25}, n_vertices=32), standoff=20.0)
        seq = outcome.sequence
        assert len(seq.episodes()) == 1
        assert seq.in_contact.sum() > 5
        assert np.mean(seq.moments[seq.in_contact][:, 0]) > 0
        assert np.all(seq.moments[~seq.in_contact] == 0)

    def test_deterministic(self):
        obj = make_shape("rectangle", {"width": 30, "height": 20})
        a, b = self.sweep(obj, 25.0, (3, 4)), self.sweep(obj, 25.0, (3, 4))
        assert_array_equal(a.sequence.moments, b.sequence.moments)
        assert_array_equal(a.sequence.contact_pos, b.sequence.contact_pos)
        assert a.sequence.seed == (3, 4)


class TestBuildCorpus:
    def test_requires_shapes(self):
        with pytest.raises(ValidationError):
            build_corpus(WhiskerSpec(), [], DatagenConfig(), PlacementConfig(), 1, 2, moment_max=10.0)

    @pytest.mark.slow
    def test_reproducible_single_episode_corpus(self):
        shapes = [ShapeSpec("circle", {"radius": 15}, n_vertices=32, name="c")]
        config = DatagenConfig(sweeps_per_object=3)
        a = build_corpus(WhiskerSpec(), shapes, config, PlacementConfig(), 5, 6, moment_max=1e6)
        b = build_corpus(WhiskerSpec(), shapes, config, PlacementConfig(), 5, 6, moment_max=1e6)
        assert a.attempted == 3
        assert len(a.sequences) + sum(a.rejects.values()) == 3
        for x, y in zip(a.sequences, b.sequences):
            assert_array_equal(x.moments, y.moments)
            assert len(x.episodes()) == 1
            assert len(x) <= config.max_length
