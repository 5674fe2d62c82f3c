"""
Randomized whisker sweeps and the dataset rules applied to their signal streams.
"""
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import PlacementError, SolverDivergenceError, ValidationError
from rod_mechanics import WhiskerSpec, build_rest_shape, resolve_contact
from scene_geometry import PlacementConfig, PolyObject, Pose2D, ScenePlacement, ShapeSpec, random_placement, sweep_axes

logger = logging.getLogger(__name__)

OUTPUT_RATE = 5.0
REJECT_REASONS = ("torque_threshold", "contact_jump", "multiple_episodes", "solver_failure", "placement", "no_contact")


@dataclass(frozen=True)
class DatagenConfig:
    """Sweep randomization and dataset thresholds."""

    speed_min: float = 3.0
    speed_max: float = 7.0
    accel_max: float = 0.4
    accel_period: float = 1.0
    speed_floor: float = 0.5
    sim_rate: float = 50.0
    output_rate: float = OUTPUT_RATE
    exit_gap: float = 15.0
    moment_max: Optional[float] = None
    moment_max_factor: float = 5.0
    jump_max: float = 5.0
    max_length: int = 256
    k_max: int = 10
    noise_moment_sigma: float = 0.02
    sweeps_per_object: int = 50
    train_ratio: float = 0.8

    def validate(self) -> None:
        if not 0 < self.speed_min <= self.speed_max:
            raise ValidationError(f"Invalid speed range [{self.speed_min}, {self.speed_max}]")
        if self.accel_max < 0 or self.accel_period <= 0 or self.speed_floor <= 0:
            raise ValidationError("accel_max must be >= 0, accel_period and speed_floor > 0")
        if self.sim_rate < 50:
            raise ValidationError(f"sim_rate must be at least 50 Hz, got {self.sim_rate}")
        if self.jump_max <= 0 or self.max_length < 1 or self.k_max < 0:
            raise ValidationError("jump_max, max_length and k_max must be positive")
        if self.sweeps_per_object < 1 or not 0 < self.train_ratio < 1:
            raise ValidationError("sweeps_per_object must be >= 1 and train_ratio in (0, 1)")


@dataclass(frozen=True)
class SweepTrajectory:
    """Straight base motion with a per-step speed profile."""

    initial_speed: float
    acceleration_profile: Tuple[float, ...]
    sim_rate: float = 50.0
    direction: Tuple[float, float] = (0.0, -1.0)
    speed_scale: Tuple[float, ...] = ()

    @property
    def n_steps(self) -> int:
        return len(self.acceleration_profile) + 1

    @property
    def duration(self) -> float:
        """Sweep length in seconds, derived from the profile length and `sim_rate` rather than stored."""
        return (self.n_steps - 1) / self.sim_rate

    def speeds(self, floor: float = 1e-3) -> np.ndarray:
        """Commanded speed at every step (mm/s), kept strictly positive."""
        dt = 1.0 / self.sim_rate
        v = np.empty(self.n_steps)
        v[0] = self.initial_speed
        for k, a in enumerate(self.acceleration_profile):
            v[k + 1] = max(v[k] + a * dt, floor)
        if self.speed_scale:
            v = v * np.asarray(self.speed_scale)
        return v

    def base_positions(self) -> np.ndarray:
        """Base xy at every step, starting from the origin."""
        u, _ = sweep_axes(self.direction)
        travelled = np.concatenate([[0.0], np.cumsum(self.speeds()[:-1] / self.sim_rate)])
        return travelled[:, None] * u[None, :]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "initial_speed": self.initial_speed,
            "acceleration_profile": list(self.acceleration_profile),
            "sim_rate": self.sim_rate,
            "direction": list(self.direction),
            "speed_scale": list(self.speed_scale),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepTrajectory":
        return cls(
            float(data["initial_speed"]),
            tuple(float(a) for a in data["acceleration_profile"]),
            float(data["sim_rate"]),
            tuple(float(d) for d in data["direction"]),
            tuple(float(s) for s in data.get("speed_scale", ())),
        )


def sample_trajectory(rng: np.random.Generator, config: DatagenConfig, travel: float,
                      direction: Tuple[float, float] = (0.0, -1.0)) -> SweepTrajectory:
    """
    Random start speed and a piecewise-constant acceleration redrawn every
    `accel_period` seconds, long enough to cover `travel` millimetres.
    """
    dt = 1.0 / config.sim_rate
    hold = max(int(round(config.accel_period * config.sim_rate)), 1)
    v = float(rng.uniform(config.speed_min, config.speed_max))
    v0, distance, accels = v, 0.0, []
    a = 0.0
    while distance < travel:
        if len(accels) % hold == 0:
            a = float(rng.uniform(-config.accel_max, config.accel_max))
        distance += v * dt
        step = max(v + a * dt, config.speed_floor) - v
        # store the clamped acceleration so speeds() replays the same motion
        accels.append(step / dt)
        v += step
    return SweepTrajectory(v0, tuple(accels), config.sim_rate, direction)


def constant_speed_trajectory(speed: float, travel: float, sim_rate: float = 50.0,
                              direction: Tuple[float, float] = (0.0, -1.0),
                              jitter: Optional[Tuple[float, float]] = None,
                              rng: Optional[np.random.Generator] = None) -> SweepTrajectory:
    """Fixed nominal speed, optionally scaled per step by a uniform factor in `jitter`."""
    if speed <= 0:
        raise ValidationError(f"Sweep speed must be positive, got {speed}")
    n = int(math.ceil(travel * sim_rate / (speed * (jitter[0] if jitter else 1.0)))) + 1
    scale: Tuple[float, ...] = ()
    if jitter is not None:
        rng = rng or np.random.default_rng(0)
        scale = tuple(float(s) for s in rng.uniform(jitter[0], jitter[1], size=n))
    return SweepTrajectory(float(speed), (0.0,) * (n - 1), sim_rate, direction, scale)


@dataclass(frozen=True)
class ContactSample:
    t: float
    moment: Tuple[float, float]
    contact_pos: Tuple[float, float]
    in_contact: bool
    base_xy: Tuple[float, float]


@dataclass(frozen=True, eq=False)
class SignalSequence:
    """
    Time series of base moments and contact labels for one sweep.

    Arrays are aligned by step; `contact_pos` is (0, 0) wherever
    `in_contact` is false and those steps are excluded from the loss.
    """

    times: np.ndarray
    moments: np.ndarray
    contact_pos: np.ndarray
    in_contact: np.ndarray
    base_xy: np.ndarray
    rate: float
    object_name: str = "object"
    placement: Optional[ScenePlacement] = None
    trajectory: Optional[SweepTrajectory] = None
    seed: Tuple[int, ...] = ()
    n_augmented: int = 0

    def __post_init__(self):
        n = len(self.times)
        for name in ("moments", "contact_pos", "base_xy"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(n, 2)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "in_contact", np.asarray(self.in_contact, dtype=bool).reshape(n))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def samples(self) -> List[ContactSample]:
        return [
            ContactSample(float(t), tuple(m), tuple(c), bool(f), tuple(b))
            for t, m, c, f, b in zip(self.times, self.moments.tolist(), self.contact_pos.tolist(),
                                     self.in_contact, self.base_xy.tolist())
        ]

    def select(self, index: Any, **changes: Any) -> "SignalSequence":
        return replace(
            self,
            times=self.times[index],
            moments=self.moments[index],
            contact_pos=self.contact_pos[index],
            in_contact=self.in_contact[index],
            base_xy=self.base_xy[index],
            **changes,
        )

    def episodes(self) -> List[Tuple[int, int]]:
        """Maximal contact runs as [start, stop) step ranges."""
        flags = np.concatenate([[False], self.in_contact, [False]]).astype(np.int8)
        edges = np.diff(flags)
        return list(zip(np.nonzero(edges == 1)[0].tolist(), np.nonzero(edges == -1)[0].tolist()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "object_name": self.object_name,
            "rate": self.rate,
            "seed": list(self.seed),
            "n_augmented": self.n_augmented,
            "placement": self.placement.to_dict() if self.placement else None,
            "trajectory": self.trajectory.to_dict() if self.trajectory else None,
            "times": self.times.tolist(),
            "moments": self.moments.tolist(),
            "contact_pos": self.contact_pos.tolist(),
            "in_contact": self.in_contact.astype(int).tolist(),
            "base_xy": self.base_xy.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SignalSequence":
        return cls(
            times=np.asarray(data["times"], dtype=float),
            moments=np.asarray(data["moments"], dtype=float),
            contact_pos=np.asarray(data["contact_pos"], dtype=float),
            in_contact=np.asarray(data["in_contact"], dtype=bool),
            base_xy=np.asarray(data["base_xy"], dtype=float),
            rate=float(data["rate"]),
            object_name=str(data["object_name"]),
            placement=ScenePlacement.from_dict(data["placement"]) if data.get("placement") else None,
            trajectory=SweepTrajectory.from_dict(data["trajectory"]) if data.get("trajectory") else None,
            seed=tuple(int(s) for s in data.get("seed", ())),
            n_augmented=int(data.get("n_augmented", 0)),
        )


@dataclass(frozen=True)
class SweepOutcome:
    sequence: Optional[SignalSequence]
    reason: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.sequence is not None


@dataclass(frozen=True)
class FilterThresholds:
    moment_max: float
    jump_max: float = 5.0
    jump_rate: float = OUTPUT_RATE


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: Optional[str] = None


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[SignalSequence, ...]
    validation: Tuple[SignalSequence, ...]


def sweep_travel(spec: WhiskerSpec, world_obj: PolyObject, direction: Sequence[float], exit_gap: float) -> float:
    """Base travel until the object has passed behind the whole rest shape."""
    u, _ = sweep_axes(direction)
    rest = build_rest_shape(spec).node_positions
    return float(np.max(world_obj.vertices @ u) - np.min(rest @ u) + exit_gap)


def run_sweep(spec: WhiskerSpec, obj: PolyObject, placement: ScenePlacement, trajectory: SweepTrajectory,
              seed: Sequence[int] = ()) -> SweepOutcome:
    """
    Drag the whisker past a placed object and record the raw stream.

    Args:
        spec: Whisker geometry.
        obj: Object in its own frame.
        placement: Where the object sits in the world.
        trajectory: Base motion at `trajectory.sim_rate`.
        seed: Seed entropy stored with the sequence.

    Returns:
        SweepOutcome with the raw sequence, or reason `solver_failure`.
    """
    world = placement.apply(obj)
    positions = trajectory.base_positions()
    n = len(positions)
    moments = np.zeros((n, 2))
    contacts = np.zeros((n, 2))
    flags = np.zeros(n, dtype=bool)
    reach = spec.total_length
    lo, hi = world.vertices.min(axis=0), world.vertices.max(axis=0)

    previous = None
    for k, xy in enumerate(positions):
        gap = np.maximum(np.maximum(lo - xy, xy - hi), 0.0)
        if float(np.linalg.norm(gap)) > reach:
            previous = None
            continue
        try:
            state = resolve_contact(spec, Pose2D(float(xy[0]), float(xy[1]), 0.0), world, previous)
        except SolverDivergenceError as e:
            logger.warning(f"Sweep over '{obj.name}' discarded at step {k}: {e}")
            return SweepOutcome(None, "solver_failure")
        if state.contact is not None:
            moments[k] = state.base_moment
            contacts[k] = state.contact.position
            flags[k] = True
            previous = state
        else:
            previous = None

    sequence = SignalSequence(
        times=np.arange(n) / trajectory.sim_rate,
        moments=moments,
        contact_pos=contacts,
        in_contact=flags,
        base_xy=positions,
        rate=trajectory.sim_rate,
        object_name=obj.name,
        placement=placement,
        trajectory=trajectory,
        seed=tuple(int(s) for s in seed),
    )
    return SweepOutcome(sequence)


def filter_sequence(raw: SignalSequence, thresholds: FilterThresholds) -> FilterVerdict:
    """
    Reject sweeps with torque spikes, contact jumps or more than one contact episode.

    Torque and episodes are checked on every sample. Contact jumps are
    measured between consecutive samples on the `jump_rate` grid, so
    `jump_max` is a distance per output step.
    """
    if len(raw) == 0:
        raise ValidationError("Cannot filter an empty sequence")
    if np.any(np.linalg.norm(raw.moments, axis=1) > thresholds.moment_max):
        return FilterVerdict(False, "torque_threshold")
    coarse = raw if abs(raw.rate - thresholds.jump_rate) < 1e-9 else downsample(raw, thresholds.jump_rate)
    both = coarse.in_contact[1:] & coarse.in_contact[:-1]
    jumps = np.linalg.norm(np.diff(coarse.contact_pos, axis=0), axis=1)
    if np.any(jumps[both] > thresholds.jump_max):
        return FilterVerdict(False, "contact_jump")
    if len(raw.episodes()) > 1:
        return FilterVerdict(False, "multiple_episodes")
    return FilterVerdict(True)


def downsample(raw: SignalSequence, output_rate: float = OUTPUT_RATE) -> SignalSequence:
    """Keep every (rate / output_rate)-th sample and rewrite times onto the output grid."""
    ratio = raw.rate / output_rate
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ValidationError(f"Sample rate {raw.rate} Hz is not a multiple of {output_rate} Hz")
    out = raw.select(slice(None, None, stride), rate=output_rate)
    return replace(out, times=np.arange(len(out)) / output_rate)


def trim_to_episode(seq: SignalSequence) -> SignalSequence:
    """Cut the sequence down to its (single) contact episode."""
    episodes = seq.episodes()
    if not episodes:
        return seq.select(slice(0, 0))
    start, stop = episodes[0][0], episodes[-1][1]
    out = seq.select(slice(start, stop))
    return replace(out, times=np.arange(len(out)) / seq.rate)


def augment(seq: SignalSequence, rng: np.random.Generator, k_max: int = 10, max_length: int = 256,
            noise_sigma: float = 0.0) -> SignalSequence:
    """
    Prepend k ~ U{0..k_max} no-contact samples and keep the latest `max_length`.

    Prepended samples carry zero moment plus Gaussian sensor noise; the
    original samples are untouched.
    """
    k = int(rng.integers(0, k_max + 1))
    noise = rng.normal(0.0, noise_sigma, size=(k, 2)) if noise_sigma > 0 else np.zeros((k, 2))
    first_base = seq.base_xy[:1] if len(seq) else np.zeros((1, 2))
    n = k + len(seq)
    out = replace(
        seq,
        times=np.arange(n) / seq.rate,
        moments=np.vstack([noise, seq.moments]),
        contact_pos=np.vstack([np.zeros((k, 2)), seq.contact_pos]),
        in_contact=np.concatenate([np.zeros(k, dtype=bool), seq.in_contact]),
        base_xy=np.vstack([np.repeat(first_base, k, axis=0), seq.base_xy]),
        n_augmented=k,
    )
    if n > max_length:
        dropped = n - max_length
        out = out.select(slice(dropped, None), n_augmented=max(k - dropped, 0))
        out = replace(out, times=np.arange(max_length) / seq.rate)
    return out


def split(sequences: Sequence[SignalSequence], ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Seeded permutation split into train and validation sets."""
    n = len(sequences)
    if n < 5:
        raise ValidationError(f"Need at least 5 sequences to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    return DatasetSplit(
        tuple(sequences[i] for i in order[:n_train]),
        tuple(sequences[i] for i in order[n_train:]),
    )


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepJob:
    spec: WhiskerSpec
    obj: PolyObject
    placement_config: PlacementConfig
    config: DatagenConfig
    seed: Tuple[int, ...]


@dataclass
class CorpusResult:
    sequences: List[SignalSequence] = field(default_factory=list)
    rejects: Counter = field(default_factory=Counter)
    attempted: int = 0


def _sweep_job(job: SweepJob) -> SweepOutcome:
    rng = np.random.default_rng(np.random.SeedSequence(list(job.seed)))
    rest = build_rest_shape(job.spec).node_positions
    try:
        placement = random_placement(job.obj, int(rng.integers(2 ** 62)), job.placement_config, rest)
    except PlacementError as e:
        logger.warning(f"{e}")
        return SweepOutcome(None, "placement")
    world = placement.apply(job.obj)
    travel = sweep_travel(job.spec, world, job.placement_config.sweep_direction, job.config.exit_gap)
    trajectory = sample_trajectory(rng, job.config, travel, job.placement_config.sweep_direction)
    return run_sweep(job.spec, job.obj, placement, trajectory, job.seed)


def build_corpus(spec: WhiskerSpec, shapes: Sequence[ShapeSpec], config: DatagenConfig,
                 placement_config: PlacementConfig, datagen_seed: int, augment_seed: int,
                 moment_max: float, workers: int = 1) -> CorpusResult:
    """
    Sweep every shape `sweeps_per_object` times and turn accepted sweeps into training sequences.

    Each sweep gets its own seed from (datagen_seed, shape index, sweep
    index), so results do not depend on the number of workers.

    Args:
        spec: Whisker geometry.
        shapes: Training shapes.
        config: Datagen parameters.
        placement_config: Standoff range and sweep direction.
        datagen_seed: Sub-seed for placements and trajectories.
        augment_seed: Sub-seed for no-contact augmentation.
        moment_max: Torque rejection threshold (N·mm).
        workers: Process count; 1 runs in-process.

    Returns:
        CorpusResult with sequences in (shape, sweep) order and reject tallies.
    """
    if not shapes:
        raise ValidationError("At least one shape is required to generate a dataset")
    config.validate()
    thresholds = FilterThresholds(moment_max, config.jump_max, config.output_rate)
    jobs = [
        SweepJob(spec, shape.build(), placement_config, config, (int(datagen_seed), i, j))
        for i, shape in enumerate(shapes)
        for j in range(config.sweeps_per_object)
    ]
    logger.info(f"Running {len(jobs)} sweeps over {len(shapes)} shapes with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_job, jobs, chunksize=max(len(jobs) // (4 * workers), 1)))
    else:
        outcomes = [_sweep_job(job) for job in jobs]

    result = CorpusResult(attempted=len(jobs))
    for job, outcome in zip(jobs, outcomes):
        if not outcome.ok:
            result.rejects[outcome.reason] += 1
            continue
        verdict = filter_sequence(outcome.sequence, thresholds)
        if not verdict.accepted:
            result.rejects[verdict.reason] += 1
            continue
        seq = trim_to_episode(downsample(outcome.sequence, config.output_rate))
        if len(seq) == 0:
            result.rejects["no_contact"] += 1
            continue
        rng = np.random.default_rng(np.random.SeedSequence([int(augment_seed), job.seed[1], job.seed[2]]))
        result.sequences.append(augment(seq, rng, config.k_max, config.max_length, config.noise_moment_sigma))

    logger.info(f"Accepted {len(result.sequences)}/{len(jobs)} sweeps; rejects {dict(result.rejects)}")
    return result
