"""
Surrogate two-grating whisker sensor and the V-groove calibration rig.

The surrogate maps true base moments to cross-coupled, mildly nonlinear,
noisy wavelength shifts so the calibration pipeline can run without hardware.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import CalibrationError, SolverDivergenceError, ValidationError
from rod_mechanics import SurfaceConstraint, WhiskerSpec, build_rest_shape, joint_kinematics, solve_equilibrium
from scene_geometry import Pose2D

logger = logging.getLogger(__name__)

_SINGLE_STREAM = 0
_SERIES_STREAM = 1


@dataclass(frozen=True)
class SurrogateSensorModel:
    """w = coupling · m + cubic_coeff ⊙ m³ + N(0, noise_sigma²), in pm."""

    coupling: Tuple[Tuple[float, float], Tuple[float, float]] = ((10.0, 2.0), (3.0, 12.0))
    cubic_coeff: Tuple[float, float] = (0.05, 0.05)
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        c = self.coupling_matrix
        if c.shape != (2, 2) or not np.all(np.isfinite(c)):
            raise ValidationError(f"Coupling must be a finite 2x2 matrix, got {self.coupling}")
        if abs(np.linalg.det(c)) < 1e-12:
            raise ValidationError("Coupling matrix must be invertible")
        if c[0, 1] == 0 or c[1, 0] == 0:
            raise ValidationError("Coupling matrix must couple both channels (non-zero off-diagonal)")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be non-negative, got {self.noise_sigma}")

    @property
    def coupling_matrix(self) -> np.ndarray:
        return np.asarray(self.coupling, dtype=float)

    def noiseless(self) -> "SurrogateSensorModel":
        return SurrogateSensorModel(self.coupling, self.cubic_coeff, 0.0, self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationPair:
    wavelength: Tuple[float, float]
    moment: Tuple[float, float]

    def to_dict(self) -> Dict[str, Any]:
        return {"wavelength": list(self.wavelength), "moment": list(self.moment)}


@dataclass(frozen=True)
class RigConfig:
    """
    Rig layout: trajectories press the groove at arc lengths spread over
    [arc_fraction_min, arc_fraction_max] of the whisker and stop at
    (1/3, 2/3, 1) of the full stroke.
    """

    n_trajectories: int = 9
    points_per_traj: int = 3
    arc_fraction_min: float = 0.25
    arc_fraction_max: float = 0.9
    stroke_ratio: float = 0.5
    max_stroke: float = 12.0

    def validate(self) -> None:
        if self.n_trajectories < 1 or self.points_per_traj < 1:
            raise ValidationError("Rig needs at least one trajectory and one stop")
        if not 0 < self.arc_fraction_min <= self.arc_fraction_max <= 1:
            raise ValidationError(f"Invalid rig arc range [{self.arc_fraction_min}, {self.arc_fraction_max}]")
        if self.stroke_ratio <= 0 or self.max_stroke <= 0:
            raise ValidationError("Rig stroke must be positive")

    def arc_lengths(self, spec: WhiskerSpec) -> np.ndarray:
        return spec.total_length * np.linspace(self.arc_fraction_min, self.arc_fraction_max, self.n_trajectories)

    def stroke(self, arc_length: float) -> float:
        return min(self.stroke_ratio * arc_length, self.max_stroke)


def _forward(model: SurrogateSensorModel, moments: np.ndarray) -> np.ndarray:
    m = np.asarray(moments, dtype=float)
    return m @ model.coupling_matrix.T + np.asarray(model.cubic_coeff) * m ** 3


def moments_to_wavelengths(model: SurrogateSensorModel, moment: Sequence[float], index: int = 0) -> np.ndarray:
    """
    Surrogate reading for one moment vector.

    Noise is drawn from a generator keyed by (model seed, index) so the same
    call index always sees the same noise, whatever the call order.
    """
    w = _forward(model, moment)
    if model.noise_sigma > 0:
        rng = np.random.default_rng([model.seed, _SINGLE_STREAM, int(index)])
        w = w + rng.normal(0.0, model.noise_sigma, size=2)
    return w


def moments_to_wavelength_series(model: SurrogateSensorModel, moments: np.ndarray, stream: int = 0) -> np.ndarray:
    """Surrogate readings for a (T, 2) moment series; noise keyed by (model seed, stream)."""
    w = _forward(model, np.asarray(moments, dtype=float).reshape(-1, 2))
    if model.noise_sigma > 0:
        rng = np.random.default_rng([model.seed, _SERIES_STREAM, int(stream)])
        w = w + rng.normal(0.0, model.noise_sigma, size=w.shape)
    return w


def _groove(spec: WhiskerSpec, arc_length: float, displacement: float) -> SurfaceConstraint:
    rest = build_rest_shape(spec)
    nodes, psi = joint_kinematics(spec, rest.joint_angles)
    h = spec.segment_length
    i = int(min(arc_length // h, spec.n_segments - 1))
    point = nodes[i] + (arc_length - i * h) * np.array([np.cos(psi[i]), np.sin(psi[i])])
    normal = np.array([-np.sin(psi[i]), np.cos(psi[i])])
    return SurfaceConstraint(float(arc_length), tuple(point + displacement * normal), tuple(normal), bilateral=True)


def rig_pair(spec: WhiskerSpec, model: SurrogateSensorModel, arc_length: float, displacement: float,
             index: int = 0) -> CalibrationPair:
    """
    One rig pose: the groove holds the whisker at `arc_length`, pushed
    `displacement` mm along the rest-shape normal.

    Raises:
        CalibrationError: The rod cannot reach the groove.
    """
    constraint = _groove(spec, arc_length, displacement)
    try:
        state = solve_equilibrium(spec, Pose2D(), constraint)
    except SolverDivergenceError as e:
        raise CalibrationError(f"Rig pose unreachable: {e}", {"arc_length": arc_length, "displacement": displacement}) from e
    moment = state.base_moment
    wavelength = moments_to_wavelengths(model, moment, index)
    return CalibrationPair(tuple(float(v) for v in wavelength), tuple(float(v) for v in moment))


def run_calibration_rig(spec: WhiskerSpec, model: SurrogateSensorModel, n_trajectories: int = 9,
                        points_per_traj: int = 3, config: Optional[RigConfig] = None) -> List[CalibrationPair]:
    """
    Collect (wavelength, moment) pairs from the simulated V-groove rig.

    Args:
        spec: Whisker geometry.
        model: Surrogate sensor producing the wavelengths.
        n_trajectories: Rig trajectories (groove positions along the whisker).
        points_per_traj: Evenly spaced stops per trajectory.
        config: Rig geometry; its trajectory/stop counts are overridden by the arguments.

    Returns:
        n_trajectories * points_per_traj pairs, trajectory-major.
    """
    base = config or RigConfig()
    rig = RigConfig(n_trajectories, points_per_traj, base.arc_fraction_min, base.arc_fraction_max,
                    base.stroke_ratio, base.max_stroke)
    rig.validate()
    model.validate()
    pairs = []
    for j, s in enumerate(rig.arc_lengths(spec)):
        stroke = rig.stroke(s)
        for i in range(points_per_traj):
            displacement = stroke * (i + 1) / points_per_traj
            pairs.append(rig_pair(spec, model, float(s), displacement, index=j * points_per_traj + i))
    logger.info(f"Calibration rig produced {len(pairs)} pairs")
    return pairs


def rig_moment_threshold(spec: WhiskerSpec, config: Optional[RigConfig] = None, factor: float = 5.0) -> float:
    """Torque rejection threshold: `factor` times the 95th percentile of rig moment norms."""
    rig = config or RigConfig()
    pairs = run_calibration_rig(spec, SurrogateSensorModel(noise_sigma=0.0), rig.n_trajectories,
                                rig.points_per_traj, rig)
    norms = np.linalg.norm([p.moment for p in pairs], axis=1)
    return float(factor * np.percentile(norms, 95))
