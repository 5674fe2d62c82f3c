"""
Metrics and ablations: RMSE from predicted contacts to the object surface,
speed ablation, simulation vs surrogate-real comparison, and report rendering.
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from exceptions import CalibrationError, ValidationError  # noqa: E402
from real2sim_calibration import MomentCalibration, preprocess  # noqa: E402
from rod_mechanics import WhiskerSpec, build_rest_shape  # noqa: E402
from scene_geometry import PlacementConfig, PolyObject, distances_to_boundary, place_object  # noqa: E402
from sensor_surrogate import SurrogateSensorModel, moments_to_wavelength_series  # noqa: E402
from sweep_datagen import DatagenConfig, constant_speed_trajectory, downsample, run_sweep, sweep_travel  # noqa: E402
from whiskernet import ModelParams, WhiskerNetConfig, predict_sweep  # noqa: E402

logger = logging.getLogger(__name__)

CONDITIONS = ("simulation", "surrogate_real")
REPORT_COLUMNS = ["object", "condition", "speed_mm_s", "randomized", "rmse_mm", "n_points"]
SVG_RC = {"svg.hashsalt": "whisker-sim", "svg.fonttype": "none"}


@dataclass(frozen=True)
class EvalConfig:
    speeds: Tuple[float, ...] = (4.0, 6.0, 8.0, 10.0, 12.0)
    eval_speed: float = 4.0
    speed_jitter: Tuple[float, float] = (0.8, 1.2)
    sweeps_per_cell: int = 4
    trials: int = 4
    max_attempts_factor: int = 3
    seen_objects: Tuple[str, ...] = ("circle", "rectangle")

    def validate(self) -> None:
        if not self.speeds or min(self.speeds) <= 0 or self.eval_speed <= 0:
            raise ValidationError("Evaluation speeds must be positive")
        lo, hi = self.speed_jitter
        if not 0 < lo <= hi:
            raise ValidationError(f"Invalid speed jitter range {self.speed_jitter}")
        if self.sweeps_per_cell < 1 or self.trials < 1 or self.max_attempts_factor < 1:
            raise ValidationError("sweeps_per_cell, trials and max_attempts_factor must be >= 1")


@dataclass(frozen=True, eq=False)
class EvalReport:
    """One table cell: an object under one condition and speed, with pooled per-point distances."""

    object_name: str
    condition: str
    speed: float
    rmse_to_surface: float
    n_points: int
    distances: Tuple[float, ...]
    randomized: bool = False
    split: str = "seen"
    polygon: Optional[np.ndarray] = None
    truth_trail: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    predicted_trail: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def to_row(self) -> Dict[str, object]:
        return {
            "object": self.object_name,
            "condition": self.condition,
            "speed_mm_s": self.speed,
            "randomized": self.randomized,
            "rmse_mm": self.rmse_to_surface,
            "n_points": self.n_points,
        }


def rmse_to_surface(trail: np.ndarray, obj: PolyObject) -> float:
    """
    Root-mean-square distance from world-frame contact points to the polygon boundary.

    Raises:
        ValidationError: The trail is empty.
    """
    points = np.asarray(trail, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise ValidationError("Cannot score an empty contact trail")
    d = distances_to_boundary(points, obj)
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class SweepEvaluation:
    world_object: PolyObject
    truth: np.ndarray
    predicted: np.ndarray
    distances: np.ndarray


def evaluate_sweep(spec: WhiskerSpec, params: ModelParams, model_config: WhiskerNetConfig, obj: PolyObject,
                   rotation: float, standoff: float, speed: float, condition: str, seed: Sequence[int],
                   datagen: DatagenConfig, placement_config: PlacementConfig, randomized: bool = False,
                   jitter: Tuple[float, float] = (0.8, 1.2), calibration: Optional[MomentCalibration] = None,
                   surrogate: Optional[SurrogateSensorModel] = None) -> Optional[SweepEvaluation]:
    """
    Sweep one placement at a nominal speed, run the model and score its trail.

    The condition decides what the model sees: true simulated moments, or
    surrogate wavelengths pushed through preprocessing and the GPR. Predicted
    points are mapped to the world with the simulated base trajectory.

    Returns:
        SweepEvaluation, or None when the sweep failed or nothing was predicted.
    """
    if condition not in CONDITIONS:
        raise ValidationError(f"Unknown condition {condition!r}, expected one of {CONDITIONS}")
    if condition == "surrogate_real" and (calibration is None or surrogate is None):
        raise CalibrationError("surrogate_real condition needs a fitted calibration and a surrogate sensor")

    rest = build_rest_shape(spec).node_positions
    placement = place_object(obj, rotation, standoff, placement_config, rest)
    world = placement.apply(obj)
    travel = sweep_travel(spec, world, placement_config.sweep_direction, datagen.exit_gap)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    trajectory = constant_speed_trajectory(speed, travel, datagen.sim_rate, placement_config.sweep_direction,
                                           jitter if randomized else None, rng)
    outcome = run_sweep(spec, obj, placement, trajectory, seed)
    if not outcome.ok:
        return None
    raw = outcome.sequence

    stride = int(round(raw.rate / datagen.output_rate))
    if condition == "simulation":
        moments = downsample(raw, datagen.output_rate).moments
    else:
        stream = int(np.random.SeedSequence(list(seed)).generate_state(1)[0])
        wavelengths = preprocess(moments_to_wavelength_series(surrogate, raw.moments, stream), calibration.preprocess)
        moments = calibration.moments_from_series(wavelengths[::stride])
    down = downsample(raw, datagen.output_rate)

    prediction = predict_sweep(params, model_config, moments)
    truth = down.base_xy[down.in_contact] + down.contact_pos[down.in_contact]
    if len(prediction) == 0:
        return SweepEvaluation(world, truth, np.zeros((0, 2)), np.zeros(0))
    predicted = down.base_xy[prediction.steps] + prediction.points
    return SweepEvaluation(world, truth, predicted, distances_to_boundary(predicted, world))


def _pooled_report(name: str, condition: str, speed: float, randomized: bool, split: str,
                   runs: List[SweepEvaluation]) -> EvalReport:
    distances = np.concatenate([r.distances for r in runs]) if runs else np.zeros(0)
    rmse = float(np.sqrt(np.mean(distances ** 2))) if len(distances) else float("nan")
    first = runs[0] if runs else None
    return EvalReport(
        object_name=name,
        condition=condition,
        speed=float(speed),
        rmse_to_surface=rmse,
        n_points=int(len(distances)),
        distances=tuple(float(d) for d in distances),
        randomized=randomized,
        split=split,
        polygon=None if first is None else first.world_object.vertices,
        truth_trail=np.zeros((0, 2)) if first is None else first.truth,
        predicted_trail=np.zeros((0, 2)) if first is None else first.predicted,
    )


def _standoff(seed: Sequence[int], placement_config: PlacementConfig) -> Tuple[float, float]:
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    return (float(rng.uniform(0.0, 2.0 * np.pi)),
            float(rng.uniform(placement_config.standoff_min, placement_config.standoff_max)))


def run_speed_ablation(spec: WhiskerSpec, params: ModelParams, model_config: WhiskerNetConfig, obj: PolyObject,
                       speeds: Sequence[float], randomized: bool, config: EvalConfig, datagen: DatagenConfig,
                       placement_config: PlacementConfig, seed: int) -> List[EvalReport]:
    """
    RMSE per nominal speed, pooled over at least `sweeps_per_cell` valid sweeps.

    Sweep placements depend only on (seed, sweep index), so every speed
    and both randomization settings see the same placements.
    """
    config.validate()
    reports = []
    for speed in speeds:
        runs: List[SweepEvaluation] = []
        attempt = 0
        while len(runs) < config.sweeps_per_cell and attempt < config.sweeps_per_cell * config.max_attempts_factor:
            rotation, standoff = _standoff((seed, attempt), placement_config)
            result = evaluate_sweep(spec, params, model_config, obj, rotation, standoff, speed, "simulation",
                                    (seed, attempt, int(randomized)), datagen, placement_config, randomized,
                                    config.speed_jitter)
            attempt += 1
            if result is not None and len(result.distances):
                runs.append(result)
        if len(runs) < config.sweeps_per_cell:
            logger.warning(f"Only {len(runs)} valid sweeps for '{obj.name}' at {speed} mm/s")
        report = _pooled_report(obj.name, "simulation", speed, randomized, "seen", runs)
        logger.info(f"Speed {speed} mm/s (randomized={randomized}): RMSE {report.rmse_to_surface:.3f} mm")
        reports.append(report)
    return reports


def run_condition_comparison(spec: WhiskerSpec, params: ModelParams, model_config: WhiskerNetConfig,
                             objects: Sequence[Tuple[PolyObject, str]], conditions: Sequence[str],
                             config: EvalConfig, datagen: DatagenConfig, placement_config: PlacementConfig,
                             seed: int, calibration: Optional[MomentCalibration] = None,
                             surrogate: Optional[SurrogateSensorModel] = None) -> List[EvalReport]:
    """
    Per-object RMSE under each condition over `trials` sweeps rotated by 90 degrees.

    Trials share placements and speed perturbations across conditions, so
    the comparison is paired.

    Args:
        objects: (polygon, "seen" | "unseen") pairs.
        conditions: Subset of ("simulation", "surrogate_real").

    Raises:
        CalibrationError: surrogate_real requested without a calibration.
    """
    config.validate()
    if "surrogate_real" in conditions and calibration is None:
        raise CalibrationError("surrogate_real condition needs a fitted calibration model")
    reports = []
    for index, (obj, split) in enumerate(objects):
        base_rotation, standoff = _standoff((seed, index), placement_config)
        for condition in conditions:
            runs = []
            for trial in range(config.trials):
                result = evaluate_sweep(spec, params, model_config, obj, base_rotation + trial * np.pi / 2, standoff,
                                        config.eval_speed, condition, (seed, index, trial), datagen,
                                        placement_config, True, config.speed_jitter, calibration, surrogate)
                if result is not None:
                    runs.append(result)
            report = _pooled_report(obj.name, condition, config.eval_speed, True, split, runs)
            logger.info(f"{obj.name} [{split}] {condition}: RMSE {report.rmse_to_surface:.3f} mm over {report.n_points} points")
            reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def report_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports], columns=REPORT_COLUMNS)


def plot_report(report: EvalReport, path: Path) -> None:
    """Object outline with ground-truth and predicted trails, 1 unit = 1 mm."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        _draw_report(fig, ax, report, path)


def _draw_report(fig, ax, report: EvalReport, path: Path) -> None:
    try:
        if report.polygon is not None:
            outline = np.vstack([report.polygon, report.polygon[:1]])
            ax.plot(outline[:, 0], outline[:, 1], color="black", linewidth=1.0, label="object")
        if len(report.truth_trail):
            ax.plot(report.truth_trail[:, 0], report.truth_trail[:, 1], ".", color="tab:green", markersize=3,
                    label="ground truth")
        if len(report.predicted_trail):
            ax.plot(report.predicted_trail[:, 0], report.predicted_trail[:, 1], "x", color="tab:red", markersize=3,
                    label="predicted")
        else:
            ax.text(0.5, 0.95, "no contact predicted", transform=ax.transAxes, ha="center", va="top")
        ax.set_aspect("equal")
        ax.set_xlabel("x (mm)")
        ax.set_ylabel("y (mm)")
        ax.set_title(f"{report.object_name} | {report.condition} | {report.speed:g} mm/s")
        ax.legend(loc="lower right", fontsize=7)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)


def render_report(reports: Sequence[EvalReport], out_dir: Path, name: str = "report") -> Dict[str, Path]:
    """
    Write the long-form CSV, a pivoted summary CSV and one SVG per report.

    Returns:
        Mapping of artifact kind to path ("csv", "summary", "svg:<stem>").

    Raises:
        ValidationError: No reports were given.
        OSError: Files could not be written (message names the path).
    """
    if not reports:
        raise ValidationError("render_report needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = report_frame(reports)
    paths: Dict[str, Path] = {"csv": out_dir / f"{name}.csv", "summary": out_dir / f"{name}_summary.csv"}

    try:
        frame.to_csv(paths["csv"], index=False)
        if frame["speed_mm_s"].nunique() > 1:
            summary = frame.pivot_table(index="speed_mm_s", columns="randomized", values="rmse_mm", aggfunc="mean")
            summary.columns = [f"rmse_{'w_random' if c else 'wo_random'}" for c in summary.columns]
        else:
            frame = frame.assign(split=[r.split for r in reports])
            summary = frame.pivot_table(index=["object", "split"], columns="condition", values="rmse_mm", aggfunc="mean")
            summary.columns = [f"rmse_{c}" for c in summary.columns]
        summary.reset_index().to_csv(paths["summary"], index=False)

        for report in reports:
            stem = _slug(f"{name}_{report.object_name}_{report.condition}_{report.speed:g}_"
                         f"{'rand' if report.randomized else 'fixed'}")
            path = out_dir / f"{stem}.svg"
            plot_report(report, path)
            paths[f"svg:{stem}"] = path
    except OSError as e:
        logger.error(f"Failed writing report under {out_dir}: {e}")
        raise
    logger.info(f"Wrote {len(reports)} report(s) to {out_dir}")
    return paths
