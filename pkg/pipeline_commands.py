"""
Pipeline commands: dataset generation, calibration, training, evaluation, speed ablation and a walkthrough demo.
"""
import dataclasses
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import artifact_store as store
from evaluation import (CONDITIONS, EvalReport, render_report, rmse_to_surface, run_condition_comparison,
                        run_speed_ablation)
from exceptions import MissingArtifactError, TrainingDivergedError, ValidationError
from real2sim_calibration import MomentCalibration, fit, preprocess
from rod_mechanics import build_rest_shape
from run_config import RunConfig, save_config
from run_stats import RunStats
from scene_geometry import PolyObject, place_object
from sensor_surrogate import SurrogateSensorModel, moments_to_wavelength_series, rig_moment_threshold, run_calibration_rig
from sweep_datagen import (REJECT_REASONS, DatasetSplit, build_corpus, constant_speed_trajectory, downsample,
                           run_sweep, split, sweep_travel)
from whiskernet import ModelParams, init_params, predict_sweep, train

logger = logging.getLogger(__name__)

DATASET_DIR = "dataset"
CALIBRATION_DIR = "calibration"
MODEL_DIR = "model"
REPORT_DIR = "report"
ABLATION_DIR = "ablation"


class PipelineCommands:
    """One method per CLI subcommand; artifacts live under `config.output_dir`."""

    def __init__(self, config: RunConfig, stats: Optional[RunStats] = None):
        config.validate()
        self.config = config
        self.stats = stats or RunStats()
        self.out = Path(config.output_dir)

    # -- paths -------------------------------------------------------------

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def _prepare(self, subdir: str) -> Path:
        directory = self.path(subdir)
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error(f"Cannot create output directory {directory}: {e}")
            raise
        save_config(self.config, self.path("config.json"))
        return directory

    @property
    def surrogate(self) -> SurrogateSensorModel:
        return dataclasses.replace(self.config.surrogate, seed=self.config.seed_for("surrogate"))

    def _moment_max(self) -> float:
        datagen = self.config.datagen
        if datagen.moment_max is not None:
            return datagen.moment_max
        threshold = rig_moment_threshold(self.config.whisker, self.config.rig, datagen.moment_max_factor)
        logger.info(f"Torque threshold from rig moments: {threshold:.3f} N·mm")
        return threshold

    # -- commands ----------------------------------------------------------

    def gen_command(self) -> Dict[str, Path]:
        """Generate the sweep corpus, split it and write the dataset plus manifest."""
        cfg = self.config
        directory = self._prepare(DATASET_DIR)
        with self.stats.stage("gen"):
            corpus = build_corpus(cfg.whisker, cfg.shapes, cfg.datagen, cfg.placement, cfg.seed_for("datagen"),
                                  cfg.seed_for("augment"), self._moment_max(), cfg.workers)
            self.stats.record_rejects(corpus.rejects)
            dataset = split(corpus.sequences, cfg.datagen.train_ratio, cfg.seed_for("split"))

        paths = {"train": directory / "train.jsonl", "validation": directory / "validation.jsonl"}
        files = {
            "train.jsonl": store.save_dataset(dataset.train, paths["train"]),
            "validation.jsonl": store.save_dataset(dataset.validation, paths["validation"]),
        }
        counts = {
            "attempted": corpus.attempted,
            "accepted": len(corpus.sequences),
            "train": len(dataset.train),
            "validation": len(dataset.validation),
        }
        manifest = store.build_manifest(cfg.digest(), cfg.master_seed, files, counts,
                                        self.stats.reject_tallies(list(REJECT_REASONS)))
        paths["manifest"] = directory / "manifest.json"
        store.save_manifest(manifest, paths["manifest"])
        self.stats.track_event("dataset_written", counts)
        logger.info(f"Dataset ready: {counts['train']} train / {counts['validation']} validation "
                    f"(corpus {manifest['corpus_hash'][:12]})")
        return paths

    def calibrate_command(self) -> Dict[str, Path]:
        """Collect rig pairs with the surrogate sensor and fit the wavelength-to-moment GPR."""
        cfg = self.config
        directory = self._prepare(CALIBRATION_DIR)
        surrogate = self.surrogate
        with self.stats.stage("calibrate"):
            pairs = run_calibration_rig(cfg.whisker, surrogate, cfg.rig.n_trajectories, cfg.rig.points_per_traj,
                                        cfg.rig)
            paths = {"pairs": directory / "pairs.jsonl", "model": directory / "gpr.json"}
            store.save_pairs(pairs, paths["pairs"])
            calibration = self._fit(store.load_pairs(paths["pairs"]), surrogate)
            store.save_calibration(calibration, paths["model"])
        self.stats.track_event("calibration_fitted", {"n_pairs": calibration.n_pairs})
        return paths

    def _fit(self, pairs, surrogate: SurrogateSensorModel) -> MomentCalibration:
        calib = self.config.calibration
        noise = calib.noise_variance if calib.noise_variance is not None else surrogate.noise_sigma ** 2
        return fit(pairs, calib.kernel_radius, noise, calib.jitter, calib.preprocess)

    def train_command(self) -> Dict[str, Path]:
        """Train WhiskerNet on the generated dataset; writes weights and the loss history."""
        cfg = self.config
        directory = self._prepare(MODEL_DIR)
        dataset_dir = self.path(DATASET_DIR)
        manifest = store.load_manifest(dataset_dir / "manifest.json")
        store.verify_manifest(manifest, dataset_dir)
        dataset = DatasetSplit(tuple(store.load_dataset(dataset_dir / "train.jsonl")),
                               tuple(store.load_dataset(dataset_dir / "validation.jsonl")))
        train_config = dataclasses.replace(cfg.train, seed=cfg.seed_for("train"))
        paths = {"weights": directory / "weights.bin", "loss": directory / "loss.csv"}
        with self.stats.stage("train"):
            try:
                result = train(dataset, cfg.model, train_config)
            except TrainingDivergedError as e:
                if e.checkpoint is not None:
                    store.save_weights(e.checkpoint, directory / "weights.diverged.bin")
                if e.history:
                    store.save_loss_history(e.history, paths["loss"])
                logger.error(f"Training diverged; last good checkpoint saved to {directory / 'weights.diverged.bin'}")
                raise
        store.save_weights(result.params, paths["weights"])
        store.save_loss_history(result.history, paths["loss"])
        self.stats.track_event("model_trained", {"best_epoch": result.best_epoch, "epochs": len(result.history)})
        return paths

    def _load_model(self) -> ModelParams:
        params = store.load_weights(self.path(MODEL_DIR, "weights.bin"))
        if params.config != self.config.model:
            raise ValidationError(f"Weights were trained with {params.config}, config asks for {self.config.model}")
        return params

    def _eval_objects(self) -> List[Tuple[PolyObject, str]]:
        seen = [s.build() for s in self.config.shapes if (s.name or s.kind) in self.config.evaluation.seen_objects]
        unseen = [s.build() for s in self.config.unseen_shapes]
        if not seen and not unseen:
            raise ValidationError("No evaluation objects: seen_objects matches no training shape and no unseen shapes")
        return [(obj, "seen") for obj in seen] + [(obj, "unseen") for obj in unseen]

    def eval_command(self, conditions: Sequence[str] = CONDITIONS) -> Dict[str, Path]:
        """Compare simulation and surrogate-real conditions on seen and unseen objects."""
        cfg = self.config
        params = self._load_model()
        calibration = None
        if "surrogate_real" in conditions:
            calibration = store.load_calibration(self.path(CALIBRATION_DIR, "gpr.json"))
        directory = self._prepare(REPORT_DIR)
        with self.stats.stage("eval"):
            reports = run_condition_comparison(cfg.whisker, params, cfg.model, self._eval_objects(), conditions,
                                               cfg.evaluation, cfg.datagen, cfg.placement, cfg.seed_for("eval"),
                                               calibration, self.surrogate)
            paths = render_report(reports, directory)
        self._log_reports(reports)
        return paths

    def ablate_speed_command(self) -> Dict[str, Path]:
        """RMSE against nominal sweep speed, with and without per-step speed perturbation."""
        cfg = self.config
        params = self._load_model()
        objects = self._eval_objects()
        obj = objects[0][0]
        directory = self._prepare(ABLATION_DIR)
        reports: List[EvalReport] = []
        with self.stats.stage("ablate-speed"):
            for randomized in (False, True):
                reports += run_speed_ablation(cfg.whisker, params, cfg.model, obj, cfg.evaluation.speeds, randomized,
                                              cfg.evaluation, cfg.datagen, cfg.placement, cfg.seed_for("eval"))
            paths = render_report(reports, directory, name="speed_ablation")
        self._log_reports(reports)
        return paths

    def demo_command(self) -> List[str]:
        """Walk one sweep through every stage and print what each produced."""
        cfg = self.config
        lines: List[str] = []

        def say(text: str) -> None:
            print(text)
            lines.append(text)

        obj = self._eval_objects()[0][0]
        rest = build_rest_shape(cfg.whisker).node_positions
        placement = place_object(obj, 0.0, 0.5 * (cfg.placement.standoff_min + cfg.placement.standoff_max),
                                 cfg.placement, rest)
        world = placement.apply(obj)
        travel = sweep_travel(cfg.whisker, world, cfg.placement.sweep_direction, cfg.datagen.exit_gap)
        trajectory = constant_speed_trajectory(cfg.evaluation.eval_speed, travel, cfg.datagen.sim_rate,
                                               cfg.placement.sweep_direction)
        outcome = run_sweep(cfg.whisker, obj, placement, trajectory, (cfg.master_seed,))
        if not outcome.ok:
            raise ValidationError(f"Demo sweep failed: {outcome.reason}")
        raw = outcome.sequence
        say(f"[sweep] '{obj.name}' at {cfg.evaluation.eval_speed:g} mm/s: {len(raw)} steps, "
            f"{int(raw.in_contact.sum())} in contact")

        down = downsample(raw, cfg.datagen.output_rate)
        peak = np.abs(down.moments).max(axis=0)
        say(f"[moments] {len(down)} samples at {down.rate:g} Hz, peak |m1|={peak[0]:.3f} |m2|={peak[1]:.3f} N·mm")

        surrogate = self.surrogate
        wavelengths = moments_to_wavelength_series(surrogate, raw.moments, stream=0)
        say(f"[surrogate] wavelength shifts up to {np.abs(wavelengths).max():.2f} pm "
            f"(noise sigma {surrogate.noise_sigma:g} pm)")

        pairs = run_calibration_rig(cfg.whisker, surrogate, cfg.rig.n_trajectories, cfg.rig.points_per_traj, cfg.rig)
        calibration = self._fit(pairs, surrogate)
        stride = int(round(raw.rate / cfg.datagen.output_rate))
        recovered = calibration.moments_from_series(preprocess(wavelengths, calibration.preprocess)[::stride])
        say(f"[calibrate] GPR on {calibration.n_pairs} rig pairs, moment recovery error "
            f"{np.abs(recovered - down.moments).max():.3f} N·mm")

        try:
            params = self._load_model()
            source = "trained weights"
        except MissingArtifactError:
            params = init_params(cfg.model, cfg.seed_for("train"))
            source = "untrained initial weights (run 'train' first for a meaningful result)"
        prediction = predict_sweep(params, cfg.model, recovered)
        say(f"[predict] {len(prediction)} contact points from {source}")

        if len(prediction):
            predicted = down.base_xy[prediction.steps] + prediction.points
            say(f"[rmse] {rmse_to_surface(predicted, world):.3f} mm to the object surface")
        else:
            say("[rmse] no contact predicted")
        return lines

    def _log_reports(self, reports: Sequence[EvalReport]) -> None:
        for r in reports:
            self.stats.track_event("report", {"object": r.object_name, "condition": r.condition,
                                              "speed": r.speed, "rmse_mm": r.rmse_to_surface})
