import math
import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest

from evaluation import EvalConfig, EvalReport, evaluate_sweep, render_report, rmse_to_surface
from exceptions import CalibrationError, ValidationError
from rod_mechanics import WhiskerSpec
from scene_geometry import PlacementConfig, Pose2D, make_shape
from sweep_datagen import DatagenConfig
from whiskernet import WhiskerNetConfig, init_params


def make_report(speed=4.0, randomized=False, condition="simulation", name="circle", predicted=True):
    circle = make_shape("circle", {"radius": 10}, n_vertices=16)
    trail = circle.vertices[:5] * 1.05
    return EvalReport(object_name=name, condition=condition, speed=speed, rmse_to_surface=0.4 + speed / 100,
                      n_points=5, distances=(0.4,) * 5, randomized=randomized, polygon=circle.vertices,
                      truth_trail=circle.vertices[:5], predicted_trail=trail if predicted else np.zeros((0, 2)))


class TestRmseToSurface:
    def test_points_on_boundary(self, square):
        assert rmse_to_surface([[0.0, 5.0], [10.0, 10.0], [3.0, 0.0]], square) == 0.0

    def test_single_point(self, square):
        assert rmse_to_surface([[5.0, 12.0]], square) == pytest.approx(2.0)

    def test_pooled_root_mean_square(self, square):
        assert rmse_to_surface([[5.0, 11.0], [5.0, 13.0]], square) == pytest.approx(math.sqrt(5))

    def test_empty_trail(self, square):
        with pytest.raises(ValidationError):
            rmse_to_surface(np.zeros((0, 2)), square)

    def test_rigid_motion_invariance(self):
        blob = make_shape("blob", {"radius": 15, "seed": 8})
        trail = np.random.default_rng(2).uniform(-20, 20, size=(30, 2))
        pose = Pose2D(40.0, -12.0, 2.1)
        moved = rmse_to_surface(pose.apply(trail), blob.transformed(pose))
        assert moved == pytest.approx(rmse_to_surface(trail, blob), rel=1e-9)


class TestEvaluateSweep:
    spec = WhiskerSpec()
    params = init_params(WhiskerNetConfig.small(), seed=0)

    def run(self, condition, **kwargs):
        return evaluate_sweep(self.spec, self.params, self.params.config,
                              make_shape("circle", {"radius": 25}, n_vertices=32), 0.0, 20.0, 8.0, condition, (1, 2), DatagenConfig(), PlacementConfig(), **kwargs)

    def test_unknown_condition(self):
        with pytest.raises(ValidationError):
            self.run("hardware")

    def test_surrogate_real_needs_calibration(self):
        with pytest.raises(CalibrationError):
            self.run("surrogate_real")

    def test_simulation_condition_scores_predictions(self):
        result = self.run("simulation")
        assert result is not None
        assert len(result.truth) > 0
        assert len(result.distances) == len(result.predicted)
        assert np.all(result.distances >= 0)


class TestEvalConfig:
    @pytest.mark.parametrize("changes", [{"speeds": ()}, {"speed_jitter": (1.2, 0.8)}, {"trials": 0}])
    def test_invalid(self, changes):
        with pytest.raises(ValidationError):
            EvalConfig(**changes).validate()


class TestRenderReport:
    def test_speed_table(self, tmp_path):
        reports = [make_report(speed, randomized) for randomized in (False, True) for speed in (4, 6, 8, 10, 12)]
        paths = render_report(reports, tmp_path, name="speed_ablation")
        frame = pd.read_csv(paths["csv"])
        assert list(frame.columns) == ["object", "condition", "speed_mm_s", "randomized", "rmse_mm", "n_points"]
        assert len(frame) == 10
        summary = pd.read_csv(paths["summary"])
        assert summary.shape == (5, 3)
        assert set(summary.columns) == {"speed_mm_s", "rmse_w_random", "rmse_wo_random"}

    def test_condition_table(self, tmp_path):
        reports = [make_report(condition=c, name=n) for n in ("circle", "coin") for c in ("simulation", "surrogate_real")]
        paths = render_report(reports, tmp_path)
        summary = pd.read_csv(paths["summary"])
        assert len(summary) == 2
        assert {"rmse_simulation", "rmse_surrogate_real"} <= set(summary.columns)

    def test_svgs_parse(self, tmp_path):
        paths = render_report([make_report(), make_report(name="coin", predicted=False)], tmp_path)
        svgs = [p for key, p in paths.items() if key.startswith("svg:")]
        assert len(svgs) == 2
        for path in svgs:
            assert ET.parse(path).getroot().tag.endswith("svg")
        empty = next(p for p in svgs if "coin" in p.name)
        assert "no contact predicted" in empty.read_text()

    def test_svg_is_reproducible(self, tmp_path):
        a = render_report([make_report()], tmp_path / "a")
        b = render_report([make_report()], tmp_path / "b")
        svg_a = next(p for k, p in a.items() if k.startswith("svg:"))
        svg_b = next(p for k, p in b.items() if k.startswith("svg:"))
        assert svg_a.read_bytes() == svg_b.read_bytes()

    def test_no_reports(self, tmp_path):
        with pytest.raises(ValidationError):
            render_report([], tmp_path)
