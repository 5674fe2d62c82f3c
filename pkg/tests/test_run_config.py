import json

import pytest

from exceptions import ValidationError
from run_config import (FULL_SHAPE_COUNT, FULL_SWEEPS_PER_OBJECT, RunConfig, config_from_dict, derive_seed,
                        load_config, save_config)
from scene_geometry import ShapeSpec


class TestRunConfig:
    def test_default_is_valid(self):
        RunConfig().validate()

    def test_save_and_load(self, tmp_path):
        config = RunConfig(master_seed=42, output_dir=str(tmp_path / "out"))
        path = tmp_path / "config.json"
        save_config(config, path)
        loaded = load_config(path)
        assert loaded == config
        assert loaded.digest() == config.digest()

    def test_partial_document_keeps_defaults(self):
        config = config_from_dict({"master_seed": 3, "datagen": {"sweeps_per_object": 4}})
        assert config.datagen.sweeps_per_object == 4
        assert config.datagen.speed_max == RunConfig().datagen.speed_max
        assert config.master_seed == 3

    def test_unknown_nested_key_names_path(self):
        with pytest.raises(ValidationError, match="model.bogus"):
            config_from_dict({"model": {"bogus": 1}})

    def test_unknown_shape_key(self):
        with pytest.raises(ValidationError, match=r"shapes\[0\].colour"):
            config_from_dict({"shapes": [{"kind": "circle", "params": {"radius": 5}, "colour": "red"}]})

    def test_unknown_top_level_key(self):
        with pytest.raises(ValidationError, match="seeds"):
            config_from_dict({"seeds": 1})

    def test_duplicate_shape_names(self):
        shapes = (ShapeSpec("circle", {"radius": 5.0}, name="a"), ShapeSpec("circle", {"radius": 8.0}, name="a"))
        with pytest.raises(ValidationError):
            RunConfig(shapes=shapes).validate()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError):
            load_config(path)

    def test_digest_changes_with_content(self):
        assert RunConfig(master_seed=1).digest() != RunConfig(master_seed=2).digest()

    def test_digest_ignores_output_location_and_workers(self):
        assert RunConfig(output_dir="a", workers=1).digest() == RunConfig(output_dir="b", workers=4).digest()

    def test_saved_file_is_sorted_json(self, tmp_path):
        path = tmp_path / "config.json"
        save_config(RunConfig(), path)
        data = json.loads(path.read_text())
        assert list(data) == sorted(data)


class TestSeeds:
    def test_derive_seed_is_stable(self):
        assert derive_seed(7, "train") == derive_seed(7, "train")
        assert derive_seed(7, "train") != derive_seed(7, "eval")
        assert derive_seed(7, "train") != derive_seed(8, "train")

    def test_seed_fits_in_64_bits(self):
        assert 0 <= derive_seed(123, "datagen") < 2 ** 64

    def test_seed_for_uses_master(self):
        assert RunConfig(master_seed=5).seed_for("split") == derive_seed(5, "split")


class TestFullScale:
    def test_protocol_sizes(self):
        config = RunConfig().full_scale()
        assert len(config.shapes) == FULL_SHAPE_COUNT == 78
        assert config.datagen.sweeps_per_object == FULL_SWEEPS_PER_OBJECT == 200
        assert config.model.n_layers == 6
        config.validate()

    def test_full_scale_shapes_build(self):
        for spec in RunConfig().full_scale().shapes[:9]:
            spec.build()
