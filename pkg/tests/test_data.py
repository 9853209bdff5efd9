"""
Tests for synthetic dataset generation and dataset loading.
"""
from collections import Counter

import numpy as np
import pytest

from classifier_attention.attention import BBox
from classifier_attention.config import RunConfig
from classifier_attention.data import (
    BACKGROUND_LEVEL,
    SynthConfig,
    category_patch,
    load_sample,
    load_split,
    synth_generate,
    synth_image,
)
from classifier_attention.exceptions import ConfigError, RejectedInputError
from classifier_attention.formats.manifest import SampleRecord, read_manifest, write_manifest
from classifier_attention.formats.netpbm import write_image


class TestSynthGenerate:

    def test_counts_and_balance(self, tmp_path):
        dataset = synth_generate(SynthConfig(categories=4, train_per_class=50, test_per_class=50), tmp_path)
        assert len(dataset.train) == len(dataset.test) == 200
        assert len(read_manifest(tmp_path / "train.csv")) + len(read_manifest(tmp_path / "test.csv")) == 400
        assert Counter(r.label for r in dataset.train) == {0: 50, 1: 50, 2: 50, 3: 50}
        assert (tmp_path / dataset.train[0].path).exists()

    def test_zero_clutter_is_constant_background(self):
        config = SynthConfig(clutter=0.0)
        image, box = synth_image(config, 1, np.random.default_rng(0))
        outside = np.ones(image.shape[1:], dtype=bool)
        outside[box.row0:box.row1 + 1, box.col0:box.col1 + 1] = False
        assert np.all(image[:, outside] == BACKGROUND_LEVEL)
        assert box.height == box.width == config.patch_size

    def test_byte_identical_reruns(self, tmp_path):
        config = SynthConfig(categories=2, train_per_class=3, test_per_class=2)
        first = synth_generate(config, tmp_path / "a")
        synth_generate(config, tmp_path / "b")
        for record in first.train + first.test:
            assert (tmp_path / "a" / record.path).read_bytes() == (tmp_path / "b" / record.path).read_bytes()
        assert (tmp_path / "a" / "train.csv").read_bytes() == (tmp_path / "b" / "train.csv").read_bytes()

    def test_seed_changes_images(self, tmp_path):
        a = synth_generate(SynthConfig(categories=2, train_per_class=1, test_per_class=0, seed=1), tmp_path / "a")
        synth_generate(SynthConfig(categories=2, train_per_class=1, test_per_class=0, seed=2), tmp_path / "b")
        path = a.train[0].path
        assert (tmp_path / "a" / path).read_bytes() != (tmp_path / "b" / path).read_bytes()

    def test_boxes_inside_image(self, tmp_path):
        dataset = synth_generate(SynthConfig(categories=3, train_per_class=5, test_per_class=5, height=32, width=40, patch_size=10), tmp_path)
        for r in dataset.train + dataset.test:
            assert 0 <= r.x0 <= r.x1 < 40 and 0 <= r.y0 <= r.y1 < 32
            assert r.x1 - r.x0 + 1 == 10

    def test_patch_must_fit(self):
        with pytest.raises(ValueError):
            SynthConfig(height=16, width=16, patch_size=16)
        with pytest.raises(ConfigError) as info:
            SynthConfig.from_run_config(RunConfig(image_size=16, patch_size=16))
        assert info.value.key == "patch_size"

    @pytest.mark.parametrize(
        "changes, key",
        [({"categories": 1}, "categories"), ({"image_size": 1}, "image_size"), ({"clutter": 2.0}, "clutter")],
    )
    def test_field_errors_name_the_run_config_key(self, changes, key):
        config = RunConfig.model_construct(**{**RunConfig().model_dump(), **changes})
        with pytest.raises(ConfigError) as info:
            SynthConfig.from_run_config(config)
        assert info.value.key == key


class TestCategoryPatches:

    def test_values_in_unit_range(self):
        for k in range(4):
            patch = category_patch(k, 4, 16)
            assert patch.min() >= 0.0 and patch.max() <= 1.0

    def test_categories_linearly_separable(self):
        # A least-squares linear classifier on raw patch pixels separates the orientations.
        patches = np.stack([category_patch(k, 4, 16).ravel() for k in range(4)])
        targets = np.eye(4)
        weights, *_ = np.linalg.lstsq(patches, targets, rcond=None)
        assert np.array_equal((patches @ weights).argmax(axis=1), np.arange(4))

    def test_orientation_differs(self):
        assert not np.allclose(category_patch(0, 4, 16), category_patch(2, 4, 16))


class TestLoading:

    def test_load_split_matches_manifest(self, tiny_dataset, tiny_config):
        samples = load_split(tiny_dataset, "train", tiny_config.image_size)
        records = read_manifest(tiny_dataset / "train.csv")
        assert [s.label for s in samples] == [r.label for r in records]
        assert samples[0].image.shape == (3, 16, 16)
        assert samples[0].box == BBox(records[0].y0, records[0].x0, records[0].y1, records[0].x1)

    def test_short_edge_resize_scales_box(self, tmp_path):
        write_image(tmp_path / "wide.ppm", np.full((3, 32, 48), 0.25))
        sample = load_sample(tmp_path, SampleRecord("wide.ppm", 2, 8, 4, 15, 11), 16)
        assert sample.image.shape == (3, 16, 24)
        assert sample.box == BBox(2, 4, 5, 7)
        assert sample.label == 2

    def test_grayscale_promoted_to_rgb(self, tmp_path):
        write_image(tmp_path / "g.pgm", np.full((1, 8, 8), 0.5))
        sample = load_sample(tmp_path, SampleRecord("g.pgm", 0, 0, 0, 7, 7), 8)
        assert sample.image.shape == (3, 8, 8)

    def test_empty_split_rejected(self, tmp_path):
        write_manifest(tmp_path / "train.csv", [])
        with pytest.raises(RejectedInputError):
            load_split(tmp_path, "train", 16)
