"""
Synthetic fine-grained benchmark: four categories, 64×64 images, 200 train and
200 test images, three scales, seed 42. These runs take minutes; deselect them
with ``-m "not slow"``.
"""
import time

import numpy as np
import pytest

from classifier_attention.config import RunConfig
from classifier_attention.data import SynthConfig, load_split, synth_generate
from classifier_attention.evaluation import ablate_losses, ablate_num_classifiers, evaluate
from classifier_attention.multiscale import batch_loss, initialize_scale, predict, train_pipeline, train_scale

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def benchmark_config():
    return RunConfig()


@pytest.fixture(scope="module")
def benchmark_data(tmp_path_factory, benchmark_config):
    root = tmp_path_factory.mktemp("benchmark")
    synth_generate(SynthConfig.from_run_config(benchmark_config), root)
    train = load_split(root, "train", benchmark_config.image_size)
    test = load_split(root, "test", benchmark_config.image_size)
    return train, test


@pytest.fixture(scope="module")
def benchmark_run(benchmark_data, benchmark_config):
    train, test = benchmark_data
    started = time.perf_counter()
    model = train_pipeline(train, benchmark_config, benchmark_config.seed).model
    report = evaluate(model, test, benchmark_config)
    return model, report, time.perf_counter() - started


@pytest.fixture(scope="module")
def benchmark_report(benchmark_run):
    return benchmark_run[1]


def test_dataset_size(benchmark_data):
    train, test = benchmark_data
    assert len(train) == len(test) == 200


def test_multi_scale_accuracy(benchmark_report):
    assert benchmark_report.multi_scale_accuracy >= 0.85


def test_ensemble_not_worse_than_any_scale(benchmark_report):
    for single in benchmark_report.acc_avg[:-1]:
        assert benchmark_report.multi_scale_accuracy >= single - 0.01


def test_attention_beats_random_boxes(benchmark_report):
    assert benchmark_report.mean_iou >= 2.0 * benchmark_report.baseline_iou


def test_local_branch_above_chance(benchmark_report):
    assert min(benchmark_report.acc_loc) >= 0.5


def test_masks_do_not_cover_whole_grid(benchmark_run, benchmark_data, benchmark_config):
    model, _, _ = benchmark_run
    _, test = benchmark_data
    coverage = [predict(model, s.image, benchmark_config).per_scale[0].artifacts.mask.mean() for s in test]
    assert np.mean(coverage) <= 0.6


def test_train_and_evaluate_within_ten_minutes(benchmark_run):
    assert benchmark_run[2] < 600.0


def test_first_epoch_lowers_monitoring_loss(benchmark_data, benchmark_config):
    train, _ = benchmark_data
    monitor = train[::10]
    config = benchmark_config.replace(epochs=1)
    before, _ = initialize_scale(train, config, config.seed)
    after = train_scale(train, config, config.seed)
    assert batch_loss(after, monitor, config).total < batch_loss(before, monitor, config).total


def test_combined_loss_beats_single_losses(benchmark_data, benchmark_config):
    train, test = benchmark_data
    rows = dict(ablate_losses(train, test, benchmark_config))
    assert rows["both"] >= rows["local"]
    assert rows["both"] >= rows["object"]


def test_two_classifiers_at_least_as_good_as_one(benchmark_data, benchmark_config):
    train, test = benchmark_data
    rows = dict(ablate_num_classifiers(train, test, benchmark_config, n_list=[1, 2]))
    assert rows[2] >= rows[1]
