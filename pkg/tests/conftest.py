import numpy as np
import pytest

from classifier_attention.config import RunConfig
from classifier_attention.data import SynthConfig, load_split, synth_generate


@pytest.fixture
def rng():
    """Seeded generator so random instances are reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A run small enough to train in well under a second."""
    return RunConfig(
        scales=2,
        n_classifiers=2,
        categories=3,
        epochs=1,
        batch_size=2,
        image_size=16,
        backbone_widths=(4, 6),
        train_per_class=2,
        test_per_class=1,
        patch_size=6,
        clutter=0.2,
        nclf_list=(1, 2),
    )


@pytest.fixture
def tiny_dataset(tmp_path, tiny_config):
    root = tmp_path / "data"
    synth_generate(SynthConfig.from_run_config(tiny_config), root)
    return root


@pytest.fixture
def tiny_train(tiny_dataset, tiny_config):
    return load_split(tiny_dataset, "train", tiny_config.image_size)


@pytest.fixture
def tiny_test(tiny_dataset, tiny_config):
    return load_split(tiny_dataset, "test", tiny_config.image_size)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    path = tmp_path / "run.cfg"
    path.write_text(tiny_config.to_text())
    return path
