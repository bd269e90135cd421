import numpy as np
import pytest

from labeltransfer import fields as fl
from labeltransfer.scene_io import Dataset, NoiseModel, write_synthetic_dataset

TINY_FIELD = fl.FieldConfig(num_classes=7, pos_bands=4, dir_bands=2, depth=2, width=16, skip=1, color_width=8,
                            semantic_width=8)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Dataset:
    """A 16x12 synthetic dataset with 3 stereo pairs."""
    root = tmp_path_factory.mktemp("small_ds")
    write_synthetic_dataset(root, seed=3, frames=3, width=16, height=12, noise=NoiseModel(flip_rate=0.15))
    return Dataset.open(root)


@pytest.fixture
def tiny_params():
    return fl.init_params(TINY_FIELD, np.random.default_rng(0))


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
