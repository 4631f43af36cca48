"""Shared fixtures for nctta tests."""
import os
import shutil
import sys
import tempfile

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import datagen
import model
import console
import nctta

REFERENCE_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "reference.ini")

SMALL_CONFIG = """
[data]
classes = 3
dim = 6
spread = 0.3
n_per_class = 30
test_n_per_class = 20
seed = 0

[train]
epochs = 5
lr = 0.05
hidden = 8, 8
batch_size = 32
post_zero_epochs = 2
max_epochs = 10
seed = 0

[adapt]
lr = 0.01
batch_size = 16

[scenario]
name = mild
shift = gaussian_noise
severity = 2
seeds = 0
"""


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    temp_path = tempfile.mkdtemp()
    yield temp_path
    shutil.rmtree(temp_path)


@pytest.fixture(autouse=True)
def clear_shutdown_flag():
    """Every test starts and ends without a pending shutdown request."""
    console.reset_shutdown()
    yield
    console.reset_shutdown()


@pytest.fixture
def small_config_path(temp_dir):
    """A tiny but complete experiment configuration file."""
    path = os.path.join(temp_dir, "small.ini")
    with open(path, "w", encoding="utf-8") as f:
        f.write(SMALL_CONFIG)
    return path


@pytest.fixture
def small_dataset():
    """3 well-separated classes in 8 dimensions, 40 samples each."""
    return datagen.make_clusters(classes=3, dim=8, n_per_class=40, spread=0.3, seed=0)


@pytest.fixture
def random_model():
    """Untrained 8 -> 16 -> 16 -> 3 model."""
    return model.init_params(8, (16, 16), 3, seed=1)


@pytest.fixture(scope="session")
def trained():
    """A small model trained into zero train error, plus its train and held-out sets.
    Returns: (params, norm, train_set, test_set, trace)"""
    train_set = datagen.make_clusters(classes=3, dim=8, n_per_class=40, spread=0.3, seed=0)
    test_set = datagen.make_clusters(classes=3, dim=8, n_per_class=30, spread=0.3, seed=0, sample_seed=10_000)
    cfg = model.TrainConfig(hidden=(16, 16), epochs=40, lr=0.05, batch_size=32, post_zero_epochs=10, max_epochs=60)
    params, norm = model.init_params(8, cfg.hidden, 3, seed=0, feature_activation=cfg.feature_activation)
    params, norm, trace = model.train_to_tpt(params, norm, train_set, cfg, verbose=False)
    return params, norm, train_set, test_set, trace


@pytest.fixture(scope="session")
def reference_dir(tmp_path_factory):
    """configs/reference.ini trained once per session into a scratch output directory.
    Returns: (ExperimentConfig, output directory)"""
    cfg = nctta.load_config(REFERENCE_CONFIG)
    out = str(tmp_path_factory.mktemp("reference"))
    nctta.cmd_train(cfg, out)
    return cfg, out


@pytest.fixture(scope="session")
def reference_model(reference_dir):
    """The reference checkpoint and its unshifted held-out set.
    Returns: (ExperimentConfig, params, norm, test_set)"""
    cfg, out = reference_dir
    params, norm = model.load_checkpoint(os.path.join(out, nctta.CHECKPOINT_NAME))
    return cfg, params, norm, datagen.load_dataset(os.path.join(out, nctta.TEST_SET_NAME))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
