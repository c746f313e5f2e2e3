"""Shared fixtures: one small trained model reused across the unit tests.

Adaptation mutates models in place, so tests never share a live graph;
``fresh_model`` reloads a pristine copy from the session-scoped weight file.
"""

import numpy as np
import pytest

from driftalign import datasets, layers, source
from driftalign.layers import ArchSpec

TINY_ARCH = ArchSpec(in_channels=3, image_size=16, conv_channels=(8, 12), kernel=3, pool=4, n_classes=10)


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY_ARCH


@pytest.fixture(scope="session")
def tiny_train():
    return datasets.generate(600, seed=100)


@pytest.fixture(scope="session")
def tiny_test():
    return datasets.generate(800, seed=200)


@pytest.fixture(scope="session")
def tiny_weights(tmp_path_factory, tiny_train):
    graph = source.train_source(tiny_train, TINY_ARCH, epochs=6, lr=0.01, seed=0)
    path = tmp_path_factory.mktemp("model") / "tiny.dat"
    layers.save_weights(graph, path)
    return path


@pytest.fixture()
def fresh_model(tiny_weights):
    def load():
        return layers.load_weights(tiny_weights, TINY_ARCH)

    return load


@pytest.fixture(scope="session")
def tiny_stats(tiny_weights, tiny_train):
    graph = layers.load_weights(tiny_weights, TINY_ARCH)
    return source.compute_source_stats(graph, tiny_train)


def corrupted_copy(dataset, sigma, seed):
    rng = np.random.default_rng(seed)
    images = dataset.images + rng.normal(scale=sigma, size=dataset.images.shape)
    return datasets.Dataset(
        images=np.clip(images, 0, 1).astype(np.float32), labels=dataset.labels.copy()
    )


@pytest.fixture(scope="session")
def run_env(tmp_path_factory, tiny_weights, tiny_stats, tiny_train, tiny_test):
    """On-disk artifacts for driving full runs: datasets, weights, statistics."""
    root = tmp_path_factory.mktemp("env")
    datasets.save_dataset(tiny_train, root / "data" / "train")
    datasets.save_dataset(tiny_test, root / "data" / "test")
    weights = root / "model.dat"
    weights.write_bytes(tiny_weights.read_bytes())
    source.save_stats(tiny_stats, root / "stats.dat")
    return root
