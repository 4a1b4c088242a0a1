# conftest.py - Shared fixtures: toy datasets, IDX fixtures, synthetic objectives
import logging
import os
from pathlib import Path

import numpy as np
import pytest

from config import DataSection, PartitionMode, PartitionSpec, derive_weights
from dataio import LabeledDataset, load_idx, make_partition, write_idx
from model import DatasetObjective, ModelShape, QuadraticObjective

TOY_SIDE = 4
TOY_CLASSES = 4


def make_toy_dataset(n: int = 480, seed: int = 7, num_classes: int = TOY_CLASSES) -> LabeledDataset:
    """Class-dependent bright pixel blocks on noise; easy enough to learn in a few rounds."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    pixels = rng.integers(0, 60, size=(n, TOY_SIDE * TOY_SIDE))
    for c in range(num_classes):
        rows = labels == c
        pixels[rows, c * 4:(c + 1) * 4] += 180
    return LabeledDataset(pixels.astype(np.uint8), labels.astype(np.int64), num_classes)


@pytest.fixture(autouse=True)
def restore_root_logging():
    # cli.main installs its own handler on the root logger.
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def toy_dataset() -> LabeledDataset:
    return make_toy_dataset()


@pytest.fixture
def toy_test_dataset() -> LabeledDataset:
    return make_toy_dataset(n=160, seed=8)


@pytest.fixture
def toy_shape() -> ModelShape:
    return ModelShape(input_dim=TOY_SIDE * TOY_SIDE, hidden_units=6, num_classes=TOY_CLASSES)


@pytest.fixture
def toy_objective(toy_dataset, toy_test_dataset, toy_shape) -> DatasetObjective:
    partition = make_partition(toy_dataset, [3, 3], PartitionSpec(mode=PartitionMode.IID), seed=0)
    return DatasetObjective(toy_dataset, partition, toy_shape, toy_test_dataset, grad_batch=128)


@pytest.fixture
def idx_dir(tmp_path, toy_dataset, toy_test_dataset) -> Path:
    """Toy train/test IDX files laid out like the EMNIST downloads (uncompressed)."""
    write_idx(tmp_path / "train-images", tmp_path / "train-labels",
              toy_dataset.pixels, toy_dataset.labels, TOY_SIDE, TOY_SIDE)
    write_idx(tmp_path / "test-images", tmp_path / "test-labels",
              toy_test_dataset.pixels, toy_test_dataset.labels, TOY_SIDE, TOY_SIDE)
    return tmp_path


def quadratic(d: int = 8, noise_std: float = 0.0, devices=((1,),), seed: int = 3,
              offset_std: float = 0.0) -> QuadraticObjective:
    rng = np.random.default_rng(seed)
    hierarchy = derive_weights(devices)
    offsets = None
    if offset_std > 0:
        offsets = offset_std * rng.standard_normal((hierarchy.num_devices, d))
    return QuadraticObjective(rng.uniform(0.5, 2.0, d), rng.standard_normal(d), noise_std, hierarchy, offsets)


def emnist_available() -> bool:
    section = DataSection()
    return all(section.resolve(name).exists()
               for name in ("train_images", "train_labels", "test_images", "test_labels"))


def pytest_collection_modifyitems(config, items):
    if emnist_available():
        return
    skip = pytest.mark.skip(reason=f"EMNIST-digits IDX files not found (HIERSIGN_DATA_DIR={os.getenv('HIERSIGN_DATA_DIR')})")
    for item in items:
        if "dataset" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def emnist_train() -> LabeledDataset:
    section = DataSection()
    return load_idx(section.resolve("train_images"), section.resolve("train_labels"), section.num_classes)
