"""Shared fixtures: one small spurious-correlation dataset plus a trained
classifier, built once per session so individual tests stay fast."""

from __future__ import annotations

import numpy as np
import pytest

from biaslens.manifest import load_manifest
from biaslens.pipeline import load_split_arrays, world_from_manifest
from biaslens.providers.logistic import StatMapClassifier
from biaslens.synthdata import generate_spurious_dataset


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    generate_spurious_dataset(
        root,
        n_train=120,
        n_val=48,
        n_test=48,
        correlation=0.95,
        seed=7,
    )
    return root


@pytest.fixture(scope="session")
def manifest(dataset_dir):
    return load_manifest(dataset_dir)


@pytest.fixture(scope="session")
def world(manifest):
    return world_from_manifest(manifest)


@pytest.fixture(scope="session")
def train_arrays(manifest):
    return load_split_arrays(manifest, "train")


@pytest.fixture(scope="session")
def val_arrays(manifest):
    return load_split_arrays(manifest, "val")


@pytest.fixture(scope="session")
def model(train_arrays):
    ids, images, labels, groups = train_arrays
    return StatMapClassifier().fit(images, labels)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
