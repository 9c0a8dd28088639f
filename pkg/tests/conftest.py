"""Shared fixtures: small datasets reused across test modules."""

import numpy as np
import pytest

from unionnet.data import Dataset

from datagen import make_blob_images, make_image_folder


@pytest.fixture(scope="session")
def blob_dataset() -> Dataset:
    """64 linearly separable 8x8 samples in two classes."""
    images, labels = make_blob_images(n_per_class=32, size=8, seed=11)
    return Dataset(images=images, labels=labels, num_classes=2, class_names=["dim", "bright"])


@pytest.fixture(scope="session")
def tiny_folder(tmp_path_factory):
    """Image folder with 2 classes x 6 PPMs; enough for CLI train/eval runs."""
    root = tmp_path_factory.mktemp("tiny_folder")
    make_image_folder(root, num_classes=2, per_class=6, size=16, seed=3)
    return root
