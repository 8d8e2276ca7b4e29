import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make oracles importable


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def digits28():
    """MNIST-shaped stand-in: sklearn's embedded 8x8 digits upscaled to 28x28.

    Returns (train, test) LabeledDatasets with pixels in [0, 1].
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    from bvae.data import LabeledDataset

    digits = load_digits()
    images = np.stack([
        np.clip(ndimage.zoom(im / 16.0, 3.5, order=1), 0.0, 1.0)
        for im in digits.images
    ]).astype(np.float32)[..., None]
    labels = digits.target.astype(np.int64)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    split = 1200
    return (LabeledDataset(images[:split], labels[:split], "train"),
            LabeledDataset(images[split:], labels[split:], "test"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("BVAE_DESK_TESTS") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale MNIST reproduction; set BVAE_DESK_TESTS=1 and provide data")
    for item in items:
        if "desk" in item.keywords:
            item.add_marker(skip)
