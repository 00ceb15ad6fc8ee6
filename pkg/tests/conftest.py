"""Session fixtures, including the image dataset used by the acceptance suite.

The acceptance runs want an MNIST-like corpus: 5000 samples, 784 features,
10 classes. If MNIST_DIR points at the real IDX files they are used directly;
otherwise a deterministic surrogate is built from sklearn's bundled
handwritten digits (8x8 scans, bilinear-upsampled to 28x28, augmented to
5000 samples with seeded rotations up to +/-40 degrees so the difficulty is
comparable) and written through the IDX codec.
"""
from __future__ import annotations

import os

import numpy as np
import pytest

from fedaug.data import LabeledDataset, _bilinear_sample, rotate_images, write_idx

MNIST_DIR_ENV = "MNIST_DIR"
MNIST_IMAGE_NAMES = ("train-images-idx3-ubyte.gz", "train-images-idx3-ubyte", "train-images.idx3-ubyte")
MNIST_LABEL_NAMES = ("train-labels-idx1-ubyte.gz", "train-labels-idx1-ubyte", "train-labels.idx1-ubyte")

SURROGATE_SIZE = 5000
SURROGATE_SEED = 20240501
SURROGATE_MAX_ANGLE = 40


def _find_mnist() -> tuple[str, str] | None:
    root = os.environ.get(MNIST_DIR_ENV)
    if not root:
        return None
    image = next((os.path.join(root, n) for n in MNIST_IMAGE_NAMES if os.path.exists(os.path.join(root, n))), None)
    label = next((os.path.join(root, n) for n in MNIST_LABEL_NAMES if os.path.exists(os.path.join(root, n))), None)
    if image and label:
        return image, label
    return None


def _upsample_28(features_8x8: np.ndarray) -> np.ndarray:
    images = features_8x8.reshape(-1, 8, 8)
    grid = np.linspace(0.0, 7.0, 28)
    rows, cols = np.meshgrid(grid, grid, indexing="ij")
    big = _bilinear_sample(images, rows, cols)
    return big.reshape(-1, 784)


def build_digit_surrogate(n_samples: int = SURROGATE_SIZE, seed: int = SURROGATE_SEED) -> LabeledDataset:
    from sklearn.datasets import load_digits

    raw = load_digits()
    base = LabeledDataset(_upsample_28(raw.data / 16.0), raw.target, 10)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(base), size=n_samples, replace=True)
    angles = rng.integers(-SURROGATE_MAX_ANGLE, SURROGATE_MAX_ANGLE + 1, size=n_samples)
    features = np.empty((n_samples, 784))
    labels = base.labels[picks]
    for angle in np.unique(angles):
        sel = np.flatnonzero(angles == angle)
        chunk = base.take(picks[sel])
        features[sel] = rotate_images(chunk, float(angle)).features if angle else chunk.features
    return LabeledDataset(features, labels, 10)


@pytest.fixture(scope="session")
def image_idx_files(tmp_path_factory) -> dict:
    """Paths to a 10-class image IDX pair plus provenance metadata."""
    found = _find_mnist()
    if found:
        return {"images": found[0], "labels": found[1], "source": "mnist", "subset": 5000}
    root = tmp_path_factory.mktemp("digits5k")
    images = str(root / "images-idx3-ubyte.gz")
    labels = str(root / "labels-idx1-ubyte.gz")
    write_idx(build_digit_surrogate(), images, labels, side=28)
    return {"images": images, "labels": labels, "source": "digit-surrogate", "subset": 0}
