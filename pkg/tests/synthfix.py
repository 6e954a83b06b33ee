"""Synthetic fixtures shared by the test modules."""

import numpy as np

from pseudovote.core import DatasetManifest, MaskImage
from pseudovote.trainer import LossKind, LossSpec, TrainerConfig


def blob_manifest(
    n_labeled=60,
    n_unlabeled=0,
    num_classes=3,
    feature_dim=2,
    seed=7,
    separation=6.0,
):
    """Well-separated Gaussian blobs; classes interleave along the id order.

    Labels for the first n_labeled items go into the manifest; the full truth
    (including the "unlabeled" tail) is returned separately so tests can score
    pseudo-labeling against it.
    """
    rng = np.random.default_rng(seed)
    n = n_labeled + n_unlabeled
    ids = tuple(f"img{i:04d}" for i in range(n))
    all_labels = [i % num_classes for i in range(n)]
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, feature_dim))
    centers[:, 0] = separation * np.cos(angles)
    centers[:, 1 % feature_dim] = separation * np.sin(angles)
    features = centers[all_labels] + rng.standard_normal((n, feature_dim))
    manifest = DatasetManifest(
        ids=ids,
        features=features,
        labels={ids[i]: all_labels[i] for i in range(n_labeled)},
        num_classes=num_classes,
    )
    truth = {ids[i]: all_labels[i] for i in range(n)}
    return manifest, truth


def fast_config(**overrides):
    """Trainer settings that converge quickly on the blob fixtures."""
    defaults = dict(
        epochs=25,
        batch_size=64,
        lr=0.1,
        weight_decay=1e-4,
        gamma=0.99,
        schedule="exponential",
        loss=LossSpec(kind=LossKind.CROSS_ENTROPY),
    )
    defaults.update(overrides)
    return TrainerConfig(**defaults)


def mask_with_popcount(height, width, popcount, seed=0):
    """Binary mask with exactly `popcount` ones at seeded positions."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(height * width, dtype=np.uint8)
    if popcount:
        flat[rng.choice(height * width, size=popcount, replace=False)] = 1
    return MaskImage(flat.reshape(height, width))
