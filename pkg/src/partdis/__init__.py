"""Unsupervised part-based disentangling of object shape and appearance.

A two-stream autoencoder learns per-part activation maps (shape) and pooled
feature vectors (appearance) from unlabeled images, trained with a
reconstruction loss and a moment-based equivariance loss under synthetic
spatial and photometric transformations.
"""

__version__ = "0.1.0"

from . import cli, data, evaluation, geometry, networks, objectives, partcore, trainer

__all__ = [
    "cli",
    "data",
    "evaluation",
    "geometry",
    "networks",
    "objectives",
    "partcore",
    "trainer",
]
