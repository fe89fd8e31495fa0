"""Synthetic Gaussian class-cluster datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def input_shape(self) -> tuple:
        return self.x_train.shape[1:]

    def scoring_batch(self, per_class: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """A class-balanced subset of the training set with ``per_class * classes`` examples."""
        rng = np.random.default_rng(seed)
        picks = []
        for c in range(self.classes):
            idx = np.flatnonzero(self.y_train == c)
            picks.append(rng.choice(idx, size=min(per_class, idx.size), replace=False))
        idx = np.sort(np.concatenate(picks))
        return self.x_train[idx], self.y_train[idx]


def gen_synthetic(classes: int, dim, samples: int, seed: int, separation: float = 3.0,
                  test_fraction: float = 0.25) -> Dataset:
    """Unit-covariance Gaussian clusters, one per class, with a stratified train/test split.

    ``dim`` is an int (vectors) or a ``(C, H, W)`` tuple.  Vector class means
    are drawn with per-coordinate std ``separation / sqrt(dim)``; image means
    are constant over space with per-channel std ``separation``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if samples < classes:
        raise ValueError(f"{samples} samples cannot cover {classes} classes")
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    rng = np.random.default_rng(seed)
    if len(shape) == 1:
        means = rng.standard_normal((classes, shape[0])) * (separation / np.sqrt(shape[0]))
    else:
        per_channel = rng.standard_normal((classes, shape[0])) * separation
        means = np.broadcast_to(per_channel[:, :, None, None], (classes, *shape)).reshape(classes, -1)
    labels = np.arange(samples) % classes
    x = means[labels] + rng.standard_normal((samples, int(np.prod(shape))))
    x = x.reshape(samples, *shape)

    test = np.zeros(samples, dtype=bool)
    for c in range(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test[idx[: int(round(test_fraction * idx.size))]] = True
    return Dataset(x[~test], labels[~test], x[test], labels[test], classes)


def bayes_accuracy_two_class(distance: float) -> float:
    """Optimal accuracy between two equal-prior unit-covariance Gaussians whose means are ``distance`` apart."""
    from scipy.stats import norm

    return float(norm.cdf(distance / 2.0))
