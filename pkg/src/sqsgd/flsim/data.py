from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .idx import load_idx


@dataclass
class Shard:
    inputs: np.ndarray
    labels: np.ndarray
    owner: int

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def features(self) -> int:
        return self.x_train.shape[1]


def _balanced_labels(n, classes, rng):
    y = np.arange(n) % classes
    rng.shuffle(y)
    return y


def synth_data(n: int, features: int, classes: int, seed: int, margin: float = 3.5, n_test: int = 0) -> Dataset:
    """Gaussian class clusters with unit noise.

    Class means are ``margin`` times random orthonormal directions, so any two
    means are ``margin * sqrt(2)`` apart. Class counts are balanced to within
    one. Deterministic in ``seed``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if classes > features:
        raise ValueError("need features >= classes for orthogonal class means")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((features, classes)))
    means = margin * basis.T

    def draw(count):
        y = _balanced_labels(count, classes, rng)
        x = means[y] + rng.standard_normal((count, features))
        return x, y

    x_tr, y_tr = draw(n)
    x_te, y_te = draw(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, classes)


def load_idx_dataset(train_images, train_labels, test_images, test_labels, classes: int = 10, n_train: int | None = None) -> Dataset:
    x_tr = load_idx(train_images)
    x_tr = x_tr.reshape(len(x_tr), -1)
    y_tr = load_idx(train_labels, classes)
    x_te = load_idx(test_images)
    x_te = x_te.reshape(len(x_te), -1)
    y_te = load_idx(test_labels, classes)
    if len(x_tr) != len(y_tr) or len(x_te) != len(y_te):
        raise ValueError("image and label counts differ")
    if n_train:
        x_tr, y_tr = x_tr[:n_train], y_tr[:n_train]
    return Dataset(x_tr, y_tr, x_te, y_te, classes)


def partition(x: np.ndarray, y: np.ndarray, clients: int, rng: np.random.Generator) -> list[Shard]:
    """Random split into ``clients`` shards whose sizes differ by at most one."""
    if clients < 1:
        raise ValueError("need at least one client")
    if len(y) < clients:
        raise ValueError(f"{len(y)} samples cannot feed {clients} clients")
    perm = rng.permutation(len(y))
    return [Shard(x[idx], y[idx], owner) for owner, idx in enumerate(np.array_split(perm, clients))]
