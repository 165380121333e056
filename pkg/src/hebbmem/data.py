"""Synthetic desk-scale tasks: Gaussian blobs and permuted families of them."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


@dataclass(frozen=True)
class GaussianBlobs:
    """``n_classes`` isotropic clusters with centres drawn from N(0, center_scale^2 I).

    ``per_class_count`` training and ``test_per_class`` test points are drawn
    for every class.
    """

    n_classes: int = 10
    d_in: int = 16
    per_class_count: int = 100
    test_per_class: int = 50
    cluster_spread: float = 1.0
    center_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "d_in", "per_class_count", "test_per_class"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ValueError(f"{name}: must be a positive integer, got {v!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes: need at least two classes")
        if not self.cluster_spread > 0:
            raise ValueError(f"cluster_spread: must be positive, got {self.cluster_spread!r}")
        if not self.center_scale > 0:
            raise ValueError(f"center_scale: must be positive, got {self.center_scale!r}")

    def with_seed(self, seed: int) -> "GaussianBlobs":
        return replace(self, seed=seed)

    def centers(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0])
        return rng.normal(scale=self.center_scale, size=(self.n_classes, self.d_in))

    def sample(self, counts, stream: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``counts[c]`` points of every class from an independent stream."""
        rng = np.random.default_rng([self.seed, stream])
        centers = self.centers()
        y = np.repeat(np.arange(self.n_classes), counts)
        X = centers[y] + rng.normal(scale=self.cluster_spread, size=(len(y), self.d_in))
        return X, y

    def generate(self) -> Dataset:
        Xtr, ytr = self.sample([self.per_class_count] * self.n_classes, stream=1)
        Xte, yte = self.sample([self.test_per_class] * self.n_classes, stream=2)
        return Dataset(Xtr, ytr, Xte, yte)


def imbalanced_counts(base: int, classes, ratio: tuple[int, int] | None) -> dict[int, int]:
    """Per-class sample counts where the first half of ``classes`` gets ``major/minor`` times more.

    ``ratio=None`` means balanced. The minor half gets ``base`` samples.
    """
    classes = list(classes)
    if ratio is None:
        return {c: base for c in classes}
    major, minor = ratio
    half = len(classes) // 2
    return {c: (base * major) // minor if j < half else base for j, c in enumerate(classes)}


def permutations(d_in: int, n_tasks: int, seed: int) -> list[np.ndarray]:
    """Input permutations per task; task 0 keeps the original coordinate order."""
    rng = np.random.default_rng([seed, 7])
    perms = [np.arange(d_in)]
    for _ in range(n_tasks - 1):
        perms.append(rng.permutation(d_in))
    return perms


@dataclass(frozen=True)
class PermutedFamily:
    """The same blob task seen through a different fixed input permutation per task."""

    base: GaussianBlobs
    n_tasks: int = 5
    permutation_seed: int = 0

    def __post_init__(self):
        if int(self.n_tasks) != self.n_tasks or self.n_tasks <= 0:
            raise ValueError(f"n_tasks: must be a positive integer, got {self.n_tasks!r}")

    def tasks(self) -> list[Dataset]:
        ds = self.base.generate()
        out = []
        for perm in permutations(self.base.d_in, self.n_tasks, self.permutation_seed):
            out.append(Dataset(ds.X_train[:, perm], ds.y_train, ds.X_test[:, perm], ds.y_test))
        return out
