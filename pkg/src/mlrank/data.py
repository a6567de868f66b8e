"""In-memory dataset container shared by the generators, trainer and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LabelRanking


@dataclass(frozen=True)
class OracleInstance:
    features: np.ndarray
    ranking: LabelRanking
    # true significance per class; NaN for negatives
    significance: np.ndarray
    factors: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Column-oriented batch of instances.

    ``features`` has shape ``(n, ...)`` (vectors or images), ``ranks`` is
    ``(n, K)`` int, ``significance`` is ``(n, K)`` float with NaN wherever
    the class is negative. ``factors`` maps a factor name (``"scale"``,
    ``"brightness"``) to an ``(n, K)`` array, NaN for absent classes.
    """

    features: np.ndarray
    ranks: np.ndarray
    significance: np.ndarray
    factors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    # optional (n, K, 4) int boxes (row, col, height, width); -1 for absent classes
    boxes: np.ndarray | None = None

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        self.significance = np.asarray(self.significance, dtype=float)
        n = self.ranks.shape[0]
        if self.features.shape[0] != n or self.significance.shape != self.ranks.shape:
            raise ValueError(
                f"inconsistent dataset shapes: features {self.features.shape}, "
                f"ranks {self.ranks.shape}, significance {self.significance.shape}"
            )
        for name, arr in self.factors.items():
            if np.shape(arr) != self.ranks.shape:
                raise ValueError(f"factor {name!r} has shape {np.shape(arr)}, expected {self.ranks.shape}")
        if self.boxes is not None and np.shape(self.boxes) != (*self.ranks.shape, 4):
            raise ValueError(f"boxes have shape {np.shape(self.boxes)}, expected {(*self.ranks.shape, 4)}")

    def __len__(self) -> int:
        return self.ranks.shape[0]

    @property
    def K(self) -> int:
        return self.ranks.shape[1]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.features.shape[1:]))

    def flat_features(self) -> np.ndarray:
        return self.features.reshape(len(self), -1).astype(float, copy=False)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            features=self.features[idx],
            ranks=self.ranks[idx],
            significance=self.significance[idx],
            factors={k: v[idx] for k, v in self.factors.items()},
            meta=dict(self.meta),
            boxes=None if self.boxes is None else self.boxes[idx],
        )

    def split(self, test_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic (train, test) split."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))

    def instance(self, i: int) -> OracleInstance:
        return OracleInstance(
            features=self.features[i],
            ranking=LabelRanking(self.ranks[i]),
            significance=self.significance[i],
            factors={k: v[i] for k, v in self.factors.items()},
        )

    def __iter__(self):
        return (self.instance(i) for i in range(len(self)))
