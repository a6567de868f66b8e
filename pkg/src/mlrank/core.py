"""Ranked multi-label annotations and the pair constraints they induce.

A ranking assigns every class a nonnegative integer; 0 marks a negative
class and larger values mark more significant positives. Classes sharing a
rank value form one bucket (a tie), and every pair of classes in different
buckets becomes an ordered training constraint.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidAnnotation(ValueError):
    """Raised for rankings that violate the annotation invariants."""


class PairMode(enum.Enum):
    WEAK = "weak"
    STRONG = "strong"

    @classmethod
    def parse(cls, value: "PairMode | str") -> "PairMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown pair mode {value!r}; expected 'weak' or 'strong'") from None


@dataclass(frozen=True)
class LabelRanking:
    ranks: tuple[int, ...]
    K: int

    def __init__(self, ranks: Iterable[int], K: int | None = None):
        r = tuple(int(v) for v in ranks)
        k = len(r) if K is None else int(K)
        if len(r) != k:
            raise InvalidAnnotation(f"ranking has {len(r)} entries but K={k}")
        if any(v < 0 for v in r):
            raise InvalidAnnotation(f"ranks must be nonnegative, got {r}")
        object.__setattr__(self, "ranks", r)
        object.__setattr__(self, "K", k)

    def positives(self) -> frozenset[int]:
        return positives(self)

    def weak(self) -> "LabelRanking":
        """Copy with every positive rank collapsed to 1."""
        return LabelRanking([1 if v > 0 else 0 for v in self.ranks], self.K)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ranks, dtype=np.int64)


@dataclass(frozen=True)
class BucketOrder:
    """Disjoint class buckets in ascending rank order.

    ``ranks[k]`` is the rank value shared by ``buckets[k]``; it is kept so
    the negative (rank 0) bucket can be told apart from the positives.
    """

    buckets: tuple[frozenset[int], ...]
    ranks: tuple[int, ...]

    @property
    def b(self) -> int:
        return len(self.buckets)

    def bucket_of(self, cls: int) -> int:
        for k, bucket in enumerate(self.buckets):
            if cls in bucket:
                return k
        raise KeyError(cls)

    def precedes(self, u: int, v: int) -> bool:
        """True when ``(u, v)`` is in the relation, i.e. u is ranked above v."""
        return self.bucket_of(u) > self.bucket_of(v)

    def classes(self) -> frozenset[int]:
        return frozenset().union(*self.buckets) if self.buckets else frozenset()


def positives(ranking: LabelRanking) -> frozenset[int]:
    return frozenset(j for j, r in enumerate(ranking.ranks) if r > 0)


def negatives(ranking: LabelRanking) -> frozenset[int]:
    return frozenset(j for j, r in enumerate(ranking.ranks) if r == 0)


def from_ranks(ranking: LabelRanking | Sequence[int]) -> BucketOrder:
    if not isinstance(ranking, LabelRanking):
        ranking = LabelRanking(ranking)
    values = sorted(set(ranking.ranks))
    buckets = tuple(
        frozenset(j for j, r in enumerate(ranking.ranks) if r == value) for value in values
    )
    return BucketOrder(buckets=buckets, ranks=tuple(values))


def enumerate_pairs(order: BucketOrder, mode: PairMode | str = PairMode.STRONG) -> list[tuple[int, int]]:
    """Ordered pairs ``(u, v)`` with u above v, sorted lexicographically.

    Tied classes never form a pair. Under the weak regime all positive
    buckets are merged first, leaving only positive-vs-negative pairs.
    """
    mode = PairMode.parse(mode)
    buckets = list(order.buckets)
    ranks = list(order.ranks)
    if mode is PairMode.WEAK:
        neg = [bk for bk, r in zip(buckets, ranks) if r == 0]
        pos = [bk for bk, r in zip(buckets, ranks) if r > 0]
        buckets = neg + ([frozenset().union(*pos)] if pos else [])
    pairs = []
    for k, upper in enumerate(buckets):
        for lower in buckets[:k]:
            pairs.extend((u, v) for u in upper for v in lower)
    pairs.sort()
    return pairs


def pair_matrix(ranks: np.ndarray, mode: PairMode | str = PairMode.STRONG) -> np.ndarray:
    """Boolean ``(..., K, K)`` mask with ``M[..., u, v]`` set when u is above v.

    Vectorised equivalent of :func:`enumerate_pairs` for rank arrays of
    shape ``(K,)`` or ``(n, K)``.
    """
    ranks = np.asarray(ranks)
    if PairMode.parse(mode) is PairMode.WEAK:
        ranks = (ranks > 0).astype(ranks.dtype)
    return ranks[..., :, None] > ranks[..., None, :]
