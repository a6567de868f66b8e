import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlrank.core import (
    InvalidAnnotation,
    LabelRanking,
    PairMode,
    enumerate_pairs,
    from_ranks,
    negatives,
    pair_matrix,
    positives,
)

A, B, C, D = range(4)

ranks_st = st.lists(st.integers(0, 4), min_size=1, max_size=8)


def test_buckets_group_by_rank():
    order = from_ranks([2, 1, 0, 0])
    assert order.buckets == (frozenset({C, D}), frozenset({B}), frozenset({A}))
    assert order.ranks == (0, 1, 2)


def test_all_negative_is_one_bucket():
    assert from_ranks([0, 0, 0]).buckets == (frozenset({A, B, C}),)


def test_empty_negative_bucket_omitted():
    order = from_ranks([1, 1, 2])
    assert order.buckets == (frozenset({A, B}), frozenset({C}))
    assert order.b == 2


def test_strong_pairs():
    pairs = enumerate_pairs(from_ranks([2, 1, 0, 0]), PairMode.STRONG)
    assert pairs == [(A, B), (A, C), (A, D), (B, C), (B, D)]


def test_weak_pairs():
    pairs = enumerate_pairs(from_ranks([2, 1, 0, 0]), "weak")
    assert pairs == [(A, C), (A, D), (B, C), (B, D)]


@pytest.mark.parametrize("mode", ["weak", "strong"])
def test_no_positives_no_pairs(mode):
    assert enumerate_pairs(from_ranks([0, 0]), mode) == []


def test_positive_sets():
    assert positives(LabelRanking([2, 1, 0, 0])) == {A, B}
    assert positives(LabelRanking([0, 0, 0])) == frozenset()
    assert positives(LabelRanking([3, 3, 3])) == {A, B, C}
    assert negatives(LabelRanking([2, 1, 0, 0])) == {C, D}


def test_invalid_annotations():
    with pytest.raises(InvalidAnnotation):
        LabelRanking([1, -1, 0])
    with pytest.raises(InvalidAnnotation):
        LabelRanking([1, 0], K=3)
    with pytest.raises(ValueError):
        PairMode.parse("medium")


def test_weak_copy():
    assert LabelRanking([3, 0, 2]).weak().ranks == (1, 0, 1)


@given(ranks_st)
def test_buckets_partition_classes(ranks):
    order = from_ranks(ranks)
    assert order.classes() == frozenset(range(len(ranks)))
    assert sum(len(b) for b in order.buckets) == len(ranks)
    assert list(order.ranks) == sorted(set(ranks))


@given(ranks_st, st.sampled_from(["weak", "strong"]))
def test_pair_matrix_matches_enumeration(ranks, mode):
    pairs = enumerate_pairs(from_ranks(ranks), mode)
    M = pair_matrix(np.array(ranks), mode)
    assert sorted(zip(*np.nonzero(M))) == pairs


@given(ranks_st)
def test_relation_is_strict_and_transitive(ranks):
    order = from_ranks(ranks)
    pairs = set(enumerate_pairs(order, "strong"))
    K = len(ranks)
    for u in range(K):
        assert (u, u) not in pairs
        for v in range(K):
            assert not ((u, v) in pairs and (v, u) in pairs)
            assert ((u, v) in pairs) == order.precedes(u, v)
            for w in range(K):
                if (u, v) in pairs and (v, w) in pairs:
                    assert (u, w) in pairs


@given(ranks_st)
def test_weak_pairs_subset_of_strong(ranks):
    order = from_ranks(ranks)
    weak = set(enumerate_pairs(order, "weak"))
    strong = set(enumerate_pairs(order, "strong"))
    assert weak <= strong
    pos = positives(LabelRanking(ranks))
    assert weak == {(u, v) for u, v in strong if u in pos and v not in pos}


def test_batched_pair_matrix():
    r = np.array([[2, 1, 0], [0, 0, 1]])
    M = pair_matrix(r, "strong")
    assert M.shape == (2, 3, 3)
    assert M[0].sum() == 3 and M[1].sum() == 2
