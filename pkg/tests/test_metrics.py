import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melon.dataset import MiniBatch
from melon.metrics import (
    KS, METRIC_NAMES, batch_ranks, evaluate_batch, hit_rate, metric_means, ndcg, optimistic_rank,
    pessimistic_rank, ranked_trials,
)
from melon.recommenders import BPR

from oracles import NDCG5_PLANTED_1_4_50


class TableModel:
    """Scores looked up from a fixed (user, item) table."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)

    def score(self, users, items):
        return self.table[users, items]


@pytest.mark.parametrize("rank, k, hit", [(3, 5, 1.0), (7, 5, 0.0), (5, 5, 1.0)])
def test_hit_rate(rank, k, hit):
    assert hit_rate(rank, k) == hit


@pytest.mark.parametrize("rank, k, value", [(1, 5, 1.0), (3, 5, 0.5), (6, 5, 0.0)])
def test_ndcg(rank, k, value):
    assert ndcg(rank, k) == value


def test_metric_names_order():
    assert METRIC_NAMES == ("HR@5", "HR@10", "HR@20", "NDCG@5", "NDCG@10", "NDCG@20")
    assert KS == (5, 10, 20)


def test_perfect_ranking():
    table = np.zeros((2, 10))
    table[:, 0] = 5.0
    b = MiniBatch(np.zeros(2, int), np.array([0, 1]), np.array([0, 0]), np.arange(2))
    neg = np.tile(np.arange(1, 10), (2, 11))[:, :99]
    out = evaluate_batch(TableModel(table), b, neg)
    assert out["HR@5"] == 1.0 and out["NDCG@20"] == 1.0


def test_constant_model_ranks_last():
    m = BPR(3, 200, dim=4)
    m.params.flat[:] = 0.0
    b = MiniBatch(np.zeros(3, int), np.arange(3), np.array([0, 1, 2]), np.arange(3))
    neg = np.random.default_rng(0).integers(3, 200, (3, 99))
    assert np.all(batch_ranks(m, b, neg) == 100)
    assert all(v == 0.0 for v in evaluate_batch(m, b, neg).values())


def test_planted_ranks():
    # row r: the positive is beaten by exactly (rank - 1) negatives
    ranks = [1, 4, 50]
    table = np.zeros((3, 100))
    for r, rank in enumerate(ranks):
        table[r, 0] = 0.5
        table[r, 1:rank] = 1.0
    b = MiniBatch(np.zeros(3, int), np.arange(3), np.zeros(3, int), np.arange(3))
    neg = np.tile(np.arange(1, 100), (3, 1))
    out = evaluate_batch(TableModel(table), b, neg)
    assert out["HR@5"] == pytest.approx(2 / 3, rel=1e-15)
    assert out["NDCG@5"] == pytest.approx(NDCG5_PLANTED_1_4_50, rel=1e-14)


def test_ranked_trials_fields():
    table = np.arange(12.0).reshape(2, 6)
    b = MiniBatch(np.zeros(2, int), np.array([0, 1]), np.array([3, 0]), np.arange(2))
    neg = np.array([[1, 4], [2, 5]])
    trials = ranked_trials(TableModel(table), b, neg)
    assert [t.rank for t in trials] == [2, 3]
    np.testing.assert_array_equal(trials[0].scores, [3.0, 1.0, 4.0])
    assert trials[1].positive == 0


@settings(max_examples=100, deadline=None)
@given(
    pos=st.floats(-3, 3),
    neg=st.lists(st.sampled_from([-3.0, -1.0, 0.0, 0.5, 1.0, 3.0]), min_size=1, max_size=30),
)
def test_rank_properties(pos, neg):
    pos = float(np.round(pos * 2) / 2)  # induce ties
    pr = int(pessimistic_rank(pos, neg))
    orank = int(optimistic_rank(pos, neg))
    assert pr >= orank
    assert pr == 1 + sum(n >= pos for n in neg)
    for k in KS:
        assert ndcg(pr, k) <= hit_rate(pr, k)
        v = ndcg(pr, k)
        assert v == 0.0 or 1 / math.log2(k + 1) - 1e-15 <= v <= 1.0


def test_metrics_monotone_in_rank_and_permutation_invariant():
    r = np.arange(1, 101)
    for k in KS:
        assert np.all(np.diff(hit_rate(r, k)) <= 0) and np.all(np.diff(ndcg(r, k)) <= 0)
    rng = np.random.default_rng(0)
    ranks = rng.integers(1, 101, 50)
    assert metric_means(ranks) == metric_means(rng.permutation(ranks))
