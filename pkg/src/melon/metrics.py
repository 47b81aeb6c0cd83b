"""Ranking metrics for the sampled-negative protocol.

Each evaluated row is ranked against its negatives; ties count against the
positive (pessimistic rank ``1 + #{neg >= pos}``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KS = (5, 10, 20)
METRIC_NAMES = tuple(f"HR@{k}" for k in KS) + tuple(f"NDCG@{k}" for k in KS)


@dataclass
class RankedTrial:
    positive: int
    negatives: np.ndarray
    scores: np.ndarray  # positive first, then negatives
    rank: int


def pessimistic_rank(pos_scores, neg_scores) -> np.ndarray:
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    return 1 + (neg >= pos[..., None]).sum(axis=-1)


def optimistic_rank(pos_scores, neg_scores) -> np.ndarray:
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    return 1 + (neg > pos[..., None]).sum(axis=-1)


def hit_rate(rank, k: int):
    return (np.asarray(rank) <= k).astype(np.float64)


def ndcg(rank, k: int):
    r = np.asarray(rank, dtype=np.float64)
    return np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)


def metric_means(ranks, ks=KS) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {f"HR@{k}": float(hit_rate(ranks, k).mean()) for k in ks}
    out.update({f"NDCG@{k}": float(ndcg(ranks, k).mean()) for k in ks})
    return out


def ranked_trials(model, batch, negatives: np.ndarray) -> list[RankedTrial]:
    ranks = batch_ranks(model, batch, negatives)
    scores = _scores(model, batch, negatives)
    return [RankedTrial(int(batch.i[r]), negatives[r], scores[r], int(ranks[r])) for r in range(len(batch))]


def _scores(model, batch, negatives: np.ndarray) -> np.ndarray:
    items = np.concatenate([batch.i[:, None], negatives], axis=1)
    users = np.broadcast_to(batch.u[:, None], items.shape)
    return model.score(users, items)


def batch_ranks(model, batch, negatives: np.ndarray) -> np.ndarray:
    s = _scores(model, batch, negatives)
    return pessimistic_rank(s[:, 0], s[:, 1:])


def evaluate_batch(model, batch, negatives: np.ndarray, ks=KS) -> dict[str, float]:
    """Batch means of HR@k and NDCG@k; ``negatives`` is (n, num_neg)."""
    return metric_means(batch_ranks(model, batch, negatives), ks)
