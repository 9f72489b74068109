"""Ranking evaluation: NDCG (dialog-ranking convention), MRR, mean ranks.

NDCG truncates at k = the number of positive-relevance candidates and uses
linear gain, matching the dialog benchmark convention for dense relevance
scores in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


class NoRelevantCandidates(MetricError):
    pass


class IndexOutOfRange(MetricError):
    pass


class NoMatch(MetricError):
    pass


@dataclass(frozen=True)
class RankingResult:
    """A ranking (best candidate first) together with per-candidate relevance."""

    order: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        relevance = np.asarray(self.relevance, dtype=float)
        if order.ndim != 1 or relevance.ndim != 1 or order.size != relevance.size:
            raise MetricError("order and relevance must be 1-d and equally long")
        if not np.array_equal(np.sort(order), np.arange(order.size)):
            raise MetricError("order is not a permutation of candidate indices")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "relevance", relevance)

    @property
    def n(self) -> int:
        return int(self.order.size)


def rank_by(scores: np.ndarray, relevance: np.ndarray) -> RankingResult:
    """Rank candidates by descending score; ties keep lower index first."""
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    return RankingResult(order=order, relevance=np.asarray(relevance, dtype=float))


def dcg_at(relevance_in_rank_order: np.ndarray, k: int) -> float:
    """Discounted cumulative gain of the first ``k`` entries (linear gain)."""
    rel = np.asarray(relevance_in_rank_order, dtype=float)[:k]
    discounts = 1.0 / np.log2(np.arange(2, rel.size + 2))
    return float(np.sum(rel * discounts))


def ndcg(r: RankingResult) -> float:
    """NDCG truncated at the number of positive-relevance candidates."""
    k = int(np.count_nonzero(r.relevance > 0))
    if k == 0:
        raise NoRelevantCandidates("no candidate has positive relevance")
    gains = r.relevance[r.order]
    ideal = np.sort(r.relevance)[::-1]
    dcg = dcg_at(gains, k)
    idcg = dcg_at(ideal, k)
    return dcg / idcg


def mrr(r: RankingResult, gt_index: int) -> float:
    """Reciprocal of the 1-based rank of the ground-truth candidate."""
    if not 0 <= gt_index < r.n:
        raise IndexOutOfRange(f"gt_index {gt_index} out of range for {r.n} candidates")
    rank = int(np.nonzero(r.order == gt_index)[0][0]) + 1
    return 1.0 / rank


def mean_rank_of(r: RankingResult, matches: np.ndarray) -> float:
    """Mean 1-based rank of the candidates flagged in ``matches``."""
    matches = np.asarray(matches, dtype=bool)
    if matches.shape != (r.n,):
        raise MetricError("matches must be a boolean vector over candidates")
    ranks = np.nonzero(matches[r.order])[0] + 1
    if ranks.size == 0:
        raise NoMatch("predicate matches no candidate")
    return float(ranks.mean())
