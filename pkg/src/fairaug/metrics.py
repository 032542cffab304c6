"""Ranking-quality metrics: exact NDCG@k, a smooth differentiable surrogate,
group-gap summaries, the Wilcoxon signed-rank test, and set overlap.

Relevance is binary: an item is relevant to a user iff it appears in the
user's held-out (validation or test) interactions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import AbstractSet, Mapping, Sequence

import numpy as np
import torch

from .data import GroupPartition, InteractionGraph
from .errors import MetricError, ParameterError


def relevance_from_graph(graph: InteractionGraph) -> dict[int, frozenset[int]]:
    """Per-user relevant item sets from a held-out interaction graph."""
    out: dict[int, set[int]] = {}
    for u, i in zip(graph.edge_users.tolist(), graph.edge_items.tolist()):
        out.setdefault(u, set()).add(i)
    return {u: frozenset(s) for u, s in out.items()}


def _idcg(n_relevant: int, k: int) -> float:
    return sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, n_relevant) + 1))


def ndcg_at_k(ranked_items: Sequence[int], relevant: AbstractSet[int], k: int) -> float:
    """Exact NDCG of one recommendation list against a binary relevance set.

    The ideal DCG places min(k, |relevant|) relevant items at the top, so a
    user with fewer relevant items than k can still reach 1.0.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if not relevant:
        raise MetricError("relevance set is empty; exclude this user upstream")
    dcg = sum(1.0 / math.log2(pos + 1)
              for pos, item in enumerate(ranked_items[:k], start=1)
              if item in relevant)
    return dcg / _idcg(len(relevant), k)


@dataclass(frozen=True)
class UtilityReport:
    """Per-user exact NDCG@k, with users lacking relevant items set aside."""

    per_user: dict[int, float]
    skipped_users: tuple[int, ...]
    k: int


def evaluate_rankings(rankings: Mapping[int, Sequence[int]],
                      relevance: Mapping[int, AbstractSet[int]],
                      k: int) -> UtilityReport:
    """Score every ranked user; users with no relevant items are flagged,
    not scored, and never enter group means."""
    per_user: dict[int, float] = {}
    skipped: list[int] = []
    for u in sorted(rankings):
        rel = relevance.get(u, frozenset())
        if not rel:
            skipped.append(u)
            continue
        per_user[u] = ndcg_at_k(rankings[u], rel, k)
    return UtilityReport(per_user=per_user, skipped_users=tuple(skipped), k=k)


def group_means(report: UtilityReport, partition: GroupPartition) -> tuple[float, float]:
    """Mean utility of each partition group over its evaluated members."""
    means = []
    for group in partition.groups():
        vals = [report.per_user[u] for u in group if u in report.per_user]
        if not vals:
            raise MetricError(
                f"no evaluated users in a group of {partition.attribute_name}")
        means.append(float(np.mean(vals)))
    return means[0], means[1]


def delta_ndcg(report: UtilityReport, partition: GroupPartition) -> float:
    """Absolute gap between the two groups' mean utilities."""
    m1, m2 = group_means(report, partition)
    return abs(m1 - m2)


# ---------------------------------------------------------------------------
# smooth surrogate


def smooth_rank(scores: torch.Tensor, pool: torch.Tensor, targets: torch.Tensor,
                tau: float) -> torch.Tensor:
    """Differentiable rank estimate for ``targets`` among ``pool`` items.

    rank(i) = 1 + sum_{j in pool, j != i} sigmoid((s_j - s_i) / tau); the
    self-comparison contributes sigmoid(0) = 0.5 and is subtracted off.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    diffs = (scores[pool].unsqueeze(0) - scores[targets].unsqueeze(1)) / tau
    return 0.5 + torch.sigmoid(diffs).sum(dim=1)


def smooth_ndcg(scores: torch.Tensor, pool: torch.Tensor, relevant: torch.Tensor,
                k: int, tau: float) -> torch.Tensor:
    """Smooth NDCG@k for one user from a full item-score vector.

    Each relevant item contributes gate/log2(rank+1), where the gate
    sigmoid((k + 0.5 - rank) / tau) fades items out as their smooth rank
    crosses the cutoff; centering the transition half a rank past k makes
    the gate -> {0, 1} limit match the exact metric as tau -> 0. The sum is
    normalized by the exact ideal DCG.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if relevant.numel() == 0:
        raise MetricError("relevance set is empty; exclude this user upstream")
    if pool.numel() == 0:
        raise MetricError("ranking pool is empty")
    ranks = smooth_rank(scores, pool, relevant, tau)
    gates = torch.sigmoid((k + 0.5 - ranks) / tau)
    dcg = (gates / torch.log2(ranks + 1.0)).sum()
    return dcg / _idcg(int(relevant.numel()), k)


def smooth_ndcg_users(score_matrix: torch.Tensor,
                      pools: Mapping[int, torch.Tensor],
                      relevance: Mapping[int, torch.Tensor],
                      users: Sequence[int], k: int, tau: float) -> torch.Tensor:
    """Stack of per-user smooth NDCG values, differentiable through scores."""
    vals = [smooth_ndcg(score_matrix[u], pools[u], relevance[u], k, tau)
            for u in users]
    if not vals:
        raise MetricError("no users to evaluate")
    return torch.stack(vals)


# ---------------------------------------------------------------------------
# significance and overlap


def _exact_wilcoxon_p(doubled_ranks: Sequence[int], w_doubled: int) -> float:
    """Two-sided exact p-value by enumerating the null W+ distribution.

    Ranks arrive doubled so tied (half-integer average) ranks stay integral.
    Under the null every difference is independently positive or negative,
    so subset-sum counting over the rank multiset gives the distribution.
    """
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        counts[r:] += counts[:total + 1 - r].copy()
    denom = counts.sum()
    p_le = counts[:w_doubled + 1].sum() / denom
    p_ge = counts[w_doubled:].sum() / denom
    return min(1.0, 2.0 * min(p_le, p_ge))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float],
                         exact_threshold: int = 25) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Returns (W, p) where W is the rank sum of the positive differences
    x - y. Zero differences are dropped; tied magnitudes take average
    ranks. The null distribution is enumerated exactly up to
    ``exact_threshold`` pairs and normally approximated (with the tie
    correction) beyond that.
    """
    if len(x) != len(y):
        raise ParameterError(f"paired samples differ in length: {len(x)} vs {len(y)}")
    diffs = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        raise MetricError("all paired differences are zero")

    mags = np.abs(diffs)
    order = np.argsort(mags, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    pos = 0
    while pos < n:
        end = pos
        while end + 1 < n and mags[order[end + 1]] == mags[order[pos]]:
            end += 1
        ranks[order[pos:end + 1]] = 0.5 * (pos + 1 + end + 1)
        pos = end + 1

    w = float(ranks[diffs > 0].sum())

    if n <= exact_threshold:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_wilcoxon_p(doubled.tolist(), int(round(2.0 * w)))
        return w, p

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(mags, return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts)).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        raise MetricError("degenerate variance in the signed-rank null")
    z = (w - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return w, min(1.0, p)


def significance_marker(p: float, alpha: float = 0.05) -> str:
    """Star for a difference significant at the 1 - alpha confidence level."""
    return "*" if p < alpha else ""


def jaccard(a: AbstractSet, b: AbstractSet) -> float:
    """Set overlap in [0, 1]; two empty sets count as identical."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
