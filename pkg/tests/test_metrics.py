import math

import numpy as np
import pytest
import torch

from fairaug.errors import MetricError, ParameterError
from fairaug.metrics import (delta_ndcg, evaluate_rankings, group_means,
                             jaccard, ndcg_at_k, relevance_from_graph,
                             significance_marker, smooth_ndcg,
                             wilcoxon_signed_rank)
from helpers import (brute_ndcg_at_k, brute_wilcoxon_two_sided, make_graph,
                     make_partition)


class TestExactNdcg:
    def test_perfect_ranking_scores_one(self):
        assert ndcg_at_k([3, 1, 2], {3, 1, 2}, 3) == pytest.approx(1.0)

    def test_no_hits_scores_zero(self):
        assert ndcg_at_k([5, 6], {1}, 10) == 0.0

    def test_single_hit_positions(self):
        # hit at position p contributes 1/log2(p+2), ideal is 1/log2(2)
        assert ndcg_at_k([9, 1], {1}, 2) == pytest.approx(1.0 / math.log2(3))

    def test_ideal_truncates_at_k(self):
        # 3 relevant but k=2: ideal uses only the top-2 slots
        got = ndcg_at_k([1, 2, 3], {1, 2, 3}, 2)
        assert got == pytest.approx(1.0)

    def test_matches_brute_force_battery(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            n = int(rng.integers(1, 30))
            ranked = rng.permutation(n).tolist()
            relevant = set(rng.choice(n, size=int(rng.integers(1, n + 1)),
                                      replace=False).tolist())
            k = int(rng.integers(1, 15))
            assert ndcg_at_k(ranked, relevant, k) == pytest.approx(
                brute_ndcg_at_k(ranked, relevant, k), abs=1e-12)

    def test_invalid_k(self):
        with pytest.raises(ParameterError):
            ndcg_at_k([1], {1}, 0)

    def test_empty_relevance(self):
        with pytest.raises(MetricError):
            ndcg_at_k([1], set(), 5)


class TestEvaluateRankings:
    def test_only_users_with_relevance_are_scored(self):
        rankings = {0: [1, 2], 1: [0, 2], 2: [0, 1]}
        relevance = {0: frozenset({1}), 2: frozenset({9})}
        report = evaluate_rankings(rankings, relevance, k=2)
        assert set(report.per_user) == {0, 2}
        assert report.per_user[0] == pytest.approx(1.0)
        assert report.per_user[2] == 0.0

    def test_group_means_and_gap_orientation(self):
        g = make_graph(4, 3, [(u, 0) for u in range(4)])
        part = make_partition(4, [0, 1])
        rankings = {u: [0, 1, 2] for u in range(4)}
        relevance = {0: frozenset({0}), 1: frozenset({0}),
                     2: frozenset({2}), 3: frozenset({1})}
        report = evaluate_rankings(rankings, relevance, k=3)
        m1, m2 = group_means(report, part)
        assert m1 == pytest.approx(1.0)
        assert m2 == pytest.approx(
            (1.0 / math.log2(4) + 1.0 / math.log2(3)) / 2)
        assert delta_ndcg(report, part) == pytest.approx(abs(m1 - m2))
        assert delta_ndcg(report, part) >= 0.0

    def test_relevance_from_graph(self):
        g = make_graph(2, 3, [(0, 1), (0, 2), (1, 0)])
        rel = relevance_from_graph(g)
        assert rel == {0: frozenset({1, 2}), 1: frozenset({0})}


class TestSmoothNdcg:
    def _exact_from_scores(self, scores, relevant, k):
        ranked = sorted(range(len(scores)), key=lambda i: -scores[i])
        return ndcg_at_k(ranked, relevant, k)

    def test_converges_to_exact_metric_on_tie_free_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            n = int(rng.integers(2, 21))
            scores = torch.tensor(rng.permutation(n).astype(np.float64))
            relevant_set = set(rng.choice(n, size=int(rng.integers(1, n + 1)),
                                          replace=False).tolist())
            k = int(rng.integers(1, 11))
            approx = smooth_ndcg(scores, torch.arange(n),
                                 torch.tensor(sorted(relevant_set)), k,
                                 tau=1e-3).item()
            exact = self._exact_from_scores(scores.tolist(), relevant_set, k)
            assert approx == pytest.approx(exact, abs=1e-3)

    def test_gradient_flows_to_scores(self):
        scores = torch.tensor([3.0, 1.0, 2.0], requires_grad=True)
        value = smooth_ndcg(scores, torch.arange(3), torch.tensor([1]), 2,
                            tau=0.5)
        value.backward()
        assert scores.grad is not None
        # raising the relevant item's score can only help its rank
        assert scores.grad[1] > 0

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ParameterError):
            smooth_ndcg(torch.ones(2), torch.arange(2), torch.tensor([0]), 1,
                        tau=0.0)


class TestWilcoxon:
    def test_matches_enumeration_small_samples(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            n = int(rng.integers(2, 11))
            x = rng.normal(size=n)
            y = x + rng.normal(scale=0.5, size=n)
            if np.any(x == y):
                continue
            w, p = wilcoxon_signed_rank(x.tolist(), y.tolist())
            w_ref, p_ref = brute_wilcoxon_two_sided(x.tolist(), y.tolist())
            assert w == pytest.approx(w_ref)
            assert p == pytest.approx(p_ref, abs=1e-12)

    def test_handles_tied_magnitudes(self):
        x = [1.0, 2.0, 3.0, 4.0]
        y = [0.0, 1.0, 4.0, 3.0]  # diffs 1,1,-1,1 -> all |d| tied
        w, p = wilcoxon_signed_rank(x, y)
        w_ref, p_ref = brute_wilcoxon_two_sided(x, y)
        assert w == pytest.approx(w_ref)
        assert p == pytest.approx(p_ref, abs=1e-12)

    def test_zero_differences_dropped(self):
        w, p = wilcoxon_signed_rank([1.0, 5.0, 2.0], [1.0, 4.0, 3.0])
        w_ref, p_ref = brute_wilcoxon_two_sided([5.0, 2.0], [4.0, 3.0])
        assert w == pytest.approx(w_ref) and p == pytest.approx(p_ref)

    def test_all_zero_differences_undefined(self):
        with pytest.raises(MetricError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            wilcoxon_signed_rank([1.0], [1.0, 2.0])

    def test_normal_tail_is_sane_for_large_samples(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=60)
        y = x + 1.0  # strong systematic shift
        _, p_shift = wilcoxon_signed_rank(x.tolist(), y.tolist())
        _, p_null = wilcoxon_signed_rank(
            x.tolist(), (x + rng.normal(scale=1e-6, size=60)).tolist())
        assert p_shift < 1e-6
        assert p_null > 0.05

    def test_significance_marker(self):
        assert significance_marker(0.01) == "*"
        assert significance_marker(0.05) == ""
        assert significance_marker(0.9) == ""


class TestJaccard:
    def test_basic_values(self):
        assert jaccard({1, 2}, {2, 3}) == pytest.approx(1 / 3)
        assert jaccard({1}, {1}) == 1.0
        assert jaccard(set(), set()) == 1.0
        assert jaccard({1}, set()) == 0.0
