"""Shared builders for the test suite: tiny graphs, random corpora, and
independent brute-force reference implementations."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from fairaug.data import (GroupPartition, Interaction, InteractionGraph,
                          UserAttributes)


def make_graph(n_users: int, n_items: int,
               edges: Sequence[tuple[int, int]],
               times: Optional[Sequence[int]] = None) -> InteractionGraph:
    """Graph straight from index pairs; ids mirror the indices."""
    users = np.array([u for u, _ in edges], dtype=np.int64)
    items = np.array([i for _, i in edges], dtype=np.int64)
    return InteractionGraph(
        n_users=n_users, n_items=n_items,
        user_ids=tuple(f"u{i}" for i in range(n_users)),
        item_ids=tuple(f"i{i}" for i in range(n_items)),
        edge_users=users, edge_items=items,
        edge_times=None if times is None else np.asarray(times, dtype=np.int64))


def make_partition(n_users: int, group_1: Sequence[int],
                   advantaged: Optional[int] = 1) -> GroupPartition:
    """Partition with group 1 as listed, group 2 the rest."""
    g1 = frozenset(group_1)
    g2 = frozenset(range(n_users)) - g1
    return GroupPartition(attribute_name="gender", group_names=("M", "F"),
                          group_1=g1, group_2=g2, advantaged=advantaged)


def random_graph(rng: np.random.Generator, n_users: int, n_items: int,
                 density: float = 0.15, with_times: bool = True,
                 ) -> InteractionGraph:
    """Random bipartite graph where every user has at least one edge."""
    edges = set()
    for u in range(n_users):
        for i in rng.choice(n_items, size=rng.integers(1, max(2, int(density * n_items))),
                            replace=False):
            edges.add((u, int(i)))
    pairs = sorted(edges)
    times = rng.integers(0, 1000, size=len(pairs)).tolist() if with_times else None
    return make_graph(n_users, n_items, pairs, times)


def random_interactions(rng: np.random.Generator, n_users: int = 20,
                        n_items: int = 15, max_per_user: int = 12,
                        ) -> list[Interaction]:
    """Random per-user interaction sequences with increasing timestamps."""
    interactions = []
    for u in range(n_users):
        count = int(rng.integers(1, max_per_user + 1))
        items = rng.choice(n_items, size=min(count, n_items), replace=False)
        for t, item in enumerate(items):
            interactions.append(Interaction(user_id=f"u{u}", item_id=f"i{item}",
                                            timestamp=t))
    return interactions


def attributes_for(interactions: Sequence[Interaction],
                   rng: np.random.Generator) -> dict[str, UserAttributes]:
    users = sorted({x.user_id for x in interactions})
    return {u: UserAttributes(user_id=u,
                              gender="M" if rng.random() < 0.5 else "F",
                              age=int(rng.integers(18, 60)))
            for u in users}


# ---------------------------------------------------------------------------
# brute-force references (kept deliberately naive and separate from the
# package implementations they check)


def brute_dcg_at_k(ranked: Sequence[int], relevant: set[int], k: int) -> float:
    return sum(1.0 / math.log2(pos + 2)
               for pos, item in enumerate(ranked[:k]) if item in relevant)


def brute_ndcg_at_k(ranked: Sequence[int], relevant: set[int], k: int) -> float:
    ideal = sum(1.0 / math.log2(pos + 2)
                for pos in range(min(k, len(relevant))))
    if ideal == 0.0:
        return 0.0
    return brute_dcg_at_k(ranked, relevant, k) / ideal


def brute_wilcoxon_two_sided(x: Sequence[float], y: Sequence[float],
                             ) -> tuple[float, float]:
    """Exact two-sided signed-rank test by full sign enumeration."""
    diffs = [a - b for a, b in zip(x, y) if a != b]
    n = len(diffs)
    mags = sorted(range(n), key=lambda j: abs(diffs[j]))
    ranks = [0.0] * n
    pos = 0
    while pos < n:
        end = pos
        while end + 1 < n and abs(diffs[mags[end + 1]]) == abs(diffs[mags[pos]]):
            end += 1
        for j in range(pos, end + 1):
            ranks[mags[j]] = 0.5 * (pos + 1 + end + 1)
        pos = end + 1
    w = sum(r for d, r in zip(diffs, ranks) if d > 0)
    outcomes = []
    for mask in range(2 ** n):
        outcomes.append(sum(ranks[j] for j in range(n) if mask >> j & 1))
    total = 2 ** n
    ge = sum(1 for o in outcomes if o >= w - 1e-12)
    le = sum(1 for o in outcomes if o <= w + 1e-12)
    return w, min(1.0, 2.0 * min(ge, le) / total)


def brute_pagerank(adjacency: np.ndarray, damping: float) -> np.ndarray:
    """Dense pagerank with uniform teleport and dangling redistribution."""
    n = adjacency.shape[0]
    deg = adjacency.sum(axis=1)
    transition = np.zeros((n, n))
    for j in range(n):
        if deg[j] > 0:
            transition[:, j] = adjacency[j] / deg[j]
        else:
            transition[:, j] = 1.0 / n
    x = np.full(n, 1.0 / n)
    for _ in range(100000):
        x_next = (1.0 - damping) / n + damping * (transition @ x)
        if np.abs(x_next - x).sum() < 1e-13:
            return x_next
        x = x_next
    raise AssertionError("reference pagerank did not converge")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))
