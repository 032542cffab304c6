"""Sampling policies that narrow where augmentation may add edges, the
three candidate-set scenarios, and the policy-overlap analysis.

User policies select disadvantaged users; item policies select items; a
scenario combines them into the ordered candidate edge set the optimizer
perturbs. Every sampler is a pure, deterministic function of the training
graph (held-out interactions are invisible here), with ties resolved by
index ascending, and the sample at a smaller fraction is always a prefix
of the sample at a larger one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import AbstractSet, Iterable, Mapping, Optional

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .data import GroupPartition, InteractionGraph, build_adjacency
from .errors import (
    ContractError,
    EmptyCandidatesError,
    NumericError,
    ParameterError,
    PolicyUnavailableError,
)

USER_POLICIES = ("zero_utility", "low_degree", "furthest", "niche", "recent")
ITEM_POLICIES = ("preferred", "timeless", "pagerank")
SCENARIOS = ("user", "item", "user_item")

_PAGERANK_TOL = 1e-10
_PAGERANK_MAX_ITER = 1000


@dataclass(frozen=True)
class PolicyConfig:
    user_policy: Optional[str] = None
    item_policy: Optional[str] = None
    user_fraction: float = 0.35
    item_fraction: float = 0.20
    pagerank_damping: float = 0.85

    def validate(self) -> None:
        if self.user_policy is None and self.item_policy is None:
            raise ParameterError("at least one of user_policy/item_policy must be set")
        if self.user_policy is not None and self.user_policy not in USER_POLICIES:
            raise ParameterError(f"unknown user policy {self.user_policy!r}; "
                                 f"expected one of {USER_POLICIES}")
        if self.item_policy is not None and self.item_policy not in ITEM_POLICIES:
            raise ParameterError(f"unknown item policy {self.item_policy!r}; "
                                 f"expected one of {ITEM_POLICIES}")
        for name in ("user_fraction", "item_fraction"):
            frac = getattr(self, name)
            if not 0 < frac <= 1:
                raise ParameterError(f"{name} must lie in (0, 1], got {frac}")
        if not 0 < self.pagerank_damping < 1:
            raise ParameterError(
                f"pagerank_damping must lie in (0, 1), got {self.pagerank_damping}")

    @property
    def scenario(self) -> str:
        if self.user_policy and self.item_policy:
            return "user_item"
        return "user" if self.user_policy else "item"


@dataclass(frozen=True)
class SampledSets:
    """Outputs of the configured policies plus their provenance."""

    users: Optional[frozenset[int]]
    items: Optional[frozenset[int]]
    provenance: tuple[tuple[str, str], ...]


def _sample_size(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 0.5))


def _take(universe: Iterable[int], scores: Mapping[int, float], m: int,
          largest: bool) -> frozenset[int]:
    """m best-scoring members; ties by index ascending, so samples nest as
    m grows."""
    sign = -1.0 if largest else 1.0
    order = sorted(universe, key=lambda u: (sign * scores[u], u))
    return frozenset(order[:m])


def sample_zero_utility(partition: GroupPartition,
                        validation_ndcg: Mapping[int, float]) -> frozenset[int]:
    """Disadvantaged users whose validation utility is exactly zero.

    The sample size is data-determined (the fraction parameter plays no
    role); an empty result is legal and warns, since it leaves the
    augmentation nothing to do. Users without an evaluated utility are
    skipped.
    """
    chosen = frozenset(u for u in partition.disadvantaged_users
                       if validation_ndcg.get(u, None) == 0.0)
    if not chosen:
        warnings.warn("zero-utility sample is empty: every disadvantaged user "
                      "has positive validation utility", stacklevel=2)
    return chosen


def sample_low_degree(graph: InteractionGraph, partition: GroupPartition,
                      fraction: float) -> frozenset[int]:
    """Disadvantaged users with the fewest training interactions."""
    universe = partition.disadvantaged_users
    degrees = graph.user_degrees
    scores = {u: float(degrees[u]) for u in universe}
    return _take(universe, scores, _sample_size(fraction, len(universe)), largest=False)


def sample_furthest(graph: InteractionGraph, partition: GroupPartition,
                    fraction: float, distance_cap: Optional[float] = None,
                    ) -> frozenset[int]:
    """Disadvantaged users geodesically furthest from the advantaged group.

    Score is the sum of bipartite shortest-path distances to every
    advantaged user; unreachable pairs contribute the cap (node count, one
    past any possible path length).
    """
    universe = sorted(partition.disadvantaged_users)
    advantaged = sorted(partition.advantaged_users)
    cap = float(graph.n_users + graph.n_items) if distance_cap is None else distance_cap
    adj = build_adjacency(graph)
    dists = shortest_path(adj, method="D", unweighted=True, indices=universe)
    to_adv = dists[:, advantaged]
    to_adv[np.isinf(to_adv)] = cap
    scores = {u: float(to_adv[row].sum()) for row, u in enumerate(universe)}
    return _take(universe, scores, _sample_size(fraction, len(universe)), largest=True)


def sample_niche(graph: InteractionGraph, partition: GroupPartition,
                 fraction: float) -> frozenset[int]:
    """Disadvantaged users whose interacted items have the lowest mean
    degree; zero-degree users cannot be scored and are skipped with a
    warning."""
    universe = partition.disadvantaged_users
    item_deg = graph.item_degrees
    items_by_user = graph.train_items_by_user()
    scores: dict[int, float] = {}
    dropped = []
    for u in universe:
        items = items_by_user[u]
        if items.size == 0:
            dropped.append(u)
            continue
        scores[u] = float(item_deg[items].mean())
    if dropped:
        warnings.warn(f"{len(dropped)} zero-degree disadvantaged user(s) excluded "
                      "from the niche-interaction sample", stacklevel=2)
    m = min(_sample_size(fraction, len(universe)), len(scores))
    return _take(scores.keys(), scores, m, largest=False)


def sample_preferred(graph: InteractionGraph, partition: GroupPartition,
                     fraction: float) -> frozenset[int]:
    """Items whose interactions come disproportionately from disadvantaged
    users: score = (|U| / |U_D|) * (disadvantaged interactions / all
    interactions); untouched items score zero."""
    disadvantaged = np.zeros(graph.n_users, dtype=bool)
    disadvantaged[sorted(partition.disadvantaged_users)] = True
    total = graph.item_degrees.astype(np.float64)
    from_disadvantaged = np.bincount(
        graph.edge_items[disadvantaged[graph.edge_users]], minlength=graph.n_items
    ).astype(np.float64)
    ratio = np.divide(from_disadvantaged, total, out=np.zeros_like(total),
                      where=total > 0)
    scale = graph.n_users / len(partition.disadvantaged_users)
    scores = {i: float(scale * ratio[i]) for i in range(graph.n_items)}
    return _take(range(graph.n_items), scores,
                 _sample_size(fraction, graph.n_items), largest=True)


def sample_recent(graph: InteractionGraph, partition: GroupPartition,
                  fraction: float) -> frozenset[int]:
    """Disadvantaged users with the most recent training interaction."""
    if graph.edge_times is None:
        raise PolicyUnavailableError("recency sampling needs interaction timestamps")
    universe = partition.disadvantaged_users
    latest = np.full(graph.n_users, -np.inf)
    np.maximum.at(latest, graph.edge_users, graph.edge_times.astype(np.float64))
    scores = {u: float(latest[u]) for u in universe}
    return _take(universe, scores, _sample_size(fraction, len(universe)), largest=True)


def sample_timeless(graph: InteractionGraph, fraction: float) -> frozenset[int]:
    """Items with the widest interval between their first and last
    interaction; items with at most one interaction score zero."""
    if graph.edge_times is None:
        raise PolicyUnavailableError("interval sampling needs interaction timestamps")
    first = np.full(graph.n_items, np.inf)
    last = np.full(graph.n_items, -np.inf)
    times = graph.edge_times.astype(np.float64)
    np.minimum.at(first, graph.edge_items, times)
    np.maximum.at(last, graph.edge_items, times)
    interval = np.where(graph.item_degrees > 0, last - first, 0.0)
    scores = {i: float(interval[i]) for i in range(graph.n_items)}
    return _take(range(graph.n_items), scores,
                 _sample_size(fraction, graph.n_items), largest=True)


def pagerank_scores(graph: InteractionGraph, damping: float = 0.85) -> np.ndarray:
    """Pagerank over the undirected bipartite graph (users then items).

    Uniform teleport over all nodes, dangling mass redistributed
    uniformly, power iteration to L1 tolerance 1e-10.
    """
    adj = build_adjacency(graph)
    n = adj.shape[0]
    deg = np.asarray(adj.sum(axis=1)).ravel()
    dangling = deg == 0
    safe_deg = np.where(dangling, 1.0, deg)
    x = np.full(n, 1.0 / n)
    for _ in range(_PAGERANK_MAX_ITER):
        spread = adj.T @ (x / safe_deg)
        dangling_mass = x[dangling].sum()
        x_next = (1.0 - damping) / n + damping * (spread + dangling_mass / n)
        if np.abs(x_next - x).sum() < _PAGERANK_TOL:
            return x_next
        x = x_next
    raise NumericError(f"pagerank power iteration did not converge within "
                       f"{_PAGERANK_MAX_ITER} iterations")


def sample_pagerank(graph: InteractionGraph, fraction: float,
                    damping: float = 0.85) -> frozenset[int]:
    """Items with the highest pagerank in the bipartite graph."""
    ranks = pagerank_scores(graph, damping)
    item_ranks = ranks[graph.n_users:]
    scores = {i: float(item_ranks[i]) for i in range(graph.n_items)}
    return _take(range(graph.n_items), scores,
                 _sample_size(fraction, graph.n_items), largest=True)


def build_samples(graph: InteractionGraph, partition: GroupPartition,
                  config: PolicyConfig,
                  validation_ndcg: Optional[Mapping[int, float]] = None,
                  ) -> SampledSets:
    """Run the configured policies and bundle the results with provenance."""
    config.validate()
    users: Optional[frozenset[int]] = None
    items: Optional[frozenset[int]] = None
    provenance: list[tuple[str, str]] = []
    if config.user_policy is not None:
        if config.user_policy == "zero_utility":
            if validation_ndcg is None:
                raise ContractError("zero_utility sampling needs per-user "
                                    "validation utilities")
            users = sample_zero_utility(partition, validation_ndcg)
        elif config.user_policy == "low_degree":
            users = sample_low_degree(graph, partition, config.user_fraction)
        elif config.user_policy == "furthest":
            users = sample_furthest(graph, partition, config.user_fraction)
        elif config.user_policy == "niche":
            users = sample_niche(graph, partition, config.user_fraction)
        else:
            users = sample_recent(graph, partition, config.user_fraction)
        provenance.append(("user_policy", config.user_policy))
        provenance.append(("user_fraction", repr(config.user_fraction)))
    if config.item_policy is not None:
        if config.item_policy == "preferred":
            items = sample_preferred(graph, partition, config.item_fraction)
        elif config.item_policy == "timeless":
            items = sample_timeless(graph, config.item_fraction)
        else:
            items = sample_pagerank(graph, config.item_fraction,
                                    config.pagerank_damping)
        provenance.append(("item_policy", config.item_policy))
        provenance.append(("item_fraction", repr(config.item_fraction)))
        if config.item_policy == "pagerank":
            provenance.append(("pagerank_damping", repr(config.pagerank_damping)))
    return SampledSets(users=users, items=items, provenance=tuple(provenance))


@dataclass
class CandidateEdgeSet:
    """Ordered user-item pairs the optimizer may add: absent from the
    graph, owned by disadvantaged users, lexicographically sorted so each
    perturbation coordinate keeps a fixed meaning."""

    users: np.ndarray
    items: np.ndarray
    scenario: str

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.users.shape != self.items.shape:
            raise ContractError("candidate arrays must align")
        if self.scenario not in SCENARIOS:
            raise ContractError(f"unknown scenario {self.scenario!r}")

    def __len__(self) -> int:
        return int(self.users.size)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist()))


def build_candidates(graph: InteractionGraph, partition: GroupPartition,
                     sampled: SampledSets, scenario: str) -> CandidateEdgeSet:
    """Candidate edges for a scenario: missing (disadvantaged user, item)
    pairs, user-filtered and/or item-filtered by the sampled sets."""
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if scenario in ("user", "user_item") and sampled.users is None:
        raise ContractError(f"scenario {scenario!r} needs a user sample")
    if scenario in ("item", "user_item") and sampled.items is None:
        raise ContractError(f"scenario {scenario!r} needs an item sample")

    if scenario == "item":
        allowed_users = sorted(partition.disadvantaged_users)
    else:
        allowed_users = sorted(partition.disadvantaged_users & sampled.users)
    if scenario == "user":
        allowed_items = np.arange(graph.n_items)
    else:
        allowed_items = np.array(sorted(sampled.items), dtype=np.int64)

    items_by_user = graph.train_items_by_user()
    users_out: list[np.ndarray] = []
    items_out: list[np.ndarray] = []
    for u in allowed_users:
        missing = allowed_items[~np.isin(allowed_items, items_by_user[u])]
        users_out.append(np.full(missing.size, u, dtype=np.int64))
        items_out.append(missing)
    users_arr = np.concatenate(users_out) if users_out else np.zeros(0, dtype=np.int64)
    items_arr = np.concatenate(items_out) if items_out else np.zeros(0, dtype=np.int64)
    if users_arr.size == 0:
        raise EmptyCandidatesError(
            f"scenario {scenario!r} produced no candidate edges")
    return CandidateEdgeSet(users=users_arr, items=items_arr, scenario=scenario)


def policy_overlap(samples: Mapping[str, AbstractSet[int]],
                   ) -> tuple[list[str], np.ndarray]:
    """Pairwise Jaccard matrix over named samples, rows/columns sorted by
    name. Mixing user-policy and item-policy names is a contract error
    (their index universes differ)."""
    kinds = set()
    for name in samples:
        if name in USER_POLICIES:
            kinds.add("user")
        elif name in ITEM_POLICIES:
            kinds.add("item")
    if len(kinds) > 1:
        raise ContractError("cannot mix user-policy and item-policy samples "
                            "in one overlap matrix")
    names = sorted(samples)
    n = len(names)
    matrix = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            sa, sb = samples[names[a]], samples[names[b]]
            if not sa and not sb:
                value = 1.0
            else:
                value = len(set(sa) & set(sb)) / len(set(sa) | set(sb))
            matrix[a, b] = matrix[b, a] = value
    return names, matrix


def export_sample(path: str | Path, members: AbstractSet[int],
                  provenance: Mapping[str, str] | tuple[tuple[str, str], ...]) -> None:
    """Newline-delimited sorted indices with a provenance header."""
    items = provenance.items() if isinstance(provenance, Mapping) else provenance
    lines = [f"# {key}={value}" for key, value in items]
    lines.extend(str(m) for m in sorted(members))
    Path(path).write_text("\n".join(lines) + "\n")


def export_overlap_csv(path: str | Path, names: list[str],
                       matrix: np.ndarray) -> None:
    """Overlap matrix as CSV with a name header row and column."""
    lines = ["policy," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(f"{v:.10f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
