"""The iterative fair-augmentation optimizer.

Holds a perturbation value per candidate edge, repeatedly: runs the frozen
model over the relaxed graph, steps the perturbations down the fairness
loss, discretizes, and measures the exact validation gap of the resulting
discrete graph. The epoch with the smallest gap wins; early stopping ends
the loop when the gap stops improving.

Only training and validation data enter this module; the test split is
evaluated downstream, never optimized against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import DatasetSplit, GroupPartition, InteractionGraph
from .errors import ContractError, ParameterError
from .grad import build_eval_context, loss_and_gradient, loss_value
from .metrics import evaluate_rankings, group_means, relevance_from_graph
from .models import RelaxedGraph, TrainedModel, model_scores, recommend_topn
from .policies import CandidateEdgeSet

STOP_REASONS = ("early_stop", "max_epochs", "empty_candidates")


@dataclass(frozen=True)
class AugmentationConfig:
    max_epochs: int = 800
    early_stop_min_delta: float = 1e-4
    early_stop_patience: int = 7
    beta: float = 0.5
    tau: float = 0.1
    learning_rate: float = 0.01
    discretization_threshold: float = 0.5
    p_init: float = -1.0

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 1:
            raise ParameterError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.early_stop_min_delta <= 0:
            raise ParameterError(
                f"early_stop_min_delta must be positive, got {self.early_stop_min_delta}")
        if not 0 < self.discretization_threshold < 1:
            raise ParameterError("discretization_threshold must lie in (0, 1), "
                                 f"got {self.discretization_threshold}")
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.beta < 0:
            raise ParameterError(f"beta must be nonnegative, got {self.beta}")
        if self.learning_rate < 0:
            raise ParameterError(
                f"learning_rate must be nonnegative, got {self.learning_rate}")


class EarlyStopper:
    """Stop once the watched value fails to improve by at least min_delta
    for `patience` consecutive epochs."""

    def __init__(self, min_delta: float, patience: int):
        self.min_delta = min_delta
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def update(self, value: float) -> bool:
        """Feed one epoch's value; True means stop now."""
        if self.best - value >= self.min_delta:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    l_fair: float
    l_dist: float
    loss: float
    n_edges: int
    delta_ndcg_valid: float
    ndcg_valid: float
    ndcg_group1: float
    ndcg_group2: float


@dataclass
class AugmentationResult:
    best_epoch: int
    added_edges: tuple[tuple[int, int], ...]
    augmented_graph: InteractionGraph
    trace: tuple[TraceRecord, ...]
    stop_reason: str
    regressed: bool

    @property
    def best_record(self) -> TraceRecord:
        return self.trace[self.best_epoch]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def discretize(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Indices of candidates whose relaxed weight reaches the threshold
    (inclusive, so p = 0 crosses at the default 0.5)."""
    return np.flatnonzero(sigmoid(np.asarray(p, dtype=np.float64)) >= threshold)


def apply_augmentation(graph: InteractionGraph,
                       edges: Sequence[tuple[int, int]]) -> InteractionGraph:
    """Materialize added edges into a new graph; synthetic interactions
    carry the corpus-final timestamp since no real time exists for them."""
    if not len(edges):
        return graph
    existing = graph.edge_set()
    for u, i in edges:
        if (u, i) in existing:
            raise ContractError(f"edge ({u}, {i}) already present in the graph")
    users = np.array([u for u, _ in edges], dtype=np.int64)
    items = np.array([i for _, i in edges], dtype=np.int64)
    times = np.full(len(edges), graph.max_timestamp, dtype=np.int64)
    return graph.with_edges(users, items, times)


def _exact_record(epoch: int, loss_terms: tuple[float, float, float],
                  model: TrainedModel, split: DatasetSplit,
                  partition: GroupPartition, relevance, edges, k: int) -> TraceRecord:
    total, fair, dist = loss_terms
    graph = apply_augmentation(split.train, edges)
    scores = model_scores(model, graph)
    rankings, _ = recommend_topn(scores, split.train, k)
    report = evaluate_rankings(rankings, relevance, k)
    g1, g2 = group_means(report, partition)
    overall = float(np.mean(list(report.per_user.values())))
    return TraceRecord(epoch=epoch, l_fair=fair, l_dist=dist, loss=total,
                       n_edges=len(edges), delta_ndcg_valid=abs(g1 - g2),
                       ndcg_valid=overall, ndcg_group1=g1, ndcg_group2=g2)


def augment(model: TrainedModel, split: DatasetSplit, partition: GroupPartition,
            candidates: CandidateEdgeSet, config: AugmentationConfig,
            k: int = 10, grad_strategy: str = "auto") -> AugmentationResult:
    """Optimize the perturbation vector against the frozen model.

    Epoch record e holds the relaxed loss at the pre-step perturbations
    and the exact validation metrics of the post-step discretized graph;
    epoch 0 is the untouched baseline. The returned graph is materialized
    at the epoch with the lowest exact validation gap (ties earliest,
    baseline included, so doing nothing always remains eligible).
    """
    config.validate()
    if not model.augmentable:
        raise ContractError(f"model kind {model.config.model_kind!r} ignores the "
                            "graph at inference; augmentation cannot affect it")
    relevance = relevance_from_graph(split.valid)
    ctx = build_eval_context(split.train, partition, relevance, k, config.tau)

    def edges_at(p: np.ndarray) -> tuple[tuple[int, int], ...]:
        idx = discretize(p, config.discretization_threshold)
        return tuple(zip(candidates.users[idx].tolist(),
                         candidates.items[idx].tolist()))

    p = np.full(len(candidates), config.p_init, dtype=np.float64)
    relaxed = RelaxedGraph(base=split.train,
                           candidate_users=candidates.users,
                           candidate_items=candidates.items,
                           weights=sigmoid(p))

    baseline = _exact_record(0, loss_value(model, relaxed, ctx, config.beta, p),
                             model, split, partition, relevance, edges_at(p), k)

    if len(candidates) == 0:
        return AugmentationResult(best_epoch=0, added_edges=(),
                                  augmented_graph=split.train, trace=(baseline,),
                                  stop_reason="empty_candidates", regressed=False)
    trace: list[TraceRecord] = [baseline]
    edges_by_epoch: list[tuple[tuple[int, int], ...]] = [edges_at(p)]

    p_t = torch.as_tensor(p).clone()
    optimizer = torch.optim.Adam([p_t], lr=config.learning_rate)
    stopper = EarlyStopper(config.early_stop_min_delta, config.early_stop_patience)
    stop_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        p_now = p_t.detach().numpy().copy()
        relaxed.weights = sigmoid(p_now)
        result = loss_and_gradient(model, relaxed, ctx, config.beta, p=p_now,
                                   strategy=grad_strategy)
        optimizer.zero_grad()
        p_t.grad = torch.as_tensor(result.gradient)
        optimizer.step()

        p_after = p_t.detach().numpy().copy()
        edges = edges_at(p_after)
        record = _exact_record(epoch, (result.loss, result.fairness_term,
                                       result.distance_term),
                               model, split, partition, relevance, edges, k)
        trace.append(record)
        edges_by_epoch.append(edges)
        if stopper.update(record.delta_ndcg_valid):
            stop_reason = "early_stop"
            break

    deltas = [r.delta_ndcg_valid for r in trace]
    best_epoch = int(np.argmin(deltas))
    best_edges = edges_by_epoch[best_epoch]
    augmented = apply_augmentation(split.train, best_edges)
    regressed = deltas[best_epoch] > deltas[0]
    return AugmentationResult(best_epoch=best_epoch, added_edges=best_edges,
                              augmented_graph=augmented, trace=tuple(trace),
                              stop_reason=stop_reason, regressed=regressed)


# ---------------------------------------------------------------------------
# persistence

_TRACE_COLUMNS = ("epoch", "l_fair", "l_dist", "loss", "n_edges",
                  "delta_ndcg_valid", "ndcg_valid", "ndcg_group1", "ndcg_group2")


def export_trace_csv(trace: Sequence[TraceRecord], path: str | Path) -> None:
    lines = [",".join(_TRACE_COLUMNS)]
    for r in trace:
        lines.append(",".join(repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                              else str(getattr(r, c)) for c in _TRACE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def export_augmentation(result: AugmentationResult, graph: InteractionGraph,
                        out_dir: str | Path,
                        provenance: Optional[Mapping[str, object]] = None) -> None:
    """Write the added edges under their original keys plus a manifest that
    makes the run re-importable for transfer experiments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["user_id\titem_id"]
    for u, i in result.added_edges:
        lines.append(f"{graph.user_ids[u]}\t{graph.item_ids[i]}")
    (out / "added_edges.tsv").write_text("\n".join(lines) + "\n")
    manifest = dict(provenance or {})
    manifest.update({
        "best_epoch": result.best_epoch,
        "stop_reason": result.stop_reason,
        "n_edges": len(result.added_edges),
        "regressed": result.regressed,
    })
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def import_augmentation(in_dir: str | Path, graph: InteractionGraph,
                        ) -> tuple[list[tuple[int, int]], dict]:
    """Read an exported augmentation back into index space."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    edges: list[tuple[int, int]] = []
    rows = (src / "added_edges.tsv").read_text().splitlines()
    for line in rows[1:]:
        if not line.strip():
            continue
        uid, iid = line.split("\t")
        edges.append((graph.user_index[uid], graph.item_index[iid]))
    return edges, manifest
