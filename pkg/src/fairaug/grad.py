"""Derivatives of the augmentation loss with respect to the perturbation
vector p, where each candidate edge's relaxed weight is sigmoid(p_e).

The message-passing path runs reverse-mode differentiation through the
weighted propagation; the spectral path defaults to central finite
differences per candidate (the decomposition makes reverse mode fragile
near repeated singular values) with an analytic strategy available for
cross-checking and speed on well-separated spectra.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch

from .data import GroupPartition, InteractionGraph
from .errors import ContractError, GradientError, MetricError, ParameterError
from .metrics import smooth_ndcg_users
from .models import (
    RelaxedGraph,
    TrainedModel,
    lightgcn_scores_torch,
    svdgcn_augment_feedback,
    svdgcn_scores_torch,
)

_FD_STEP = 1e-4


@dataclass(frozen=True)
class GradientResult:
    """Loss decomposition and the per-candidate gradient over p."""

    loss: float
    fairness_term: float
    distance_term: float
    gradient: np.ndarray
    strategy: str


@dataclass
class SmoothEvalContext:
    """Precomputed per-user ranking pools and relevance for the smooth loss.

    Pools exclude each user's train items; users without a relevant
    held-out item are dropped from their group's mean, mirroring the exact
    metric. Built once per augmentation run and reused every epoch.
    """

    group_1_users: tuple[int, ...]
    group_2_users: tuple[int, ...]
    pools: dict[int, torch.Tensor]
    relevant: dict[int, torch.Tensor]
    k: int
    tau: float


def build_eval_context(train_graph: InteractionGraph, partition: GroupPartition,
                       relevance: Mapping[int, frozenset[int]], k: int,
                       tau: float) -> SmoothEvalContext:
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    all_items = np.arange(train_graph.n_items)
    items_by_user = train_graph.train_items_by_user()
    groups: list[tuple[int, ...]] = []
    pools: dict[int, torch.Tensor] = {}
    relevant: dict[int, torch.Tensor] = {}
    for group in partition.groups():
        kept = []
        for u in sorted(group):
            rel = relevance.get(u, frozenset())
            if not rel:
                continue
            pool = np.setdiff1d(all_items, items_by_user[u], assume_unique=True)
            if pool.size == 0:
                continue
            kept.append(u)
            pools[u] = torch.as_tensor(pool)
            relevant[u] = torch.as_tensor(np.array(sorted(rel), dtype=np.int64))
        if not kept:
            raise MetricError(
                f"a group of {partition.attribute_name} has no user with "
                "held-out relevant items")
        groups.append(tuple(kept))
    return SmoothEvalContext(groups[0], groups[1], pools, relevant, k, tau)


def _frozen_forward(model: TrainedModel, graph: InteractionGraph,
                    ) -> Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]:
    """Score function of the relaxed graph, closed over frozen parameters."""
    kind = model.config.model_kind
    if kind == "lightgcn":
        ue = torch.as_tensor(model.embeddings.user_embeddings)
        ie = torch.as_tensor(model.embeddings.item_embeddings)
        layers = model.config.layers

        def forward(cu, ci, w):
            return lightgcn_scores_torch(ue, ie, graph, layers, cu, ci, w)
        return forward
    if kind == "svdgcn":
        base_fb = torch.as_tensor(graph.feedback_matrix().toarray(), dtype=torch.float64)
        weight = torch.as_tensor(model.weight)
        cfg = model.config

        def forward(cu, ci, w):
            fb = svdgcn_augment_feedback(base_fb, cu.numpy(), ci.numpy(), w)
            return svdgcn_scores_torch(weight, fb, cfg.svd_rank, cfg.svd_alpha,
                                       cfg.zeta_gamma)
        return forward
    raise ContractError(f"model kind {kind!r} is not augmentable; "
                        "no gradient path exists")


def _loss_terms(scores: torch.Tensor, w: torch.Tensor, ctx: SmoothEvalContext,
                beta: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    mean_1 = smooth_ndcg_users(scores, ctx.pools, ctx.relevant,
                               ctx.group_1_users, ctx.k, ctx.tau).mean()
    mean_2 = smooth_ndcg_users(scores, ctx.pools, ctx.relevant,
                               ctx.group_2_users, ctx.k, ctx.tau).mean()
    fairness = (mean_1 - mean_2) ** 2
    distance = 0.5 * torch.sigmoid((w * w).sum())
    return fairness + beta * distance, fairness, distance


class _LossEvaluator:
    """Caches the frozen forward and candidate tensors across evaluations
    of the same relaxed instance (one augmentation epoch makes many)."""

    def __init__(self, model: TrainedModel, relaxed: RelaxedGraph,
                 ctx: SmoothEvalContext, beta: float):
        self.forward = _frozen_forward(model, relaxed.base)
        self.cu = torch.as_tensor(relaxed.candidate_users)
        self.ci = torch.as_tensor(relaxed.candidate_items)
        self.ctx = ctx
        self.beta = beta

    def terms(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        w = torch.sigmoid(p)
        scores = self.forward(self.cu, self.ci, w)
        total, fairness, distance = _loss_terms(scores, w, self.ctx, self.beta)
        if not torch.isfinite(total):
            raise GradientError("non-finite augmentation loss "
                                f"(fairness={float(fairness)}, distance={float(distance)})")
        return total, fairness, distance

    def value(self, p: np.ndarray) -> tuple[float, float, float]:
        with torch.no_grad():
            total, fairness, distance = self.terms(
                torch.as_tensor(p, dtype=torch.float64))
        return float(total), float(fairness), float(distance)


def loss_value(model: TrainedModel, relaxed: RelaxedGraph, ctx: SmoothEvalContext,
               beta: float, p: np.ndarray) -> tuple[float, float, float]:
    """Loss at p without any gradient bookkeeping (shared by the
    finite-difference probes and the optimizer's trace records)."""
    return _LossEvaluator(model, relaxed, ctx, beta).value(p)


def _reverse_mode_gradient(evaluator: _LossEvaluator, p: np.ndarray) -> GradientResult:
    p_t = torch.as_tensor(p, dtype=torch.float64).clone().requires_grad_()
    total, fairness, distance = evaluator.terms(p_t)
    if p_t.numel():
        total.backward()
        grad = p_t.grad.numpy().copy()
    else:
        grad = np.zeros(0, dtype=np.float64)
    if not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise GradientError(f"non-finite gradient at candidate index {bad}")
    return GradientResult(float(total.detach()), float(fairness.detach()),
                          float(distance.detach()), grad, strategy="reverse_mode")


def _finite_difference_gradient(evaluator: _LossEvaluator, p: np.ndarray,
                                h: float = _FD_STEP) -> GradientResult:
    total, fairness, distance = evaluator.value(p)
    grad = np.zeros(p.size, dtype=np.float64)
    for j in range(p.size):
        probe = p.copy()
        probe[j] = p[j] + h
        up, _, _ = evaluator.value(probe)
        probe[j] = p[j] - h
        down, _, _ = evaluator.value(probe)
        grad[j] = (up - down) / (2.0 * h)
    return GradientResult(total, fairness, distance, grad, strategy="finite_difference")


def loss_and_gradient(model: TrainedModel, relaxed: RelaxedGraph,
                      ctx: SmoothEvalContext, beta: float,
                      p: np.ndarray | None = None,
                      strategy: str = "auto") -> GradientResult:
    """Augmentation loss and its gradient over the perturbation vector.

    loss = (group smooth-NDCG gap)² + beta * 0.5 * sigmoid(sum w_e²), with
    w = sigmoid(p). When p is omitted it is recovered from the relaxed
    weights. Strategy "auto" picks reverse mode for the message-passing
    model and finite differences for the spectral one; "analytic" forces
    reverse mode through the decomposition and falls back to finite
    differences (with a warning) if the spectrum is too degenerate to
    differentiate.
    """
    if beta < 0:
        raise ParameterError(f"beta must be nonnegative, got {beta}")
    if p is None:
        w = np.clip(relaxed.weights, 1e-12, 1 - 1e-12)
        p = np.log(w / (1.0 - w))
    p = np.asarray(p, dtype=np.float64)
    if p.shape != relaxed.weights.shape:
        raise ContractError("p must align with the candidate set")

    kind = model.config.model_kind
    evaluator = _LossEvaluator(model, relaxed, ctx, beta)
    if strategy == "auto":
        strategy = "reverse_mode" if kind == "lightgcn" else "fd"
    if strategy in ("reverse_mode", "analytic"):
        try:
            return _reverse_mode_gradient(evaluator, p)
        except GradientError:
            if kind != "svdgcn":
                raise
            warnings.warn("analytic spectral gradient failed (degenerate "
                          "spectrum); falling back to finite differences",
                          RuntimeWarning, stacklevel=2)
            return _finite_difference_gradient(evaluator, p)
    if strategy == "fd":
        return _finite_difference_gradient(evaluator, p)
    raise ParameterError(f"unknown gradient strategy {strategy!r}")


def svd_path_gradient(model: TrainedModel, relaxed: RelaxedGraph,
                      ctx: SmoothEvalContext, beta: float, p: np.ndarray,
                      strategy: str = "fd") -> np.ndarray:
    """Gradient over p for the spectral model only; empty candidate sets
    yield a zero-length gradient."""
    if model.config.model_kind != "svdgcn":
        raise ContractError("svd_path_gradient requires the parametric spectral model")
    if p.size == 0:
        return np.zeros(0, dtype=np.float64)
    result = loss_and_gradient(model, relaxed, ctx, beta, p=p,
                               strategy="analytic" if strategy == "analytic" else "fd")
    return result.gradient


def singular_value_gradient(matrix: np.ndarray, index: int) -> np.ndarray:
    """d s_index / d M for a dense matrix, via reverse mode; equals the
    outer product u_index v_indexᵀ when the spectrum is simple."""
    m = torch.as_tensor(np.asarray(matrix, dtype=np.float64)).clone().requires_grad_()
    s = torch.linalg.svdvals(m)
    s[index].backward()
    return m.grad.numpy().copy()


def check_gradient(loss_and_grad_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   p: np.ndarray, h: float = _FD_STEP,
                   rel_floor: float = 1e-8) -> tuple[float, int]:
    """Compare a claimed gradient against central differences, coordinate
    by coordinate; returns (worst relative error, offending coordinate).

    The denominator is floored at ``rel_floor``: central differences of a
    loss L carry ~eps*|L|/h of cancellation noise, so coordinates whose
    true magnitude sits below that floor cannot be compared relatively —
    the floor turns them into an absolute check (any deviation above
    rel_floor * tolerance still fails) instead of amplifying rounding
    noise into spurious failures.
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    p = np.asarray(p, dtype=np.float64)
    _, grad = loss_and_grad_fn(p)
    worst, worst_at = 0.0, -1
    for j in range(p.size):
        probe = p.copy()
        probe[j] = p[j] + h
        up, _ = loss_and_grad_fn(probe)
        probe[j] = p[j] - h
        down, _ = loss_and_grad_fn(probe)
        fd = (up - down) / (2.0 * h)
        denom = max(abs(grad[j]), abs(fd), rel_floor)
        err = abs(grad[j] - fd) / denom
        if err > worst:
            worst, worst_at = err, j
    return worst, worst_at
