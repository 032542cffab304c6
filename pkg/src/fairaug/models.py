"""Desk-scale recommenders: a message-passing model (LightGCN-style), a
spectral pair (parametric and non-parametric SVD models), and a plain
matrix-factorization baseline, all trained with pairwise BPR.

Every model exposes a frozen-parameter forward pass; the message-passing
and parametric spectral models also accept a relaxed graph whose candidate
edges carry continuous weights, which is what makes them augmentable.
Numerics run in float64 on CPU throughout.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .data import DatasetSplit, InteractionGraph
from .errors import (
    ContractError,
    DataError,
    NumericError,
    ParameterError,
    TrainingError,
)
from .metrics import evaluate_rankings, relevance_from_graph

MODEL_KINDS = ("lightgcn", "svdgcn", "svdgcn_s", "mf_bpr")
AUGMENTABLE_KINDS = ("lightgcn", "svdgcn")

_BATCH_SIZE = 1024
_SPECTRAL_GAP_TOL = 1e-8
_FULL_SVD_LIMIT = 512


@dataclass(frozen=True)
class ModelConfig:
    model_kind: str = "lightgcn"
    embedding_size: int = 64
    layers: int = 3
    negatives_per_positive: int = 10
    train_epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    svd_rank: int = 64
    svd_alpha: float = 1.0
    zeta_gamma: float = 1.0

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ParameterError(f"unknown model_kind {self.model_kind!r}; "
                                 f"expected one of {MODEL_KINDS}")
        for name in ("embedding_size", "negatives_per_positive", "train_epochs",
                     "svd_rank"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0:
            raise ParameterError(f"layers must be >= 0, got {self.layers}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.svd_alpha < 0:
            raise ParameterError(f"svd_alpha must be nonnegative, got {self.svd_alpha}")

    @property
    def augmentable(self) -> bool:
        return self.model_kind in AUGMENTABLE_KINDS


@dataclass
class EmbeddingTable:
    """Dense user/item representations; spectral models store their
    singular-vector features here."""

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray

    def __post_init__(self):
        self.user_embeddings = np.asarray(self.user_embeddings, dtype=np.float64)
        self.item_embeddings = np.asarray(self.item_embeddings, dtype=np.float64)
        if not (np.isfinite(self.user_embeddings).all()
                and np.isfinite(self.item_embeddings).all()):
            raise NumericError("embedding table contains non-finite entries")

    @property
    def d(self) -> int:
        return self.user_embeddings.shape[1]


@dataclass
class TrainedModel:
    """Frozen parameters plus the validation curve that selected them."""

    config: ModelConfig
    embeddings: EmbeddingTable
    weight: Optional[np.ndarray]
    best_epoch: int
    validation_curve: tuple[float, ...]

    @property
    def augmentable(self) -> bool:
        return self.config.augmentable


@dataclass
class RelaxedGraph:
    """A base graph plus candidate edges at continuous weights.

    Candidates sit in a fixed positional order; weight w_e in (0, 1) is the
    relaxed state of candidate e, and weight 1 must reproduce the forward
    over the graph with that edge materialized.
    """

    base: InteractionGraph
    candidate_users: np.ndarray
    candidate_items: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.candidate_users = np.asarray(self.candidate_users, dtype=np.int64)
        self.candidate_items = np.asarray(self.candidate_items, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not (self.candidate_users.shape == self.candidate_items.shape
                == self.weights.shape):
            raise ContractError("candidate arrays must align positionally")
        existing = self.base.edge_set()
        for u, i in zip(self.candidate_users.tolist(), self.candidate_items.tolist()):
            if (u, i) in existing:
                raise ContractError(f"candidate edge ({u}, {i}) already exists in the graph")

    @property
    def n_candidates(self) -> int:
        return int(self.weights.size)


# ---------------------------------------------------------------------------
# forwards (torch core, numpy facade)


def _tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(arr, dtype=torch.float64)


def lightgcn_scores_torch(user_emb: torch.Tensor, item_emb: torch.Tensor,
                          graph: InteractionGraph, layers: int,
                          cand_users: Optional[torch.Tensor] = None,
                          cand_items: Optional[torch.Tensor] = None,
                          cand_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Degree-normalized propagation with optional weighted candidate edges.

    Candidate weights enter both the messages and the degrees, so the
    forward is differentiable in them and coincides with the materialized
    graph at weight 1. Zero weighted degree disables a node's propagation
    instead of dividing by zero.
    """
    edge_u = torch.as_tensor(graph.edge_users)
    edge_i = torch.as_tensor(graph.edge_items)
    base_du = torch.as_tensor(graph.user_degrees, dtype=torch.float64)
    base_di = torch.as_tensor(graph.item_degrees, dtype=torch.float64)

    if cand_weights is not None and cand_weights.numel():
        deg_u = base_du.index_add(0, cand_users, cand_weights)
        deg_i = base_di.index_add(0, cand_items, cand_weights)
        all_u = torch.cat([edge_u, cand_users])
        all_i = torch.cat([edge_i, cand_items])
        edge_w = torch.cat([torch.ones(edge_u.numel(), dtype=torch.float64),
                            cand_weights])
    else:
        deg_u, deg_i = base_du, base_di
        all_u, all_i = edge_u, edge_i
        edge_w = torch.ones(edge_u.numel(), dtype=torch.float64)

    prod = deg_u[all_u] * deg_i[all_i]
    safe = torch.where(prod > 0, prod, torch.ones_like(prod))
    coef = edge_w * torch.where(prod > 0, safe.rsqrt(), torch.zeros_like(prod))

    xu, xi = user_emb, item_emb
    acc_u, acc_i = user_emb, item_emb
    for _ in range(layers):
        next_u = torch.zeros_like(xu).index_add(0, all_u, coef.unsqueeze(1) * xi[all_i])
        next_i = torch.zeros_like(xi).index_add(0, all_i, coef.unsqueeze(1) * xu[all_u])
        xu, xi = next_u, next_i
        acc_u = acc_u + xu
        acc_i = acc_i + xi
    final_u = acc_u / (layers + 1)
    final_i = acc_i / (layers + 1)
    return final_u @ final_i.T


def _svd_sign_fix(u: torch.Tensor, vh: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Fix each singular pair's sign so the largest-|entry| left component
    is positive; makes the decomposition deterministic across runs."""
    idx = torch.argmax(torch.abs(u), dim=0)
    picked = u[idx, torch.arange(u.shape[1])]
    signs = torch.where(picked < 0, -torch.ones_like(picked), torch.ones_like(picked))
    return u * signs, vh * signs.unsqueeze(1)


def _subspace_iteration_svd(mat: torch.Tensor, k: int, tol: float = 1e-10,
                            max_iter: int = 5000) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Top-k SVD by orthogonal (subspace) iteration on mat matᵀ."""
    gen = torch.Generator().manual_seed(0)
    q = torch.linalg.qr(torch.randn(mat.shape[0], k, dtype=mat.dtype, generator=gen))[0]
    prev = None
    for _ in range(max_iter):
        q, _ = torch.linalg.qr(mat @ (mat.T @ q))
        s = torch.linalg.norm(mat.T @ q, dim=0)
        s = torch.sort(s, descending=True).values
        if prev is not None and float(torch.max(torch.abs(s - prev))) < tol:
            break
        prev = s
    else:
        raise NumericError(f"subspace iteration did not converge in {max_iter} steps")
    small_u, s, vh = torch.linalg.svd(q.T @ mat, full_matrices=False)
    return q @ small_u, s, vh


def truncated_svd(mat: torch.Tensor, k: int,
                  force_iterative: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Deterministic top-k SVD: full decomposition at desk scale, subspace
    iteration beyond it. Warns when the spectrum is nearly degenerate at
    the truncation boundary (gradients through the factors are then
    unreliable)."""
    if k > min(mat.shape):
        raise ParameterError(f"svd rank {k} exceeds min matrix dimension {min(mat.shape)}")
    if force_iterative or min(mat.shape) >= _FULL_SVD_LIMIT:
        u, s, vh = _subspace_iteration_svd(mat, min(k + 1, min(mat.shape)))
    else:
        u, s, vh = torch.linalg.svd(mat, full_matrices=False)
    if k < s.numel() and float(s[k - 1].detach() - s[k].detach()) < _SPECTRAL_GAP_TOL:
        warnings.warn(
            f"singular values {k} and {k + 1} are within {_SPECTRAL_GAP_TOL}; "
            "gradients through the truncated factors may be invalid",
            RuntimeWarning, stacklevel=2)
    u, vh = _svd_sign_fix(u[:, :k], vh[:k, :])
    return u, s[:k], vh


def _inv_sqrt_degrees(deg: torch.Tensor, alpha: float) -> torch.Tensor:
    shifted = deg + alpha
    safe = torch.where(shifted > 0, shifted, torch.ones_like(shifted))
    return torch.where(shifted > 0, safe.rsqrt(), torch.zeros_like(shifted))


def renormalize_feedback(feedback: torch.Tensor, alpha: float) -> torch.Tensor:
    """Degree renormalization (D_U + alpha I)^{-1/2} R (D_I + alpha I)^{-1/2};
    degrees are row/column sums of the (possibly weighted) feedback."""
    du = _inv_sqrt_degrees(feedback.sum(dim=1), alpha)
    di = _inv_sqrt_degrees(feedback.sum(dim=0), alpha)
    return du.unsqueeze(1) * feedback * di.unsqueeze(0)


def spectral_features(feedback: torch.Tensor, k: int, alpha: float, gamma: float,
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """User/item features: top-k singular vectors of the renormalized
    feedback, each dimension scaled by exp(gamma * singular value)."""
    normed = renormalize_feedback(feedback, alpha)
    u, s, vh = truncated_svd(normed, k)
    scale = torch.exp(gamma * s)
    return u * scale.unsqueeze(0), vh.T * scale.unsqueeze(0)


def svdgcn_scores_torch(weight: Optional[torch.Tensor], feedback: torch.Tensor,
                        k: int, alpha: float, gamma: float) -> torch.Tensor:
    """Scores of the spectral models from a (possibly relaxed) feedback
    matrix; ``weight`` is the k×d projection of the parametric variant,
    None for the non-parametric one."""
    feat_u, feat_i = spectral_features(feedback, k, alpha, gamma)
    if weight is None:
        return feat_u @ feat_i.T
    return (feat_u @ weight) @ (feat_i @ weight).T


def svdgcn_augment_feedback(feedback: torch.Tensor,
                            cand_users: np.ndarray, cand_items: np.ndarray,
                            weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Feedback matrix with candidate entries set to 1 (discrete) or to
    their relaxed weights. Candidates must not already be interactions."""
    cu = torch.as_tensor(np.asarray(cand_users, dtype=np.int64))
    ci = torch.as_tensor(np.asarray(cand_items, dtype=np.int64))
    if cu.numel() and bool((feedback[cu, ci] != 0).any()):
        raise ContractError("an added edge already exists in the feedback matrix")
    if weights is None:
        weights = torch.ones(cu.numel(), dtype=feedback.dtype)
    return feedback.index_put((cu, ci), weights)


def _graph_feedback_tensor(graph: InteractionGraph) -> torch.Tensor:
    return _tensor(graph.feedback_matrix().toarray())


def lightgcn_forward(model: TrainedModel,
                     graph: Union[InteractionGraph, RelaxedGraph]) -> np.ndarray:
    """Frozen-parameter propagation scores over a plain or relaxed graph."""
    if model.config.model_kind != "lightgcn":
        raise ContractError(f"lightgcn_forward on model kind {model.config.model_kind!r}")
    ue = _tensor(model.embeddings.user_embeddings)
    ie = _tensor(model.embeddings.item_embeddings)
    with torch.no_grad():
        if isinstance(graph, RelaxedGraph):
            scores = lightgcn_scores_torch(
                ue, ie, graph.base, model.config.layers,
                torch.as_tensor(graph.candidate_users),
                torch.as_tensor(graph.candidate_items),
                _tensor(graph.weights))
        else:
            scores = lightgcn_scores_torch(ue, ie, graph, model.config.layers)
    return scores.numpy()


def svdgcn_forward(model: TrainedModel, feedback: torch.Tensor) -> np.ndarray:
    """Spectral scores recomputed from the given feedback matrix
    (parametric variant only; the non-parametric one keeps its
    train-time features and never re-reads the graph)."""
    if model.config.model_kind != "svdgcn":
        raise ContractError(f"svdgcn_forward on model kind {model.config.model_kind!r}")
    cfg = model.config
    with torch.no_grad():
        scores = svdgcn_scores_torch(_tensor(model.weight), feedback,
                                     cfg.svd_rank, cfg.svd_alpha, cfg.zeta_gamma)
    return scores.numpy()


def mf_forward(model: TrainedModel) -> np.ndarray:
    """Plain dot-product scores; graph-independent at inference."""
    return model.embeddings.user_embeddings @ model.embeddings.item_embeddings.T


def model_scores(model: TrainedModel,
                 graph: Union[InteractionGraph, RelaxedGraph]) -> np.ndarray:
    """Single dispatch point: scores of any model kind over a graph.

    Non-augmentable kinds ignore the graph (their forward never reads it);
    passing a relaxed graph to one is a contract violation.
    """
    kind = model.config.model_kind
    if kind == "lightgcn":
        return lightgcn_forward(model, graph)
    if isinstance(graph, RelaxedGraph) and kind != "svdgcn":
        raise ContractError(f"model kind {kind!r} cannot consume a relaxed graph")
    if kind == "svdgcn":
        if isinstance(graph, RelaxedGraph):
            base = _graph_feedback_tensor(graph.base)
            fb = svdgcn_augment_feedback(base, graph.candidate_users,
                                         graph.candidate_items, _tensor(graph.weights))
        else:
            fb = _graph_feedback_tensor(graph)
        return svdgcn_forward(model, fb)
    if kind == "svdgcn_s":
        return model.embeddings.user_embeddings @ model.embeddings.item_embeddings.T
    if kind == "mf_bpr":
        return mf_forward(model)
    raise ContractError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# top-n generation


def recommend_topn(scores: np.ndarray, train_graph: InteractionGraph,
                   n: int) -> tuple[dict[int, list[int]], frozenset[int]]:
    """Per-user ranked lists: score descending, train items masked, ties by
    item index ascending, truncated to n. Users whose unseen-item count
    falls short of n get shorter lists and are returned in the flag set."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    n_users, n_items = scores.shape
    items_by_user = train_graph.train_items_by_user()
    rankings: dict[int, list[int]] = {}
    short: set[int] = set()
    order_tiebreak = np.arange(n_items)
    for u in range(n_users):
        masked = scores[u].copy()
        seen = items_by_user[u]
        masked[seen] = -np.inf
        order = np.lexsort((order_tiebreak, -masked))
        available = n_items - seen.size
        take = min(n, available)
        rankings[u] = order[:take].tolist()
        if available < n:
            short.add(u)
    return rankings, frozenset(short)


# ---------------------------------------------------------------------------
# training


def _sample_negatives(rng: np.random.Generator, users: np.ndarray,
                      interacted: np.ndarray, n_items: int,
                      per_positive: int) -> np.ndarray:
    """Uniform negatives per positive, excluding each user's train items."""
    negs = rng.integers(0, n_items, size=(users.size, per_positive))
    for _ in range(200):
        clash = interacted[users[:, None], negs]
        if not clash.any():
            return negs
        redraw = rng.integers(0, n_items, size=int(clash.sum()))
        negs[clash] = redraw
    raise TrainingError("negative sampling failed to avoid train items; "
                        "a user may have interacted with nearly every item")


def _mean_validation_ndcg(scores: np.ndarray, split: DatasetSplit, k: int = 10) -> float:
    rankings, _ = recommend_topn(scores, split.train, k)
    report = evaluate_rankings(rankings, relevance_from_graph(split.valid), k)
    if not report.per_user:
        raise TrainingError("no validation user has a relevant item")
    return float(np.mean(list(report.per_user.values())))


def train(split: DatasetSplit, config: ModelConfig) -> TrainedModel:
    """Fit a model on the train graph with pairwise BPR and keep the
    parameters from the epoch with the best mean validation NDCG@10.

    The non-parametric spectral model has nothing to fit: its features are
    computed once from the train graph and frozen, with a single
    validation evaluation recorded.
    """
    config.validate()
    graph = split.train
    kind = config.model_kind

    if kind == "svdgcn_s":
        with torch.no_grad():
            feat_u, feat_i = spectral_features(
                _graph_feedback_tensor(graph), config.svd_rank,
                config.svd_alpha, config.zeta_gamma)
        table = EmbeddingTable(feat_u.numpy(), feat_i.numpy())
        score = _mean_validation_ndcg(table.user_embeddings @ table.item_embeddings.T, split)
        return TrainedModel(config, table, None, best_epoch=1, validation_curve=(score,))

    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    if kind == "svdgcn":
        with torch.no_grad():
            feat_u, feat_i = spectral_features(
                _graph_feedback_tensor(graph), config.svd_rank,
                config.svd_alpha, config.zeta_gamma)
        weight = (torch.randn(config.svd_rank, config.embedding_size,
                              dtype=torch.float64, generator=gen) * 0.1).requires_grad_()
        params = [weight]

        def forward_embeddings():
            return feat_u @ weight, feat_i @ weight
    else:
        user_emb = (torch.randn(graph.n_users, config.embedding_size,
                                dtype=torch.float64, generator=gen) * 0.1).requires_grad_()
        item_emb = (torch.randn(graph.n_items, config.embedding_size,
                                dtype=torch.float64, generator=gen) * 0.1).requires_grad_()
        params = [user_emb, item_emb]

        if kind == "mf_bpr":
            def forward_embeddings():
                return user_emb, item_emb
        else:
            def forward_embeddings():
                scores = lightgcn_scores_torch(user_emb, item_emb, graph, config.layers)
                return scores, None

    interacted = np.zeros((graph.n_users, graph.n_items), dtype=bool)
    interacted[graph.edge_users, graph.edge_items] = True
    pos_users = graph.edge_users
    pos_items = graph.edge_items

    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    curve: list[float] = []
    best_score = -np.inf
    best_epoch = 0
    best_state: list[torch.Tensor] = [p.detach().clone() for p in params]

    def full_scores() -> np.ndarray:
        with torch.no_grad():
            out = forward_embeddings()
            if kind == "lightgcn":
                return out[0].numpy()
            ue, ie = out
            return (ue @ ie.T).numpy()

    for epoch in range(1, config.train_epochs + 1):
        perm = rng.permutation(pos_users.size)
        negs = _sample_negatives(rng, pos_users[perm], interacted, graph.n_items,
                                 config.negatives_per_positive)
        for start in range(0, perm.size, _BATCH_SIZE):
            sel = perm[start:start + _BATCH_SIZE]
            bu = torch.as_tensor(pos_users[sel])
            bi = torch.as_tensor(pos_items[sel])
            bn = torch.as_tensor(negs[start:start + _BATCH_SIZE])

            out = forward_embeddings()
            if kind == "lightgcn":
                all_scores = out[0]
                pos_scores = all_scores[bu, bi]
                neg_scores = all_scores[bu.unsqueeze(1), bn]
            else:
                ue, ie = out
                pos_scores = (ue[bu] * ie[bi]).sum(dim=1)
                neg_scores = (ue[bu].unsqueeze(1) * ie[bn]).sum(dim=2)

            loss = -torch.nn.functional.logsigmoid(
                pos_scores.unsqueeze(1) - neg_scores).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite BPR loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        score = _mean_validation_ndcg(full_scores(), split)
        curve.append(score)
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_state = [p.detach().clone() for p in params]

    if kind == "svdgcn":
        table = EmbeddingTable(feat_u.numpy(), feat_i.numpy())
        weight_np = best_state[0].numpy()
    else:
        table = EmbeddingTable(best_state[0].numpy(), best_state[1].numpy())
        weight_np = None
    return TrainedModel(config, table, weight_np, best_epoch, tuple(curve))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"FARC"
_VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(MODEL_KINDS)}


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Binary checkpoint: versioned header, then row-major float64 payloads."""
    cfg = model.config
    table = model.embeddings
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    parts.append(struct.pack(
        "<BIIIqddIId", _KIND_CODES[cfg.model_kind], cfg.embedding_size, cfg.layers,
        cfg.svd_rank, cfg.seed, cfg.svd_alpha, cfg.zeta_gamma,
        cfg.negatives_per_positive, cfg.train_epochs, cfg.learning_rate))
    parts.append(struct.pack("<II", model.best_epoch, len(model.validation_curve)))
    parts.append(np.asarray(model.validation_curve, dtype=np.float64).tobytes())
    for arr in (table.user_embeddings, table.item_embeddings):
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    if model.weight is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BII", 1, *model.weight.shape))
        parts.append(np.ascontiguousarray(model.weight).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> TrainedModel:
    """Reload a checkpoint bit-exactly; rejects foreign or stale files."""
    buf = Path(path).read_bytes()
    off = 0

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    def take_array(rows: int, cols: int) -> np.ndarray:
        nonlocal off
        count = rows * cols
        arr = np.frombuffer(buf, dtype=np.float64, count=count, offset=off).copy()
        off += count * 8
        return arr.reshape(rows, cols)

    if buf[:4] != _MAGIC:
        raise DataError(f"not a model checkpoint: {path}")
    off = 4
    (version,) = take("<I")
    if version != _VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    kind_code, d, layers, k, seed, alpha, gamma, negs, epochs, lr = take("<BIIIqddIId")
    kinds = {v: ky for ky, v in _KIND_CODES.items()}
    config = ModelConfig(model_kind=kinds[kind_code], embedding_size=d, layers=layers,
                         negatives_per_positive=negs, train_epochs=epochs,
                         learning_rate=lr, seed=seed, svd_rank=k, svd_alpha=alpha,
                         zeta_gamma=gamma)
    best_epoch, curve_len = take("<II")
    curve = np.frombuffer(buf, dtype=np.float64, count=curve_len, offset=off)
    off += curve_len * 8
    user_emb = take_array(*take("<II"))
    item_emb = take_array(*take("<II"))
    (has_weight,) = take("<B")
    weight = take_array(*take("<II")) if has_weight else None
    return TrainedModel(config, EmbeddingTable(user_emb, item_emb), weight,
                        best_epoch, tuple(curve.tolist()))
