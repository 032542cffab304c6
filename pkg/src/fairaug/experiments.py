"""Experiment orchestration: benchmark, policy grid, Ψ sweeps, transfer.

Each runner produces a report object with uniform rows; ``emit_report``
writes the machine JSON (canonical key order, byte-identical across
identical runs), an aligned text table, and a plot-ready CSV. Every
artifact carries run provenance: the seed and the config hash.

Selection discipline: policies and epochs are chosen on validation data
only; test data enters evaluation exclusively.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .augmenter import (AugmentationResult, apply_augmentation, augment,
                        export_augmentation, export_trace_csv, import_augmentation)
from .config import ExperimentConfig, PolicyCell, config_hash
from .data import (DatasetSplit, GroupPartition, InteractionGraph, UserAttributes,
                   ingest, label_advantage, partition_users, temporal_split)
from .errors import (ContractError, EmptyCandidatesError, FairAugError,
                     MetricError, ParameterError, PolicyUnavailableError)
from .metrics import (UtilityReport, delta_ndcg, evaluate_rankings, group_means,
                      relevance_from_graph, significance_marker,
                      wilcoxon_signed_rank)
from .models import (AUGMENTABLE_KINDS, MODEL_KINDS, ModelConfig, TrainedModel,
                     model_scores, recommend_topn, train)
from .policies import build_candidates, build_samples

logger = logging.getLogger(__name__)

TRANSFER_LABELS = {"svdgcn_s": "weak", "mf_bpr": "strong"}


# ---------------------------------------------------------------------------
# shared pipeline stages


@dataclass(frozen=True)
class PreparedData:
    """Ingested corpus: split graphs, raw partition, relevance tables."""

    split: DatasetSplit
    attributes: Mapping[str, UserAttributes]
    partition: GroupPartition
    relevance_valid: Mapping[int, frozenset[int]]
    relevance_test: Mapping[int, frozenset[int]]


def prepare_data(config: ExperimentConfig) -> PreparedData:
    interactions, attributes = ingest(config.dataset_path, config.schema,
                                      config.attribute_path)
    split = temporal_split(interactions)
    partition = partition_users(split.train, attributes, config.attribute_name,
                                config.age_threshold)
    return PreparedData(
        split=split,
        attributes=attributes,
        partition=partition,
        relevance_valid=relevance_from_graph(split.valid),
        relevance_test=relevance_from_graph(split.test))


@dataclass(frozen=True)
class ModelContext:
    """A trained model with its advantage-labeled partition and base metrics.

    Advantage is labeled from this model's own validation utilities (it is
    model-dependent), so each model carries its own partition copy.
    """

    model_config: ModelConfig
    model: TrainedModel
    partition: GroupPartition
    base_valid: UtilityReport
    base_test: UtilityReport

    @property
    def base_valid_delta(self) -> float:
        return delta_ndcg(self.base_valid, self.partition)

    @property
    def base_test_delta(self) -> float:
        return delta_ndcg(self.base_test, self.partition)


def build_model_context(config: ExperimentConfig, model_config: ModelConfig,
                        prepared: PreparedData) -> ModelContext:
    model = train(prepared.split, model_config)
    scores = model_scores(model, prepared.split.train)
    rankings, _ = recommend_topn(scores, prepared.split.train, config.k)
    base_valid = evaluate_rankings(rankings, prepared.relevance_valid, config.k)
    partition = label_advantage(prepared.partition, base_valid.per_user)
    base_test = evaluate_rankings(rankings, prepared.relevance_test, config.k)
    return ModelContext(model_config=model_config, model=model,
                        partition=partition, base_valid=base_valid,
                        base_test=base_test)


@dataclass
class CellResult:
    """Outcome of one augmentation run (one policy-grid cell)."""

    cell: PolicyCell
    status: str = "ok"                   # ok | skipped | failed
    error: str = ""
    n_candidates: int = 0
    n_edges: int = 0
    best_epoch: int = -1
    stop_reason: str = ""
    regressed: bool = False
    valid_delta: float = float("nan")
    valid_ndcg: float = float("nan")
    test_delta: float = float("nan")
    test_ndcg: float = float("nan")
    test_group_disadvantaged: float = float("nan")
    test_group_advantaged: float = float("nan")
    augmentation: Optional[AugmentationResult] = field(default=None, repr=False)
    test_per_user: Mapping[int, float] = field(default_factory=dict, repr=False)

    def row(self) -> dict[str, Any]:
        return {
            "user_policy": self.cell.user_policy or "none",
            "item_policy": self.cell.item_policy or "none",
            "scenario": self.cell.scenario,
            "status": self.status,
            "error": self.error,
            "n_candidates": self.n_candidates,
            "n_edges": self.n_edges,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "regressed": self.regressed,
            "valid_delta": self.valid_delta,
            "valid_ndcg": self.valid_ndcg,
            "test_delta": self.test_delta,
            "test_ndcg": self.test_ndcg,
        }


def _evaluate_graph(ctx: ModelContext, prepared: PreparedData,
                    graph: InteractionGraph, k: int,
                    ) -> tuple[UtilityReport, UtilityReport]:
    """Exact valid/test reports for a (possibly augmented) train graph.

    Rankings mask the original train items only; synthetic edges are not
    real consumption and must stay rankable.
    """
    scores = model_scores(ctx.model, graph)
    rankings, _ = recommend_topn(scores, prepared.split.train, k)
    return (evaluate_rankings(rankings, prepared.relevance_valid, k),
            evaluate_rankings(rankings, prepared.relevance_test, k))


def run_cell(config: ExperimentConfig, prepared: PreparedData, ctx: ModelContext,
             cell: PolicyCell, *, user_fraction: Optional[float] = None,
             item_fraction: Optional[float] = None) -> CellResult:
    """One policy cell end to end: sample, candidates, optimize, evaluate.

    Sampling or candidate exhaustion marks the cell skipped; any other
    package error marks it failed. Both leave the surrounding run alive.
    """
    result = CellResult(cell=cell)
    try:
        policy_config = config.policy_config(cell, user_fraction=user_fraction,
                                             item_fraction=item_fraction)
        samples = build_samples(prepared.split.train, ctx.partition, policy_config,
                                validation_ndcg=ctx.base_valid.per_user)
        candidates = build_candidates(prepared.split.train, ctx.partition,
                                      samples, cell.scenario)
        result.n_candidates = len(candidates)
        outcome = augment(ctx.model, prepared.split, ctx.partition, candidates,
                          config.augmentation, k=config.k)
    except (EmptyCandidatesError, PolicyUnavailableError) as exc:
        result.status = "skipped"
        result.error = str(exc)
        return result
    except FairAugError as exc:
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
        return result

    best = outcome.best_record
    valid_rep, test_rep = _evaluate_graph(ctx, prepared, outcome.augmented_graph,
                                          config.k)
    disadvantaged, advantaged = _oriented_means(test_rep, ctx.partition)
    result.n_edges = len(outcome.added_edges)
    result.best_epoch = outcome.best_epoch
    result.stop_reason = outcome.stop_reason
    result.regressed = outcome.regressed
    result.valid_delta = best.delta_ndcg_valid
    result.valid_ndcg = best.ndcg_valid
    result.test_delta = delta_ndcg(test_rep, ctx.partition)
    result.test_ndcg = float(np.mean(list(test_rep.per_user.values())))
    result.test_group_disadvantaged = disadvantaged
    result.test_group_advantaged = advantaged
    result.augmentation = outcome
    result.test_per_user = test_rep.per_user
    return result


def _oriented_means(report: UtilityReport, partition: GroupPartition,
                    ) -> tuple[float, float]:
    """(disadvantaged, advantaged) group means."""
    m1, m2 = group_means(report, partition)
    return (m2, m1) if partition.advantaged == 1 else (m1, m2)


def _run_cells(config: ExperimentConfig, prepared: PreparedData,
               ctx: ModelContext, cells: Sequence[PolicyCell]) -> list[CellResult]:
    """Execute cells in a bounded worker pool, merged in input order."""
    if config.threads <= 1 or len(cells) <= 1:
        return [run_cell(config, prepared, ctx, cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        futures = [pool.submit(run_cell, config, prepared, ctx, cell)
                   for cell in cells]
        return [f.result() for f in futures]


@dataclass
class TableReport:
    """Generic provenance-stamped row table for auxiliary summaries."""

    provenance: dict[str, Any]
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"provenance": self.provenance, "rows": self.rows}


# ---------------------------------------------------------------------------
# RQ1: benchmark


@dataclass
class BenchmarkReport:
    provenance: dict[str, Any]
    rows: list[dict[str, Any]]
    cells: dict[str, list[dict[str, Any]]]
    # per-model winning cell and the train graph it indexes into, kept out
    # of serialization so the caller can export a re-importable manifest
    # next to the report
    best_cells: dict[str, CellResult] = field(default_factory=dict, repr=False)
    train_graph: Optional[InteractionGraph] = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"provenance": self.provenance, "rows": self.rows,
                "cells": self.cells}


def run_benchmark(config: ExperimentConfig) -> BenchmarkReport:
    """Train every augmentable model, run all policy cells, report the
    per-model best cell (lowest validation gap) on the test split with a
    paired significance test on per-user test utility."""
    config.validate()
    prepared = prepare_data(config)
    provenance = {"seed": config.seed, "config_hash": config_hash(config)}
    rows: list[dict[str, Any]] = []
    cell_rows: dict[str, list[dict[str, Any]]] = {}
    best_cells: dict[str, CellResult] = {}

    for model_config in config.models:
        kind = model_config.model_kind
        if kind not in AUGMENTABLE_KINDS:
            rows.append({"model": kind, "status": "skipped",
                         "note": "model cannot consume an augmented graph "
                                 "at inference; use the transfer runner"})
            continue
        ctx = build_model_context(config, model_config, prepared)
        results = _run_cells(config, prepared, ctx, config.policy_cells())
        cell_rows[kind] = [r.row() for r in results]

        usable = [r for r in results if r.status == "ok"]
        row: dict[str, Any] = {
            "model": kind,
            "status": "ok",
            "attribute": config.attribute_name,
            "base_ndcg": float(np.mean(list(ctx.base_test.per_user.values()))),
            "base_delta": ctx.base_test_delta,
            "base_valid_delta": ctx.base_valid_delta,
        }
        if not usable:
            row["status"] = "no_usable_cell"
            rows.append(row)
            continue
        best = min(usable, key=lambda r: (r.valid_delta, r.cell.label))
        best_cells[kind] = best
        shared = sorted(set(ctx.base_test.per_user) & set(best.test_per_user))
        try:
            w_statistic, p_value = wilcoxon_signed_rank(
                [best.test_per_user[u] for u in shared],
                [ctx.base_test.per_user[u] for u in shared])
        except MetricError:
            # identical per-user utilities: no evidence of a difference
            w_statistic, p_value = float("nan"), 1.0
        row.update({
            "policy": best.cell.label,
            "scenario": best.cell.scenario,
            "aug_ndcg": best.test_ndcg,
            "aug_delta": best.test_delta,
            "aug_valid_delta": best.valid_delta,
            "n_edges": best.n_edges,
            "best_epoch": best.best_epoch,
            "delta_improved": bool(best.test_delta < ctx.base_test_delta),
            "ndcg_non_degraded": bool(
                best.test_ndcg >= row["base_ndcg"] - 1e-12),
            "regressed": best.regressed,
            "wilcoxon_w": w_statistic,
            "wilcoxon_p": p_value,
            "significance": significance_marker(p_value),
        })
        rows.append(row)
    return BenchmarkReport(provenance=provenance, rows=rows, cells=cell_rows,
                           best_cells=best_cells,
                           train_graph=prepared.split.train)


# ---------------------------------------------------------------------------
# RQ2: policy grid


@dataclass
class GridReport:
    provenance: dict[str, Any]
    model: str
    base_test_delta: float
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"provenance": self.provenance, "model": self.model,
                "base_test_delta": self.base_test_delta, "rows": self.rows}

    def matrix(self) -> tuple[list[str], list[str], np.ndarray]:
        """(user labels, item labels, test-gap matrix; NaN where not ok).

        Axis order follows the run order (policies as configured, "none"
        last); the (none, none) corner holds the unaugmented base gap.
        """
        users: list[str] = []
        items: list[str] = []
        for r in self.rows:
            if r["user_policy"] not in users:
                users.append(r["user_policy"])
            if r["item_policy"] not in items:
                items.append(r["item_policy"])
        for axis in (users, items):
            if "none" in axis:
                axis.append(axis.pop(axis.index("none")))
        grid = np.full((len(users), len(items)), np.nan)
        for r in self.rows:
            if r["status"] == "ok":
                grid[users.index(r["user_policy"]),
                     items.index(r["item_policy"])] = r["test_delta"]
        if "none" in users and "none" in items:
            grid[users.index("none"), items.index("none")] = self.base_test_delta
        return users, items, grid


def run_policy_grid(config: ExperimentConfig, prepared: PreparedData,
                    ctx: ModelContext) -> GridReport:
    """Every (user policy + none) x (item policy + none) cell except the
    empty one, each reported as the exact test gap after augmentation."""
    results = _run_cells(config, prepared, ctx, config.policy_cells())
    return GridReport(
        provenance={"seed": config.seed, "config_hash": config_hash(config),
                    "model": ctx.model_config.model_kind},
        model=ctx.model_config.model_kind,
        base_test_delta=ctx.base_test_delta,
        rows=[r.row() for r in results])


# ---------------------------------------------------------------------------
# RQ3: Ψ sweep


@dataclass
class SweepReport:
    provenance: dict[str, Any]
    model: str
    cell: str
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"provenance": self.provenance, "model": self.model,
                "cell": self.cell, "rows": self.rows}


def run_psi_sweep(config: ExperimentConfig, prepared: PreparedData,
                  ctx: ModelContext, cell: PolicyCell) -> SweepReport:
    """Two curve families: vary the user fraction at the configured fixed
    item fraction, then vary the item fraction at the fixed user fraction.
    One parameter moves at a time."""
    if cell.user_policy is None or cell.item_policy is None:
        raise ContractError("the sweep varies both fractions; the policy cell "
                            "must combine a user and an item policy")
    rows: list[dict[str, Any]] = []

    def sweep(family: str, values: Sequence[float]) -> None:
        for psi in values:
            user_frac = psi if family == "user" else config.user_fraction
            item_frac = psi if family == "item" else config.item_fraction
            result = run_cell(config, prepared, ctx, cell,
                              user_fraction=user_frac, item_fraction=item_frac)
            row = result.row()
            row.update({"family": family, "psi": psi,
                        "user_fraction": user_frac, "item_fraction": item_frac})
            rows.append(row)

    sweep("user", config.psi_user_sweep)
    sweep("item", config.psi_item_sweep)
    return SweepReport(
        provenance={"seed": config.seed, "config_hash": config_hash(config),
                    "model": ctx.model_config.model_kind},
        model=ctx.model_config.model_kind,
        cell=cell.label,
        rows=rows)


# ---------------------------------------------------------------------------
# RQ4: transfer


@dataclass
class TransferReport:
    provenance: dict[str, Any]
    target: str
    transferability: str
    n_edges: int
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"provenance": self.provenance, "target": self.target,
                "transferability": self.transferability,
                "n_edges": self.n_edges, "rows": self.rows}


def _target_model_config(config: ExperimentConfig, target_kind: str) -> ModelConfig:
    for mc in config.models:
        if mc.model_kind == target_kind:
            return mc
    return replace(config.models[0], model_kind=target_kind)


def run_transfer(config: ExperimentConfig, manifest_dir: str | Path,
                 target_kind: str) -> TransferReport:
    """Retrain a non-augmentable model on the base and the augmented train
    graph under the identical config and seed; report both readings.

    Transfer is defined for models that do not consume the graph at
    inference: a weak target re-trains a non-augmentable graph model, a
    strong target a non-graph model.
    """
    if target_kind not in MODEL_KINDS:
        raise ParameterError(f"unknown model kind {target_kind!r}; "
                             f"expected one of {MODEL_KINDS}")
    if target_kind in AUGMENTABLE_KINDS:
        raise ContractError(
            f"transfer target must be non-augmentable, got {target_kind!r}: "
            "an augmentable model would consume the graph directly")
    config.validate()
    prepared = prepare_data(config)
    edges, manifest = import_augmentation(manifest_dir, prepared.split.train)
    augmented_train = apply_augmentation(prepared.split.train, edges)
    augmented_split = replace(prepared.split, train=augmented_train)

    model_config = _target_model_config(config, target_kind)
    rows: list[dict[str, Any]] = []
    partition: Optional[GroupPartition] = None
    for variant, split in (("base", prepared.split), ("augmented", augmented_split)):
        model = train(split, model_config)
        scores = model_scores(model, split.train)
        # original train mask for both variants: synthetic edges are not
        # real consumption, and both variants must rank the same pool
        rankings, _ = recommend_topn(scores, prepared.split.train, config.k)
        valid_rep = evaluate_rankings(rankings, prepared.relevance_valid, config.k)
        if partition is None:
            partition = label_advantage(prepared.partition, valid_rep.per_user)
        test_rep = evaluate_rankings(rankings, prepared.relevance_test, config.k)
        rows.append({
            "variant": variant,
            "ndcg": float(np.mean(list(test_rep.per_user.values()))),
            "delta": delta_ndcg(test_rep, partition),
            "valid_delta": delta_ndcg(valid_rep, partition),
        })
    rows.append({
        "variant": "difference",
        "ndcg": rows[1]["ndcg"] - rows[0]["ndcg"],
        "delta": rows[1]["delta"] - rows[0]["delta"],
        "valid_delta": rows[1]["valid_delta"] - rows[0]["valid_delta"],
    })
    return TransferReport(
        provenance={"seed": config.seed, "config_hash": config_hash(config),
                    "manifest": {k: manifest[k] for k in sorted(manifest)}},
        target=target_kind,
        transferability=TRANSFER_LABELS[target_kind],
        n_edges=len(edges),
        rows=rows)


# ---------------------------------------------------------------------------
# report emission


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return "nan" if value != value else f"{value:.6f}"
    return str(value)


def rows_to_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    if not rows:
        return "\n"
    header: list[str] = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, restval="", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _format_value(v) for k, v in row.items()})
    return buf.getvalue()


def _rows_to_text(title: str, rows: Sequence[Mapping[str, Any]],
                  provenance: Mapping[str, Any]) -> str:
    lines = [title, "=" * len(title)]
    for key in sorted(provenance):
        lines.append(f"{key}: {provenance[key]}")
    lines.append("")
    if rows:
        header: list[str] = []
        for row in rows:
            for key in row:
                if key not in header:
                    header.append(key)
        table = [[_format_value(row.get(col, "")) for col in header]
                 for row in rows]
        widths = [max(len(col), *(len(line[i]) for line in table))
                  for i, col in enumerate(header)]
        lines.append("  ".join(col.ljust(w) for col, w in zip(header, widths)))
        for line in table:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)))
    lines.append("")
    return "\n".join(lines)


def emit_report(report: Any, out_dir: str | Path, basename: str,
                ) -> dict[str, Path]:
    """Write <basename>.json / .csv / .txt under the output directory.

    The JSON is canonical (sorted keys, fixed separators) so identical
    results are byte-identical; the CSV is one observation per row with an
    explicit header; the text file is an aligned human-readable table.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    paths = {
        "json": out / f"{basename}.json",
        "csv": out / f"{basename}.csv",
        "txt": out / f"{basename}.txt",
    }
    paths["json"].write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=_json_default)
        + "\n", encoding="utf-8")
    rows = payload.get("rows", [])
    paths["csv"].write_text(rows_to_csv(rows), encoding="utf-8")
    paths["txt"].write_text(
        _rows_to_text(basename.replace("_", " "), rows,
                      payload.get("provenance", {})), encoding="utf-8")
    return paths


def export_cell_artifacts(result: CellResult, graph: InteractionGraph,
                          out_dir: str | Path, config: ExperimentConfig,
                          extra: Optional[Mapping[str, Any]] = None) -> None:
    """Trace CSV + re-importable augmentation manifest for one ok cell."""
    if result.augmentation is None:
        raise ContractError("cell has no augmentation result to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_trace_csv(result.augmentation.trace, out / "trace.csv")
    provenance: dict[str, Any] = {
        "policy": result.cell.label,
        "scenario": result.cell.scenario,
        "user_fraction": config.user_fraction,
        "item_fraction": config.item_fraction,
        "seed": config.seed,
        "config_hash": config_hash(config),
    }
    if extra:
        provenance.update(extra)
    export_augmentation(result.augmentation, graph, out, provenance)
