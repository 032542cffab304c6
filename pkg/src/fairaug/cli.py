"""Command-line front end.

One subcommand per pipeline stage; every run is driven by a config file
plus a few overriding flags. The CLI is the only writer to the output
directory: runners compute, handlers write reports, figures, and
re-importable artifacts.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from . import experiments as ex
from .augmenter import augment, export_augmentation, export_trace_csv
from .config import (ExperimentConfig, PolicyCell, config_hash, load_config,
                     with_overrides)
from .data import export_split
from .errors import ConfigError, ContractError, FairAugError, ParameterError
from .metrics import delta_ndcg, evaluate_rankings
from .models import (AUGMENTABLE_KINDS, ModelConfig, model_scores,
                     recommend_topn, save_checkpoint)
from .plotting import (save_benchmark_bars, save_grid_heatmap,
                       save_overlap_heatmap, save_sweep_curves, save_trace_plot)
from .policies import (build_candidates, build_samples, export_overlap_csv,
                       export_sample, policy_overlap)

logger = logging.getLogger(__name__)

_LOG_LEVELS = ("debug", "info", "warning", "error")


class _Parser(argparse.ArgumentParser):
    """Argument errors are config errors (exit 1, not argparse's 2)."""

    def error(self, message: str):
        raise ConfigError(message)


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (YAML)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--threads", type=int,
                        help="override the worker-pool size")
    common.add_argument("--log-level", choices=_LOG_LEVELS, default="warning")

    parser = _Parser(prog="fairaug",
                     description="fairness-oriented graph augmentation "
                                 "for recommender training data")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("ingest", parents=[common],
                       help="load a corpus, split it, report its shape")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train", parents=[common],
                       help="train the configured models and checkpoint them")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("augment", parents=[common],
                       help="optimize edge additions for one policy cell")
    p.add_argument("--model", help="model kind (default: first augmentable)")
    p.add_argument("--user-policy", default=None,
                   help="user sampling policy (omit for item-only scenarios)")
    p.add_argument("--item-policy", default=None,
                   help="item sampling policy (omit for user-only scenarios)")
    p.set_defaults(handler=cmd_augment)

    p = sub.add_parser("benchmark", parents=[common],
                       help="best policy cell per model, with significance")
    p.set_defaults(handler=cmd_benchmark)

    p = sub.add_parser("policy-grid", parents=[common],
                       help="test gap for every policy combination")
    p.add_argument("--model", help="model kind (default: first augmentable)")
    p.set_defaults(handler=cmd_policy_grid)

    p = sub.add_parser("psi-sweep", parents=[common],
                       help="vary one sample fraction at a time")
    p.add_argument("--model", help="model kind (default: first augmentable)")
    p.add_argument("--user-policy", default="zero_utility")
    p.add_argument("--item-policy", default="preferred")
    p.set_defaults(handler=cmd_psi_sweep)

    p = sub.add_parser("transfer", parents=[common],
                       help="re-train a non-augmentable model on an "
                            "augmented graph manifest")
    p.add_argument("--manifest", required=True,
                   help="directory written by the augment subcommand")
    p.add_argument("--target", required=True,
                   help="non-augmentable model kind (svdgcn_s or mf_bpr)")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("overlap", parents=[common],
                       help="pairwise sample overlap between policies")
    p.add_argument("--model", help="model kind (default: first augmentable)")
    p.set_defaults(handler=cmd_overlap)

    p = sub.add_parser("report", parents=[common],
                       help="re-render tables and figures from a report JSON")
    p.add_argument("source", help="machine report (.json) to render")
    p.set_defaults(handler=cmd_report)
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(f"{args.command} requires --config")
    config = load_config(args.config)
    config = with_overrides(config, seed=args.seed, output_dir=args.out,
                            threads=args.threads)
    config.validate()
    return config


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(config: ExperimentConfig) -> dict[str, Any]:
    return {"seed": config.seed, "config_hash": config_hash(config)}


def _select_model(config: ExperimentConfig, kind: Optional[str],
                  augmentable: bool = True) -> ModelConfig:
    if kind is None:
        for mc in config.models:
            if not augmentable or mc.model_kind in AUGMENTABLE_KINDS:
                return mc
        raise ContractError("no augmentable model in the config")
    for mc in config.models:
        if mc.model_kind == kind:
            if augmentable and kind not in AUGMENTABLE_KINDS:
                raise ContractError(f"{kind!r} cannot consume an augmented "
                                    "graph; pick one of "
                                    f"{sorted(AUGMENTABLE_KINDS)}")
            return mc
    configured = [mc.model_kind for mc in config.models]
    raise ParameterError(f"model {kind!r} is not configured; "
                         f"available: {configured}")


def _graph_row(name: str, graph) -> dict[str, Any]:
    return {
        "split": name,
        "interactions": int(graph.user_degrees.sum()),
        "active_users": int((graph.user_degrees > 0).sum()),
        "active_items": int((graph.item_degrees > 0).sum()),
    }


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _load(args)
    prepared = ex.prepare_data(config)
    out = _out_dir(config)
    rows = [_graph_row(name, graph) for name, graph in
            (("train", prepared.split.train), ("valid", prepared.split.valid),
             ("test", prepared.split.test))]
    part = prepared.partition
    rows.append({"split": "groups",
                 "interactions": 0,
                 "active_users": len(part.group_1) + len(part.group_2),
                 "active_items": 0,
                 "group_1": f"{part.group_names[0]}:{len(part.group_1)}",
                 "group_2": f"{part.group_names[1]}:{len(part.group_2)}"})
    export_split(prepared.split, out / "splits")
    paths = ex.emit_report(ex.TableReport(_provenance(config), rows), out,
                           "ingest")
    print(f"{prepared.split.train.n_users} users, "
          f"{prepared.split.train.n_items} items; splits under {out / 'splits'}")
    print(f"report: {paths['txt']}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    prepared = ex.prepare_data(config)
    out = _out_dir(config)
    rows = []
    for model_config in config.models:
        ctx = ex.build_model_context(config, model_config, prepared)
        checkpoint = out / "checkpoints" / f"{model_config.model_kind}.farc"
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ctx.model, checkpoint)
        advantaged = ctx.partition.group_names[ctx.partition.advantaged - 1]
        rows.append({
            "model": model_config.model_kind,
            "valid_ndcg": float(np.mean(list(ctx.base_valid.per_user.values()))),
            "valid_delta": ctx.base_valid_delta,
            "test_ndcg": float(np.mean(list(ctx.base_test.per_user.values()))),
            "test_delta": ctx.base_test_delta,
            "advantaged_group": advantaged,
            "checkpoint": str(checkpoint),
        })
        print(f"{model_config.model_kind}: valid NDCG {rows[-1]['valid_ndcg']:.4f}"
              f", gap {rows[-1]['valid_delta']:.4f} -> {checkpoint}")
    paths = ex.emit_report(ex.TableReport(_provenance(config), rows), out,
                           "train")
    print(f"report: {paths['txt']}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    config = _load(args)
    cell = PolicyCell(args.user_policy, args.item_policy)
    prepared = ex.prepare_data(config)
    model_config = _select_model(config, args.model)
    ctx = ex.build_model_context(config, model_config, prepared)
    out = _out_dir(config)

    policy_config = config.policy_config(cell)
    samples = build_samples(prepared.split.train, ctx.partition, policy_config,
                            validation_ndcg=ctx.base_valid.per_user)
    candidates = build_candidates(prepared.split.train, ctx.partition, samples,
                                  cell.scenario)
    result = augment(ctx.model, prepared.split, ctx.partition, candidates,
                     config.augmentation, k=config.k)

    export_trace_csv(result.trace, out / "trace.csv")
    save_trace_plot(result.trace, out / "trace.png", result.best_epoch)
    export_augmentation(result, prepared.split.train, out, {
        "model": model_config.model_kind,
        "policy": cell.label,
        "scenario": cell.scenario,
        **{k: str(v) for k, v in _provenance(config).items()},
    })

    scores = model_scores(ctx.model, result.augmented_graph)
    rankings, _ = recommend_topn(scores, prepared.split.train, config.k)
    test_rep = evaluate_rankings(rankings, prepared.relevance_test, config.k)
    rows = [{
        "model": model_config.model_kind,
        "policy": cell.label,
        "scenario": cell.scenario,
        "n_candidates": len(candidates),
        "n_edges": len(result.added_edges),
        "best_epoch": result.best_epoch,
        "stop_reason": result.stop_reason,
        "regressed": result.regressed,
        "base_valid_delta": ctx.base_valid_delta,
        "valid_delta": result.best_record.delta_ndcg_valid,
        "base_test_delta": ctx.base_test_delta,
        "test_delta": delta_ndcg(test_rep, ctx.partition),
    }]
    paths = ex.emit_report(ex.TableReport(_provenance(config), rows), out,
                           "augment")
    print(f"{len(result.added_edges)} edges after epoch {result.best_epoch} "
          f"({result.stop_reason}); validation gap "
          f"{ctx.base_valid_delta:.4f} -> {rows[0]['valid_delta']:.4f}")
    print(f"manifest: {out / 'manifest.json'}; report: {paths['txt']}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    config = _load(args)
    report = ex.run_benchmark(config)
    out = _out_dir(config)
    paths = ex.emit_report(report, out, "benchmark")
    save_benchmark_bars(report.rows, out / "benchmark.png")
    for kind, cell_rows in report.cells.items():
        (out / f"cells_{kind}.csv").write_text(ex.rows_to_csv(cell_rows),
                                               encoding="utf-8")
    for kind, best in report.best_cells.items():
        ex.export_cell_artifacts(best, report.train_graph,
                                 out / "manifests" / kind, config,
                                 extra={"model": kind})
    for row in report.rows:
        if row.get("status") == "ok":
            print(f"{row['model']}: gap {row['base_delta']:.4f} -> "
                  f"{row['aug_delta']:.4f} via {row['policy']} "
                  f"(p={row['wilcoxon_p']:.4f}{row['significance']})")
        else:
            print(f"{row['model']}: {row.get('note', row['status'])}")
    print(f"report: {paths['txt']}")
    return 0


def cmd_policy_grid(args: argparse.Namespace) -> int:
    config = _load(args)
    prepared = ex.prepare_data(config)
    model_config = _select_model(config, args.model)
    ctx = ex.build_model_context(config, model_config, prepared)
    report = ex.run_policy_grid(config, prepared, ctx)
    out = _out_dir(config)
    basename = f"policy_grid_{model_config.model_kind}"
    paths = ex.emit_report(report, out, basename)
    save_grid_heatmap(report, out / f"{basename}.png")
    ok = sum(r["status"] == "ok" for r in report.rows)
    print(f"{ok}/{len(report.rows)} cells ok; base gap "
          f"{report.base_test_delta:.4f}; report: {paths['txt']}")
    return 0


def cmd_psi_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    cell = PolicyCell(args.user_policy, args.item_policy)
    prepared = ex.prepare_data(config)
    model_config = _select_model(config, args.model)
    ctx = ex.build_model_context(config, model_config, prepared)
    report = ex.run_psi_sweep(config, prepared, ctx, cell)
    out = _out_dir(config)
    paths = ex.emit_report(report, out, "psi_sweep")
    save_sweep_curves(report, out / "psi_sweep.png")
    print(f"{len(report.rows)} sweep points for {cell.label}; "
          f"report: {paths['txt']}")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    config = _load(args)
    report = ex.run_transfer(config, args.manifest, args.target)
    out = _out_dir(config)
    paths = ex.emit_report(report, out, f"transfer_{args.target}")
    diff = report.rows[-1]
    print(f"{args.target} ({report.transferability}): "
          f"gap difference {diff['delta']:+.4f}, "
          f"NDCG difference {diff['ndcg']:+.4f} "
          f"after re-training with {report.n_edges} added edges")
    print(f"report: {paths['txt']}")
    return 0


def cmd_overlap(args: argparse.Namespace) -> int:
    config = _load(args)
    prepared = ex.prepare_data(config)
    model_config = _select_model(config, args.model)
    ctx = ex.build_model_context(config, model_config, prepared)
    out = _out_dir(config)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for family, policies in (("user", config.user_policies),
                             ("item", config.item_policies)):
        members: dict[str, frozenset[int]] = {}
        for name in policies:
            cell = PolicyCell(name, None) if family == "user" \
                else PolicyCell(None, name)
            sampled = build_samples(prepared.split.train, ctx.partition,
                                    config.policy_config(cell),
                                    validation_ndcg=ctx.base_valid.per_user)
            members[name] = sampled.users if family == "user" else sampled.items
            export_sample(samples_dir / f"{family}_{name}.txt", members[name],
                          dict(sampled.provenance))
        if len(members) < 2:
            continue
        names, matrix = policy_overlap(members)
        export_overlap_csv(out / f"overlap_{family}.csv", names, matrix)
        save_overlap_heatmap(names, matrix, out / f"overlap_{family}.png",
                             title=f"{family}-policy sample overlap (Jaccard)")
        for i, a in enumerate(names):
            for j in range(i + 1, len(names)):
                rows.append({"family": family, "policy_a": a,
                             "policy_b": names[j],
                             "jaccard": float(matrix[i, j])})
    paths = ex.emit_report(ex.TableReport(_provenance(config), rows), out,
                           "overlap")
    print(f"{len(rows)} policy pairs; samples under {samples_dir}; "
          f"report: {paths['txt']}")
    return 0


_REPORT_SHAPES = (
    ("cells", lambda d: ex.BenchmarkReport(d["provenance"], d["rows"],
                                           d["cells"])),
    ("base_test_delta", lambda d: ex.GridReport(d["provenance"], d["model"],
                                                d["base_test_delta"],
                                                d["rows"])),
    ("transferability", lambda d: ex.TransferReport(
        d["provenance"], d["target"], d["transferability"], d["n_edges"],
        d["rows"])),
    ("cell", lambda d: ex.SweepReport(d["provenance"], d["model"], d["cell"],
                                      d["rows"])),
)


def cmd_report(args: argparse.Namespace) -> int:
    source = Path(args.source)
    try:
        payload = json.loads(source.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read report source: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source} is not a JSON report: {exc}") from exc
    if not isinstance(payload, dict) or "rows" not in payload:
        raise ConfigError(f"{source} does not look like a report "
                          "(no 'rows' key)")
    out = Path(args.out) if args.out else source.parent
    basename = source.stem

    report: Any = None
    for marker, rebuild in _REPORT_SHAPES:
        if marker in payload:
            report = rebuild(payload)
            break
    if report is None:
        report = ex.TableReport(payload.get("provenance", {}), payload["rows"])
    paths = ex.emit_report(report, out, basename)

    figure: Optional[Path] = None
    if isinstance(report, ex.BenchmarkReport):
        figure = save_benchmark_bars(report.rows, out / f"{basename}.png")
    elif isinstance(report, ex.GridReport):
        figure = save_grid_heatmap(report, out / f"{basename}.png")
    elif isinstance(report, ex.SweepReport):
        figure = save_sweep_curves(report, out / f"{basename}.png")
    rendered = [str(paths["txt"]), str(paths["csv"])]
    if figure is not None:
        rendered.append(str(figure))
    print("rendered: " + ", ".join(rendered))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, args.log_level.upper()),
            format="%(levelname)s %(name)s: %(message)s")
        return args.handler(args)
    except FairAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
