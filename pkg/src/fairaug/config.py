"""Experiment configuration: YAML loading, validation, canonical hashing.

A configuration file is a single structured YAML document with nested
sections (dataset, partition, models, policies, augmentation, sweep,
evaluation). Every run artifact carries the sha256 hash of the canonical
JSON rendering of the parsed config, so reports are traceable to the
exact settings that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .augmenter import AugmentationConfig
from .data import InteractionSchema
from .errors import ConfigError
from .models import ModelConfig
from .policies import ITEM_POLICIES, USER_POLICIES

PSI_USER_DEFAULT = (0.25, 0.30, 0.35, 0.40, 0.45)
PSI_ITEM_DEFAULT = (0.10, 0.15, 0.20, 0.25, 0.30)
PSI_ITEM_FIXED = 0.20
PSI_USER_FIXED = 0.35


@dataclass(frozen=True)
class PolicyCell:
    """One grid cell: a user policy, an item policy, or both."""

    user_policy: Optional[str]
    item_policy: Optional[str]

    def __post_init__(self):
        if self.user_policy is None and self.item_policy is None:
            raise ConfigError("a policy cell needs at least one policy")
        if self.user_policy is not None and self.user_policy not in USER_POLICIES:
            raise ConfigError(f"unknown user policy {self.user_policy!r}; "
                              f"expected one of {USER_POLICIES}")
        if self.item_policy is not None and self.item_policy not in ITEM_POLICIES:
            raise ConfigError(f"unknown item policy {self.item_policy!r}; "
                              f"expected one of {ITEM_POLICIES}")

    @property
    def scenario(self) -> str:
        if self.item_policy is None:
            return "user"
        if self.user_policy is None:
            return "item"
        return "user_item"

    @property
    def label(self) -> str:
        return f"{self.user_policy or 'none'}+{self.item_policy or 'none'}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Full settings for one experiment run."""

    dataset_path: str
    attribute_path: Optional[str] = None
    schema: InteractionSchema = field(default_factory=InteractionSchema)
    attribute_name: str = "gender"
    age_threshold: int = 33
    models: tuple[ModelConfig, ...] = (ModelConfig(),)
    user_policies: tuple[str, ...] = USER_POLICIES
    item_policies: tuple[str, ...] = ITEM_POLICIES
    user_fraction: float = 0.35
    item_fraction: float = 0.20
    pagerank_damping: float = 0.85
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    psi_user_sweep: tuple[float, ...] = PSI_USER_DEFAULT
    psi_item_sweep: tuple[float, ...] = PSI_ITEM_DEFAULT
    k: int = 10
    seed: int = 0
    threads: int = 1
    output_dir: str = "out"

    def validate(self) -> None:
        if not self.models:
            raise ConfigError("config needs at least one model")
        for mc in self.models:
            mc.validate()
        self.augmentation.validate()
        if not self.policy_cells():
            raise ConfigError("config needs at least one policy cell")
        for name in ("user_fraction", "item_fraction"):
            frac = getattr(self, name)
            if not 0 < frac <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {frac}")
        for name in ("psi_user_sweep", "psi_item_sweep"):
            values = getattr(self, name)
            if not values or any(not 0 < v <= 1 for v in values):
                raise ConfigError(f"{name} must be nonempty fractions in (0, 1]")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.attribute_name not in ("gender", "age"):
            raise ConfigError(f"attribute must be gender or age, "
                              f"got {self.attribute_name!r}")

    def policy_cells(self) -> tuple[PolicyCell, ...]:
        """The full grid: (user + none) x (item + none) minus (none, none)."""
        cells = []
        for up in (*self.user_policies, None):
            for ip in (*self.item_policies, None):
                if up is None and ip is None:
                    continue
                cells.append(PolicyCell(up, ip))
        return tuple(cells)

    def policy_config(self, cell: PolicyCell, *,
                      user_fraction: Optional[float] = None,
                      item_fraction: Optional[float] = None):
        from .policies import PolicyConfig
        return PolicyConfig(
            user_policy=cell.user_policy,
            item_policy=cell.item_policy,
            user_fraction=self.user_fraction if user_fraction is None else user_fraction,
            item_fraction=self.item_fraction if item_fraction is None else item_fraction,
            pagerank_damping=self.pagerank_damping)


def _section(raw: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    value = raw.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return value


def _build_dataclass(cls, data: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a YAML experiment configuration."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config {path} must be a YAML mapping")
    return config_from_mapping(raw)


def config_from_mapping(raw: Mapping[str, Any]) -> ExperimentConfig:
    dataset = _section(raw, "dataset")
    if "interactions" not in dataset:
        raise ConfigError("config needs dataset.interactions")
    schema_keys = {k: v for k, v in dataset.items()
                   if k not in ("interactions", "attributes")}
    schema = _build_dataclass(InteractionSchema, schema_keys, "dataset")

    partition = _section(raw, "partition")
    policies = dict(_section(raw, "policies"))
    user_policies = tuple(policies.pop("user", list(USER_POLICIES)) or ())
    item_policies = tuple(policies.pop("item", list(ITEM_POLICIES)) or ())

    models_raw = raw.get("models", [{}])
    if not isinstance(models_raw, list):
        raise ConfigError("config section 'models' must be a list")
    models = tuple(_build_dataclass(ModelConfig, m or {}, "models") for m in models_raw)

    augmentation = _build_dataclass(AugmentationConfig,
                                    _section(raw, "augmentation"), "augmentation")

    sweep = _section(raw, "sweep")
    evaluation = _section(raw, "evaluation")
    for name, section, known in (("partition", partition,
                                  {"attribute", "age_threshold"}),
                                 ("sweep", sweep, {"user", "item"}),
                                 ("evaluation", evaluation, {"k"})):
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")

    top_known = {"dataset", "partition", "policies", "models", "augmentation",
                 "sweep", "evaluation", "seed", "threads", "output_dir"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")

    config = ExperimentConfig(
        dataset_path=str(dataset["interactions"]),
        attribute_path=(str(dataset["attributes"])
                        if dataset.get("attributes") else None),
        schema=schema,
        attribute_name=partition.get("attribute", "gender"),
        age_threshold=int(partition.get("age_threshold", 33)),
        models=models,
        user_policies=user_policies,
        item_policies=item_policies,
        user_fraction=float(policies.pop("user_fraction", 0.35)),
        item_fraction=float(policies.pop("item_fraction", 0.20)),
        pagerank_damping=float(policies.pop("pagerank_damping", 0.85)),
        augmentation=augmentation,
        psi_user_sweep=tuple(sweep.get("user", PSI_USER_DEFAULT)),
        psi_item_sweep=tuple(sweep.get("item", PSI_ITEM_DEFAULT)),
        k=int(evaluation.get("k", 10)),
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)),
        output_dir=str(raw.get("output_dir", "out")),
    )
    if policies:
        raise ConfigError(f"unknown key(s) in policies: {sorted(policies)}")
    config.validate()
    return config


def canonical_json(config: ExperimentConfig) -> str:
    """Deterministic JSON rendering of a config (sorted keys, no spaces)."""
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    """sha256 hex digest of the canonical config JSON."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def with_overrides(config: ExperimentConfig, *, seed: Optional[int] = None,
                   output_dir: Optional[str] = None,
                   threads: Optional[int] = None) -> ExperimentConfig:
    """CLI-flag overrides applied on top of a loaded config."""
    updates: dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
        updates["models"] = tuple(replace(m, seed=seed) for m in config.models)
    if output_dir is not None:
        updates["output_dir"] = output_dir
    if threads is not None:
        updates["threads"] = threads
    return replace(config, **updates) if updates else config
