"""Dataset ingestion, filtering, temporal splitting, and graph structures.

Interactions are implicit feedback: a (user, item, timestamp) triple means
the user touched the item. All downstream structures index users and items
densely (0..n) with deterministic, sorted id maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import (
    ContractError,
    DataError,
    DegeneratePartitionError,
    EmptyCorpusError,
    MetricError,
    SchemaError,
)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: Optional[float] = None


@dataclass(frozen=True)
class UserAttributes:
    user_id: str
    gender: Optional[str] = None
    age: Optional[int] = None


@dataclass(frozen=True)
class InteractionSchema:
    """Column mapping for a delimiter-separated interaction file.

    ``columns`` names the file's columns positionally when the file has no
    header row; with ``header=True`` the file's own header is used.
    """

    user_col: str = "user_id"
    item_col: str = "item_id"
    time_col: str = "timestamp"
    rating_col: Optional[str] = None
    delimiter: str = "\t"
    header: bool = True
    columns: Optional[Sequence[str]] = None


def _read_delimited(path: str | Path, delimiter: str, header: bool,
                    columns: Optional[Sequence[str]]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction file not found: {path}")
    kwargs = dict(sep=delimiter, dtype=str, keep_default_na=False)
    if len(delimiter) > 1:
        kwargs["engine"] = "python"
    if header:
        frame = pd.read_csv(path, **kwargs)
    else:
        if columns is None:
            raise SchemaError("headerless file requires schema.columns")
        frame = pd.read_csv(path, header=None, names=list(columns), **kwargs)
    return frame


def ingest(path: str | Path, schema: InteractionSchema | None = None,
           attribute_path: str | Path | None = None,
           ) -> tuple[list[Interaction], dict[str, UserAttributes]]:
    """Read an interaction file (and optional attribute file).

    Duplicate (user, item) pairs collapse to a single interaction keeping
    the earliest timestamp. Returns interactions sorted by (user, item) and
    a per-user attribute table (empty when no attribute file is given).
    """
    schema = schema or InteractionSchema()
    frame = _read_delimited(path, schema.delimiter, schema.header, schema.columns)

    for role, col in (("user", schema.user_col), ("item", schema.item_col),
                      ("timestamp", schema.time_col)):
        if col not in frame.columns:
            raise SchemaError(f"schema names {role} column {col!r} but the file has "
                              f"columns {list(frame.columns)}")

    times = pd.to_numeric(frame[schema.time_col], errors="coerce")
    bad = times.isna() | (times < 0)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        line = row + (2 if schema.header else 1)
        raise DataError(f"unparseable or negative timestamp at line {line}: "
                        f"{frame[schema.time_col].iloc[row]!r}")

    tidy = pd.DataFrame({
        "user_id": frame[schema.user_col].astype(str),
        "item_id": frame[schema.item_col].astype(str),
        "timestamp": times.astype(np.int64),
    })
    if schema.rating_col is not None and schema.rating_col in frame.columns:
        tidy["rating"] = pd.to_numeric(frame[schema.rating_col], errors="coerce")
    else:
        tidy["rating"] = np.nan

    tidy = tidy.sort_values(["user_id", "item_id", "timestamp"], kind="stable")
    tidy = tidy.drop_duplicates(["user_id", "item_id"], keep="first")

    interactions = [
        Interaction(u, i, int(t), None if pd.isna(r) else float(r))
        for u, i, t, r in zip(tidy["user_id"], tidy["item_id"],
                              tidy["timestamp"], tidy["rating"])
    ]

    attributes: dict[str, UserAttributes] = {}
    if attribute_path is not None:
        attributes = ingest_attributes(attribute_path, delimiter=schema.delimiter)
    return interactions, attributes


def ingest_attributes(path: str | Path, delimiter: str = "\t") -> dict[str, UserAttributes]:
    """Read a per-user attribute file with columns user_id, gender, age."""
    frame = _read_delimited(path, delimiter, header=True, columns=None)
    if "user_id" not in frame.columns:
        raise SchemaError("attribute file must carry a user_id column")
    out: dict[str, UserAttributes] = {}
    for _, row in frame.iterrows():
        gender = row.get("gender", "") or None
        age_raw = row.get("age", "")
        age = None
        if age_raw not in ("", None):
            try:
                age = int(float(age_raw))
            except ValueError as exc:
                raise DataError(f"unparseable age {age_raw!r} for user {row['user_id']}") from exc
        out[str(row["user_id"])] = UserAttributes(str(row["user_id"]), gender, age)
    return out


def k_core_filter(interactions: Sequence[Interaction], k_user: int,
                  k_item: Optional[int] = None) -> list[Interaction]:
    """Drop users with degree < k_user (and items < k_item when given).

    User-only filtering reaches its fixpoint in one pass: removing a user
    never lowers another user's degree. With k_item set, user and item
    removal alternate until both constraints hold.
    """
    if k_user < 1:
        raise ContractError(f"k_user must be >= 1, got {k_user}")
    kept = list(interactions)
    while True:
        user_deg: dict[str, int] = {}
        item_deg: dict[str, int] = {}
        for it in kept:
            user_deg[it.user_id] = user_deg.get(it.user_id, 0) + 1
            item_deg[it.item_id] = item_deg.get(it.item_id, 0) + 1
        survivors = [
            it for it in kept
            if user_deg[it.user_id] >= k_user
            and (k_item is None or item_deg[it.item_id] >= k_item)
        ]
        if len(survivors) == len(kept):
            break
        kept = survivors
        if k_item is None:
            break
    if not kept:
        raise EmptyCorpusError(f"k-core filtering (k_user={k_user}, k_item={k_item}) "
                               "removed every interaction")
    return kept


@dataclass
class InteractionGraph:
    """Bipartite user-item graph over dense index spaces.

    Edges are stored as aligned arrays sorted lexicographically by
    (user_idx, item_idx). The feedback matrix, degrees, and edge set are
    derived lazily and cached; instances are treated as immutable.
    """

    n_users: int
    n_items: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    edge_users: np.ndarray
    edge_items: np.ndarray
    edge_times: Optional[np.ndarray] = None

    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.edge_users = np.asarray(self.edge_users, dtype=np.int64)
        self.edge_items = np.asarray(self.edge_items, dtype=np.int64)
        if self.edge_times is not None:
            self.edge_times = np.asarray(self.edge_times, dtype=np.int64)
        order = np.lexsort((self.edge_items, self.edge_users))
        self.edge_users = self.edge_users[order]
        self.edge_items = self.edge_items[order]
        if self.edge_times is not None:
            self.edge_times = self.edge_times[order]
        if self.edge_users.size:
            if self.edge_users.min() < 0 or self.edge_users.max() >= self.n_users:
                raise ContractError("edge user index out of range")
            if self.edge_items.min() < 0 or self.edge_items.max() >= self.n_items:
                raise ContractError("edge item index out of range")

    @property
    def n_edges(self) -> int:
        return int(self.edge_users.size)

    @property
    def user_index(self) -> dict[str, int]:
        if "user_index" not in self._cache:
            self._cache["user_index"] = {k: i for i, k in enumerate(self.user_ids)}
        return self._cache["user_index"]

    @property
    def item_index(self) -> dict[str, int]:
        if "item_index" not in self._cache:
            self._cache["item_index"] = {k: i for i, k in enumerate(self.item_ids)}
        return self._cache["item_index"]

    @property
    def user_degrees(self) -> np.ndarray:
        if "user_degrees" not in self._cache:
            self._cache["user_degrees"] = np.bincount(self.edge_users, minlength=self.n_users)
        return self._cache["user_degrees"]

    @property
    def item_degrees(self) -> np.ndarray:
        if "item_degrees" not in self._cache:
            self._cache["item_degrees"] = np.bincount(self.edge_items, minlength=self.n_items)
        return self._cache["item_degrees"]

    def feedback_matrix(self) -> sp.csr_matrix:
        """Implicit feedback matrix with a 1 per interaction."""
        if "feedback" not in self._cache:
            mat = sp.csr_matrix(
                (np.ones(self.n_edges, dtype=np.float64),
                 (self.edge_users, self.edge_items)),
                shape=(self.n_users, self.n_items))
            self._cache["feedback"] = mat
        return self._cache["feedback"]

    def edge_set(self) -> frozenset[tuple[int, int]]:
        if "edge_set" not in self._cache:
            self._cache["edge_set"] = frozenset(
                zip(self.edge_users.tolist(), self.edge_items.tolist()))
        return self._cache["edge_set"]

    def train_items_by_user(self) -> list[np.ndarray]:
        """Per-user sorted arrays of interacted item indices."""
        if "items_by_user" not in self._cache:
            order = np.argsort(self.edge_users, kind="stable")
            split_at = np.searchsorted(self.edge_users[order], np.arange(1, self.n_users))
            groups = np.split(self.edge_items[order], split_at)
            self._cache["items_by_user"] = [np.sort(g) for g in groups]
        return self._cache["items_by_user"]

    @property
    def max_timestamp(self) -> int:
        if self.edge_times is None or self.edge_times.size == 0:
            return 0
        return int(self.edge_times.max())

    def with_edges(self, new_users: np.ndarray, new_items: np.ndarray,
                   new_times: np.ndarray) -> "InteractionGraph":
        """Copy of the graph with extra edges appended."""
        times = None
        if self.edge_times is not None:
            times = np.concatenate([self.edge_times, np.asarray(new_times, dtype=np.int64)])
        return InteractionGraph(
            n_users=self.n_users, n_items=self.n_items,
            user_ids=self.user_ids, item_ids=self.item_ids,
            edge_users=np.concatenate([self.edge_users, np.asarray(new_users, dtype=np.int64)]),
            edge_items=np.concatenate([self.edge_items, np.asarray(new_items, dtype=np.int64)]),
            edge_times=times)


def build_adjacency(graph: InteractionGraph) -> sp.csr_matrix:
    """Symmetric (n_users+n_items)-square adjacency with zero diagonal blocks."""
    r = graph.feedback_matrix()
    n = graph.n_users + graph.n_items
    upper = sp.hstack([sp.csr_matrix((graph.n_users, graph.n_users)), r])
    lower = sp.hstack([r.T.tocsr(), sp.csr_matrix((graph.n_items, graph.n_items))])
    return sp.vstack([upper, lower]).tocsr().astype(np.float64)


@dataclass(frozen=True)
class DatasetSplit:
    """Train/valid/test graphs over one shared index space."""

    train: InteractionGraph
    valid: InteractionGraph
    test: InteractionGraph


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def temporal_split(interactions: Sequence[Interaction],
                   ratios: tuple[float, float, float] = (7.0, 1.0, 2.0)) -> DatasetSplit:
    """Per-user chronological split at the given train:valid:test ratio.

    Each user's interactions are ordered by (timestamp, item index); the
    newest max(1, round(test_frac*n)) go to test, the preceding
    max(1, round(valid_frac*n)) to valid, the rest to train.
    """
    total = float(sum(ratios))
    valid_frac, test_frac = ratios[1] / total, ratios[2] / total

    user_keys = sorted({it.user_id for it in interactions})
    item_keys = sorted({it.item_id for it in interactions})
    user_index = {k: i for i, k in enumerate(user_keys)}
    item_index = {k: i for i, k in enumerate(item_keys)}

    per_user: list[list[tuple[int, int]]] = [[] for _ in user_keys]
    for it in interactions:
        per_user[user_index[it.user_id]].append((it.timestamp, item_index[it.item_id]))

    buckets = {"train": ([], [], []), "valid": ([], [], []), "test": ([], [], [])}
    for u, rows in enumerate(per_user):
        n = len(rows)
        if n < 3:
            raise DataError(f"user {user_keys[u]!r} has {n} interactions; "
                            "temporal split needs at least 3")
        rows.sort()
        n_test = max(1, _round_half_up(test_frac * n))
        n_valid = max(1, _round_half_up(valid_frac * n))
        n_train = n - n_valid - n_test
        if n_train < 1:
            raise DataError(f"user {user_keys[u]!r}: split leaves no training interactions")
        parts = {"train": rows[:n_train],
                 "valid": rows[n_train:n_train + n_valid],
                 "test": rows[n_train + n_valid:]}
        for name, chunk in parts.items():
            us, its, ts = buckets[name]
            for t, i in chunk:
                us.append(u)
                its.append(i)
                ts.append(t)

    def make(name: str) -> InteractionGraph:
        us, its, ts = buckets[name]
        return InteractionGraph(
            n_users=len(user_keys), n_items=len(item_keys),
            user_ids=tuple(user_keys), item_ids=tuple(item_keys),
            edge_users=np.array(us, dtype=np.int64),
            edge_items=np.array(its, dtype=np.int64),
            edge_times=np.array(ts, dtype=np.int64))

    return DatasetSplit(train=make("train"), valid=make("valid"), test=make("test"))


@dataclass(frozen=True)
class GroupPartition:
    """Binary demographic split over user indices.

    ``advantaged`` is 1 or 2 once labeled from validation utilities, None
    before. Users absent from both groups carry no attribute and stay out
    of fairness accounting.
    """

    attribute_name: str
    group_names: tuple[str, str]
    group_1: frozenset[int]
    group_2: frozenset[int]
    advantaged: Optional[int] = None

    def __post_init__(self):
        if self.group_1 & self.group_2:
            raise ContractError("partition groups must be disjoint")

    @property
    def labeled(self) -> bool:
        return self.advantaged is not None

    @property
    def advantaged_users(self) -> frozenset[int]:
        if self.advantaged is None:
            raise ContractError("partition has no advantage label yet")
        return self.group_1 if self.advantaged == 1 else self.group_2

    @property
    def disadvantaged_users(self) -> frozenset[int]:
        if self.advantaged is None:
            raise ContractError("partition has no advantage label yet")
        return self.group_2 if self.advantaged == 1 else self.group_1

    def groups(self) -> tuple[frozenset[int], frozenset[int]]:
        return self.group_1, self.group_2


def partition_users(graph: InteractionGraph, attributes: Mapping[str, UserAttributes],
                    attribute_name: str, age_threshold: int = 33) -> GroupPartition:
    """Split the graph's users on a binary attribute; advantage label unset.

    Age is binarized at the threshold (younger: age <= threshold). Users
    without the attribute land in neither group.
    """
    if attribute_name == "age":
        younger, older = set(), set()
        for key, idx in graph.user_index.items():
            rec = attributes.get(key)
            if rec is None or rec.age is None:
                continue
            (younger if rec.age <= age_threshold else older).add(idx)
        if not younger or not older:
            raise DegeneratePartitionError(
                f"age attribute is single-valued at threshold {age_threshold}")
        return GroupPartition("age", ("younger", "older"),
                              frozenset(younger), frozenset(older))

    if attribute_name == "gender":
        by_label: dict[str, set[int]] = {}
        for key, idx in graph.user_index.items():
            rec = attributes.get(key)
            if rec is None or rec.gender is None:
                continue
            by_label.setdefault(rec.gender, set()).add(idx)
        labels = sorted(by_label)
        if len(labels) < 2:
            raise DegeneratePartitionError(
                f"gender attribute has {len(labels)} represented value(s); need 2")
        if len(labels) > 2:
            raise DataError(f"gender attribute is not binary: {labels}")
        return GroupPartition("gender", (labels[0], labels[1]),
                              frozenset(by_label[labels[0]]),
                              frozenset(by_label[labels[1]]))

    raise ContractError(f"unknown attribute {attribute_name!r}; expected gender or age")


def label_advantage(partition: GroupPartition,
                    per_user_ndcg: Mapping[int, float]) -> GroupPartition:
    """Mark the group with the higher mean validation utility as advantaged.

    Ties break toward group 1. Only users present in the utility map count;
    each group must contribute at least one.
    """
    means = []
    for group in partition.groups():
        vals = [per_user_ndcg[u] for u in group if u in per_user_ndcg]
        if not vals:
            raise MetricError(f"group of {partition.attribute_name} has no evaluated users")
        means.append(float(np.mean(vals)))
    advantaged = 1 if means[0] >= means[1] else 2
    return replace(partition, advantaged=advantaged)


def export_split(split: DatasetSplit, out_dir: str | Path) -> None:
    """Write train/valid/test edge files plus the id maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        graph: InteractionGraph = getattr(split, name)
        frame = pd.DataFrame({
            "user_idx": graph.edge_users,
            "item_idx": graph.edge_items,
            "timestamp": graph.edge_times,
        })
        frame.to_csv(out / f"{name}.tsv", sep="\t", index=False)
    pd.DataFrame({"user_idx": range(split.train.n_users),
                  "user_id": split.train.user_ids}).to_csv(
        out / "users.tsv", sep="\t", index=False)
    pd.DataFrame({"item_idx": range(split.train.n_items),
                  "item_id": split.train.item_ids}).to_csv(
        out / "items.tsv", sep="\t", index=False)


def import_split(in_dir: str | Path) -> DatasetSplit:
    """Re-read a split written by :func:`export_split`, bit-exact."""
    src = Path(in_dir)
    users = pd.read_csv(src / "users.tsv", sep="\t", dtype={"user_id": str})
    items = pd.read_csv(src / "items.tsv", sep="\t", dtype={"item_id": str})
    user_ids = tuple(users.sort_values("user_idx")["user_id"])
    item_ids = tuple(items.sort_values("item_idx")["item_id"])

    def load(name: str) -> InteractionGraph:
        frame = pd.read_csv(src / f"{name}.tsv", sep="\t")
        return InteractionGraph(
            n_users=len(user_ids), n_items=len(item_ids),
            user_ids=user_ids, item_ids=item_ids,
            edge_users=frame["user_idx"].to_numpy(np.int64),
            edge_items=frame["item_idx"].to_numpy(np.int64),
            edge_times=frame["timestamp"].to_numpy(np.int64))

    return DatasetSplit(train=load("train"), valid=load("valid"), test=load("test"))
