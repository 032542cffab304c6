"""Synthetic corpora with controllable group bias.

The planted-bias corpus wires a known unfairness into the data: two user
groups prefer disjoint item blocks, and the smaller group's held-out
(validation/test) items are nearly absent from the training graph, so any
collaborative model scores them poorly and a wide group utility gap opens
up. Because those cold items sit in a small shared pool, connecting
zero-utility users to them closes the gap — which is exactly the headroom
the augmentation optimizer is supposed to find.

The neutral corpus draws both groups from identical distributions and
should show no material gap to mitigate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

# item blocks of the planted corpus (150 items)
MAJORITY_BLOCK = range(0, 60)        # dense block preferred by the majority group
MINORITY_BLOCK = range(60, 100)      # dense block preferred by the minority group
COLD_BLOCK = range(100, 115)         # minority held-out items, absent from train
BACKGROUND_BLOCK = range(115, 150)   # shared noise items


@dataclass(frozen=True)
class CorpusPaths:
    interactions: Path
    attributes: Path


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / (np.arange(n) + 1.0)
    return w / w.sum()


def _write_corpus(out_dir: str | Path, rows: list[tuple[str, str, int]],
                  users: list[tuple[str, str, int]]) -> CorpusPaths:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter_path = out / "interactions.tsv"
    attr_path = out / "attributes.tsv"
    pd.DataFrame(rows, columns=["user_id", "item_id", "timestamp"]).to_csv(
        inter_path, sep="\t", index=False)
    pd.DataFrame(users, columns=["user_id", "gender", "age"]).to_csv(
        attr_path, sep="\t", index=False)
    return CorpusPaths(interactions=inter_path, attributes=attr_path)


def planted_bias_corpus(out_dir: str | Path, seed: int = 7,
                        n_majority: int = 120, n_minority: int = 80,
                        ) -> CorpusPaths:
    """200 users (120 'M' majority / 80 'F' minority), 150 items.

    Majority users live entirely in their dense block: train, validation,
    and test items all come from it, so their held-out items carry strong
    collaborative signal. Minority users train densely inside their own
    block (seeing most of its popular items, which thins out their unseen
    competition), while every one of their held-out items comes from the
    small shared cold block that no training interaction ever touches.
    Per-user timestamps increase in generation order, so the chronological
    split reproduces the designed train/validation/test assignment
    exactly: majority users hold 15 interactions (10/2/3), minority users
    20 (14/2/4).
    """
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, str, int]] = []
    users: list[tuple[str, str, int]] = []
    item_ids = [f"i{j:04d}" for j in range(150)]

    majority_items = np.array(list(MAJORITY_BLOCK))
    minority_items = np.array(list(MINORITY_BLOCK))
    cold_items = np.array(list(COLD_BLOCK))
    background = np.array(list(BACKGROUND_BLOCK))

    for idx in range(n_majority + n_minority):
        uid = f"u{idx:04d}"
        is_majority = idx < n_majority
        if is_majority:
            users.append((uid, "M", int(rng.integers(34, 61))))
            picks = rng.choice(majority_items, size=12, replace=False,
                               p=_zipf_weights(majority_items.size))
            train = list(picks[:7]) + list(rng.choice(background, 3, replace=False))
            held = list(picks[7:])
        else:
            users.append((uid, "F", int(rng.integers(18, 34))))
            core = rng.choice(minority_items, size=12, replace=False,
                              p=_zipf_weights(minority_items.size))
            train = list(core) + list(rng.choice(background, 2, replace=False))
            held = list(rng.choice(cold_items, size=6, replace=False))
        ts = 0
        for item in train:
            rows.append((uid, item_ids[item], ts))
            ts += 1
        for item in held:
            rows.append((uid, item_ids[item], ts))
            ts += 1
    return _write_corpus(out_dir, rows, users)


def neutral_corpus(out_dir: str | Path, seed: int = 11,
                   n_per_group: int = 30, n_items: int = 80) -> CorpusPaths:
    """Both groups sample train and held-out items from one shared
    popularity distribution; no systematic gap exists."""
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, str, int]] = []
    users: list[tuple[str, str, int]] = []
    item_ids = [f"i{j:04d}" for j in range(n_items)]
    weights = _zipf_weights(n_items)

    for idx in range(2 * n_per_group):
        uid = f"u{idx:04d}"
        gender = "M" if idx < n_per_group else "F"
        age = int(rng.integers(18, 61))
        users.append((uid, gender, age))
        picks = rng.choice(n_items, size=15, replace=False, p=weights)
        for ts, item in enumerate(picks):
            rows.append((uid, item_ids[int(item)], ts))
    return _write_corpus(out_dir, rows, users)
