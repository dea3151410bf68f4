"""The sixteen auxiliary targets: scaled percentile ranks and shifted labels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import AU_NAMES, PROSODY_NAMES, Corpus, TaskKind

SHIFTS = (-1, -2, -3, -4, 1, 2, 3, 4)
RANK_COLUMNS = AU_NAMES + PROSODY_NAMES
SHIFT_COLUMNS = tuple(f"y[t{k:+d}]" for k in SHIFTS)
AUX_COLUMNS = RANK_COLUMNS + SHIFT_COLUMNS
N_AUX = len(AUX_COLUMNS)
FAMILIES = {
    "actions": tuple(range(0, 4)),
    "prosody": tuple(range(4, 8)),
    "historical": tuple(range(8, 12)),
    "future": tuple(range(12, 16)),
}


@dataclass(frozen=True)
class RankMap:
    """Sorted train values of one feature."""

    values: np.ndarray

    @property
    def n(self) -> int:
        return int(self.values.size)


def fit_rank(train_values: Sequence[float]) -> RankMap:
    values = np.sort(np.asarray(train_values, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise ValueError("fit_rank needs at least one train value")
    if not np.all(np.isfinite(values)):
        raise ValueError("fit_rank: non-finite train value")
    return RankMap(values)


def apply_rank(rm: RankMap, x):
    """Fraction of train values <= x (vectorised over ``x``)."""
    out = np.searchsorted(rm.values, np.asarray(x, dtype=np.float64), side="right") / rm.n
    return float(out) if np.ndim(out) == 0 else out


def scale_to_primary(rank, task: TaskKind):
    """Affine map of a rank in [0, 1] onto the primary task's target range."""
    r = np.asarray(rank, dtype=np.float64)
    if np.any((r < 0) | (r > 1)):
        raise ValueError("rank must lie in [0, 1]")
    lo, hi = task.target_range
    out = lo + r * (hi - lo)
    return float(out) if np.ndim(out) == 0 else out


def shifted_label(labels: Sequence, i: int, k: int):
    """Label of talkturn ``clamp(i + k, 1, n)``; ``i`` is 1-based."""
    n = len(labels)
    if n == 0:
        raise ValueError("empty conversation")
    if not 1 <= i <= n:
        raise IndexError(f"turn index {i} out of range 1..{n}")
    if k == 0 or abs(k) > 4:
        raise ValueError("shift must be in -4..-1 or 1..4")
    return labels[min(max(i + k, 1), n) - 1]


class PercentileRankScaler(TransformerMixin, BaseEstimator):
    """Column-wise percentile rank against the fitted sample, scaled to a range.

    ``fit`` should only ever see train-partition rows.
    """

    def __init__(self, target_range=(0.0, 1.0)):
        self.target_range = target_range

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.rank_maps_ = [fit_rank(X[:, j]) for j in range(X.shape[1])]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "rank_maps_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        lo, hi = self.target_range
        ranks = np.column_stack([apply_rank(rm, X[:, j]) for j, rm in enumerate(self.rank_maps_)])
        return lo + ranks * (hi - lo)


@dataclass
class AuxTargetTable:
    """Per-talkturn auxiliary targets keyed by (conversation id, turn index)."""

    keys: list[tuple[str, int]]
    values: np.ndarray
    kinds: tuple[TaskKind, ...]
    columns: tuple[str, ...] = AUX_COLUMNS

    def __post_init__(self):
        self._row = {k: i for i, k in enumerate(self.keys)}

    def row(self, conversation_id: str, turn_index: int) -> np.ndarray:
        return self.values[self._row[(conversation_id, turn_index)]]

    def rows(self, keys: Sequence[tuple[str, int]]) -> np.ndarray:
        return self.values[[self._row[k] for k in keys]]

    def to_jsonl(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"columns": list(self.columns), "kinds": [str(k) for k in self.kinds]}) + "\n")
            for (cid, ti), vals in zip(self.keys, self.values):
                rec = {"conversation_id": cid, "turn_index": ti}
                rec.update({c: float(v) for c, v in zip(self.columns, vals)})
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "AuxTargetTable":
        with open(Path(path), encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            columns = tuple(header["columns"])
            kinds = tuple(TaskKind.parse(k) for k in header["kinds"])
            keys, rows = [], []
            for line in fh:
                rec = json.loads(line)
                keys.append((rec["conversation_id"], int(rec["turn_index"])))
                rows.append([rec[c] for c in columns])
        return cls(keys, np.asarray(rows, dtype=np.float64).reshape(-1, len(columns)), kinds, columns)


def _features(corpus: Corpus, partition: str | None) -> np.ndarray:
    turns = corpus.turns(partition)
    return np.asarray([t.au + t.prosody for t in turns], dtype=np.float64).reshape(-1, 8)


def build_aux_table(corpus: Corpus, task: TaskKind | None = None) -> AuxTargetTable:
    """Rank columns fitted on the train partition; shifted-label columns with clamping.

    Without a partition assignment every talkturn counts as train.
    """
    task = task or corpus.task
    train_part = "train" if corpus.partitions else None
    train_feats = _features(corpus, train_part)
    if train_feats.shape[0] == 0:
        raise ValueError("no train talkturns to fit percentile ranks on")
    scaler = PercentileRankScaler(task.target_range).fit(train_feats)
    keys = [(t.conversation_id, t.turn_index) for t in corpus.turns()]
    all_feats = _features(corpus, None)
    ranks = scaler.transform(all_feats) if all_feats.size else np.zeros((0, 8))
    shifted = []
    for conv in corpus.conversations:
        labels = conv.labels
        for i in range(1, len(conv) + 1):
            shifted.append([shifted_label(labels, i, k) for k in SHIFTS])
    values = np.hstack([ranks, np.asarray(shifted, dtype=np.float64).reshape(-1, 8)])
    rank_kind = TaskKind.regression(*task.target_range)
    kinds = (rank_kind,) * 8 + (task,) * 8
    return AuxTargetTable(keys, values, kinds)
