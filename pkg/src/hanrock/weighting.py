"""Mutual information between auxiliary targets and the primary label, and loss weights."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .aux_targets import AUX_COLUMNS, N_AUX, AuxTargetTable
from .corpus import Corpus, TaskKind

SCHEMES = ("random", "linear-mi", "softmax-mi")
W_PRIMARY_RANGE = (0.50, 0.99)


def _prepare(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    sd = v.std()
    if sd > 0:
        v = (v - v.mean()) / sd
    # deterministic tie breaking: order-preserving jitter
    rank = np.argsort(np.argsort(v, kind="stable"), kind="stable")
    return v + 1e-10 * rank


# guards the radius comparison against rounding of center +- radius; well below the tie jitter
_RADIUS_MARGIN = 1e-12


def _count_within(sorted_vals: np.ndarray, centers: np.ndarray, radius: np.ndarray, strict: bool) -> np.ndarray:
    radius = radius - _RADIUS_MARGIN if strict else radius + _RADIUS_MARGIN
    if strict:
        hi = np.searchsorted(sorted_vals, centers + radius, side="left")
        lo = np.searchsorted(sorted_vals, centers - radius, side="right")
    else:
        hi = np.searchsorted(sorted_vals, centers + radius, side="right")
        lo = np.searchsorted(sorted_vals, centers - radius, side="left")
    return hi - lo - 1  # minus the point itself


def estimate_mi_cc(x, y, k: int = 3) -> float:
    """Kraskov (KSG, algorithm 1) estimate in nats for two scalar samples.

    Both samples are standardised first; negative estimates are clipped to 0.
    """
    x, y = _prepare(x, "x"), _prepare(y, "y")
    n = x.size
    if y.size != n:
        raise ValueError("x and y must have equal length")
    if k < 1 or n <= k:
        raise ValueError(f"need more than k={k} samples, got {n}")
    pts = np.column_stack([x, y])
    dist, _ = cKDTree(pts).query(pts, k=k + 1, p=np.inf)
    eps = dist[:, -1]
    nx = _count_within(np.sort(x), x, eps, strict=True)
    ny = _count_within(np.sort(y), y, eps, strict=True)
    mi = digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1))
    return max(0.0, float(mi))


def estimate_mi_dc(x, labels, k: int = 3) -> float:
    """Ross nearest-neighbour estimate in nats between a scalar and a class label.

    A class with ``n_c <= k`` samples uses ``k_c = n_c - 1`` neighbours;
    singleton classes carry no neighbour information and are left out.
    """
    x = _prepare(x, "x")
    labels = np.asarray(labels).reshape(-1)
    if labels.size != x.size:
        raise ValueError("x and labels must have equal length")
    if k < 1:
        raise ValueError("k must be >= 1")
    radius = np.zeros(x.size)
    class_count = np.zeros(x.size)
    k_used = np.zeros(x.size)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            continue
        kc = min(k, idx.size - 1)
        xc = x[idx][:, None]
        dist, _ = cKDTree(xc).query(xc, k=kc + 1)
        radius[idx] = dist[:, -1]
        class_count[idx] = idx.size
        k_used[idx] = kc
    keep = class_count > 0
    n = int(keep.sum())
    if n < 2:
        return 0.0
    xk = x[keep]
    m = _count_within(np.sort(xk), xk, radius[keep], strict=False)
    mi = digamma(n) - np.mean(digamma(class_count[keep])) + np.mean(digamma(k_used[keep])) - np.mean(digamma(m))
    return max(0.0, float(mi))


def discrete_mi(a, b) -> float:
    """Plug-in mutual information (nats) from the joint count table."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise ValueError("discrete_mi needs two equal-length, nonempty samples")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    p = joint / a.size
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz]))))


@dataclass
class MiVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64).reshape(-1), 0.0, None)
        if self.values.size != N_AUX:
            raise ValueError(f"MI vector needs {N_AUX} entries, got {self.values.size}")

    def to_json(self) -> dict:
        return {"columns": list(AUX_COLUMNS), "nats": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, data) -> "MiVector":
        return cls(np.asarray(data["nats"]))


def mi_from_arrays(aux, primary, task: TaskKind, k: int = 3) -> MiVector:
    """MI of each auxiliary column with the primary label.

    Classification: Ross estimator for the rank columns and the plug-in
    estimate for the shifted labels.  Regression: KSG for every column.
    """
    aux = np.asarray(aux, dtype=np.float64)
    primary = np.asarray(primary, dtype=np.float64).reshape(-1)
    if aux.ndim != 2 or aux.shape != (primary.size, N_AUX):
        raise ValueError(f"aux must be ({primary.size}, {N_AUX}), got {aux.shape}")
    out = np.zeros(N_AUX)
    for j in range(N_AUX):
        col = aux[:, j]
        if task.is_classification:
            out[j] = estimate_mi_dc(col, primary.astype(int), k) if j < 8 else discrete_mi(col, primary)
        else:
            out[j] = estimate_mi_cc(col, primary, k)
    return MiVector(out)


def compute_mi_vector(corpus: Corpus, table: AuxTargetTable, k: int = 3, partition: str | None = "train") -> MiVector:
    """MI of each auxiliary column with the primary label over ``partition``."""
    if partition is not None and not corpus.partitions:
        partition = None
    turns = corpus.turns(partition)
    keys = [(t.conversation_id, t.turn_index) for t in turns]
    primary = np.asarray([t.label for t in turns], dtype=np.float64)
    return mi_from_arrays(table.rows(keys), primary, corpus.task, k)


@dataclass
class WeightVector:
    w_primary: float
    w_aux: np.ndarray
    scheme: str

    def __post_init__(self):
        self.w_aux = np.asarray(self.w_aux, dtype=np.float64).reshape(-1)
        if self.w_aux.size != N_AUX:
            raise ValueError(f"need {N_AUX} auxiliary weights")
        if np.any(self.w_aux < 0):
            raise ValueError("auxiliary weights must be nonnegative")
        if abs(self.w_primary + self.w_aux.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if self.w_primary < W_PRIMARY_RANGE[0]:
            raise ValueError("primary weight must be >= 0.50")

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.w_primary], self.w_aux])

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "w_primary": float(self.w_primary),
                "w_aux": [float(v) for v in self.w_aux]}

    @classmethod
    def from_json(cls, data) -> "WeightVector":
        return cls(float(data["w_primary"]), np.asarray(data["w_aux"]), data["scheme"])

    @classmethod
    def primary_only(cls) -> "WeightVector":
        return cls(1.0, np.zeros(N_AUX), "none")


def allocate_weights(w_primary: float, m, scheme: str, rng: np.random.Generator | None = None,
                     active=None) -> WeightVector:
    """Split ``1 - w_primary`` among the auxiliary tasks.

    ``random`` uses normalised uniform draws, ``linear-mi`` m / sum(m) and
    ``softmax-mi`` softmax(m).  ``active`` (16 booleans) restricts the split to
    a subset; inactive tasks get weight 0.  With no active task the primary
    takes all the weight.
    """
    m = m.values if isinstance(m, MiVector) else np.asarray(m, dtype=np.float64).reshape(-1)
    if m.size != N_AUX:
        raise ValueError(f"need {N_AUX} MI values")
    active = np.ones(N_AUX, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if not active.any():
        return WeightVector(1.0, np.zeros(N_AUX), scheme)
    lo, hi = W_PRIMARY_RANGE
    if not lo <= w_primary <= hi:
        raise ValueError(f"w_primary {w_primary} outside [{lo}, {hi}]")
    remaining = 1.0 - w_primary
    share = np.zeros(N_AUX)
    if scheme == "random":
        if rng is None:
            raise ValueError("random scheme needs an rng")
        g = rng.uniform(0.0, 1.0, size=int(active.sum()))
        share[active] = g / g.sum()
    elif scheme == "linear-mi":
        total = m[active].sum()
        if total <= 0:
            raise ValueError("linear-mi allocation needs sum(m) > 0")
        share[active] = m[active] / total
    elif scheme == "softmax-mi":
        z = m[active] - m[active].max()
        e = np.exp(z)
        share[active] = e / e.sum()
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    w_aux = remaining * share
    # absorb rounding so the total is 1 to machine precision
    w_aux[active] *= remaining / w_aux[active].sum() if w_aux[active].sum() > 0 else 1.0
    return WeightVector(float(w_primary), w_aux, scheme)


def save_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
