"""Mini-batch training, random hyperparameter search and median stopping."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .aux_targets import N_AUX, AuxTargetTable
from .corpus import Corpus, TaskKind, Vocabulary, encode_windows
from .evaluation import ma4, per_example_metric
from .models import CAPACITY, H2_PRIMARY_UNITS, HanModel, ModelConfig, compute_loss
from .weighting import SCHEMES, MiVector, WeightVector, allocate_weights

LR_RANGE = (2.0 ** -10, 2.0 ** -5)
BATCH_RANGE = (32, 256)
L2_RANGE = (0.0, 0.5)
L2_LOG_FLOOR = 1e-6
L_RANGE = (1, 30)
DROPOUT_RANGE = (0.01, 0.5)
W_PRIMARY_RANGE = (0.50, 0.99)
MAX_EPOCHS = 350
FIRST_CHECKPOINT = 5


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class WindowData:
    """Encoded context windows with primary and auxiliary targets."""

    ids: np.ndarray          # (n, L, T) int64
    y: np.ndarray            # (n,)
    aux: np.ndarray          # (n, 16)
    keys: list

    def __len__(self):
        return int(self.ids.shape[0])

    @classmethod
    def from_corpus(cls, corpus: Corpus, vocab: Vocabulary, table: AuxTargetTable, L: int, T: int,
                    partition: str | None) -> "WindowData":
        ids, keys = encode_windows(corpus, vocab, L, T, partition)
        labels = {(t.conversation_id, t.turn_index): t.label for t in corpus.turns(partition)}
        y = np.asarray([labels[k] for k in keys], dtype=np.float64)
        aux = table.rows(keys) if keys else np.zeros((0, N_AUX))
        return cls(ids, y, aux, keys)

    def subset(self, idx) -> "WindowData":
        idx = np.asarray(idx)
        return WindowData(self.ids[idx], self.y[idx], self.aux[idx], [self.keys[i] for i in idx])


def trim_batch(ids: np.ndarray) -> np.ndarray:
    """Drop trailing all-padding token columns (outputs are unaffected by masked steps)."""
    used = np.flatnonzero((ids != 0).any(axis=(0, 1)))
    width = int(used[-1]) + 1 if used.size else 1
    return ids[..., :width]


# ---------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class HParams:
    learning_rate: float = 2.0 ** -7
    batch_size: int = 32
    P: int = 256
    l2: float = 0.0
    L: int = 5
    gru_dropout: float = 0.1
    recurrent_dropout: float = 0.1
    scheme: str = "softmax-mi"
    w_primary: float = 0.75
    seed: int = 0

    def __post_init__(self):
        checks = [
            (LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1], f"learning rate {self.learning_rate} outside [2^-10, 2^-5]"),
            (BATCH_RANGE[0] <= self.batch_size <= BATCH_RANGE[1], f"batch size {self.batch_size} outside [32, 256]"),
            (self.P >= 1, "P must be >= 1"),
            (L2_RANGE[0] <= self.l2 <= L2_RANGE[1], f"l2 {self.l2} outside [0, 0.5]"),
            (L_RANGE[0] <= self.L <= L_RANGE[1], f"content size {self.L} outside [1, 30]"),
            (DROPOUT_RANGE[0] <= self.gru_dropout <= DROPOUT_RANGE[1], "gru dropout outside [0.01, 0.5]"),
            (DROPOUT_RANGE[0] <= self.recurrent_dropout <= DROPOUT_RANGE[1], "recurrent dropout outside [0.01, 0.5]"),
            (self.scheme in SCHEMES, f"unknown weight scheme {self.scheme!r}"),
            (W_PRIMARY_RANGE[0] <= self.w_primary <= W_PRIMARY_RANGE[1], "w_primary outside [0.50, 0.99]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "HParams":
        return cls(**d)


@dataclass
class SearchSpace:
    """Tuning ranges; ``fixed`` pins any HParams field to a constant."""

    learning_rate: tuple = LR_RANGE
    batch_size: tuple = BATCH_RANGE
    P_choices: tuple = H2_PRIMARY_UNITS
    l2: tuple = L2_RANGE
    L: tuple = L_RANGE
    dropout: tuple = DROPOUT_RANGE
    w_primary: tuple = W_PRIMARY_RANGE
    schemes: tuple = SCHEMES
    fixed: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "SearchSpace":
        d = dict(d)
        for k in ("learning_rate", "batch_size", "P_choices", "l2", "L", "dropout", "w_primary", "schemes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_hparams(rng: np.random.Generator, trial_index: int = 0, space: SearchSpace | None = None) -> HParams:
    """One random configuration.

    Learning rate and L2 are log-uniform (L2 is drawn on [1e-7, 0.5] and
    draws below 1e-6 become exactly 0); batch size, content size, dropouts and
    w_primary are uniform; P is uniform over the allowed choices.  The weight
    scheme cycles with ``trial_index`` so every block of three trials covers
    all schemes.  Every field is drawn even when pinned, so pinning one field
    never shifts the others.
    """
    space = space or SearchSpace()
    lr = _log_uniform(rng, *space.learning_rate)
    batch = int(rng.integers(space.batch_size[0], space.batch_size[1] + 1))
    P = int(space.P_choices[int(rng.integers(len(space.P_choices)))])
    l2_hi = space.l2[1]
    l2 = _log_uniform(rng, L2_LOG_FLOOR / 10, l2_hi) if l2_hi > 0 else 0.0
    if l2 < L2_LOG_FLOOR:
        l2 = 0.0
    L = int(rng.integers(space.L[0], space.L[1] + 1))
    gd = float(rng.uniform(*space.dropout))
    rd = float(rng.uniform(*space.dropout))
    wp = float(rng.uniform(*space.w_primary))
    seed = int(rng.integers(2 ** 31 - 1))
    values = dict(learning_rate=lr, batch_size=batch, P=P, l2=l2, L=L, gru_dropout=gd,
                  recurrent_dropout=rd, scheme=space.schemes[trial_index % len(space.schemes)],
                  w_primary=wp, seed=seed)
    values.update(space.fixed)
    return HParams(**values)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with an L2 penalty ``l2 * sum(W**2)`` on the masked weight entries."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float, l2: float = 0.0, l2_masks: dict | None = None) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ad.NonFiniteError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        masks = l2_masks or {}
        for name, g in grads.items():
            p = params[name]
            if l2 > 0 and name in masks:
                g = g + (2.0 * l2) * masks[name] * p.data
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def optimizer_step(params: dict, grads: dict, state: Adam, lr: float, l2: float = 0.0, l2_masks=None) -> Adam:
    state.step(params, grads, lr, l2, l2_masks)
    return state


# ---------------------------------------------------------------------------
# training


def is_checkpoint(epoch: int) -> bool:
    return FIRST_CHECKPOINT <= epoch < MAX_EPOCHS and (epoch - FIRST_CHECKPOINT) % 2 == 0


def median_stop(history: Sequence[float], others: Sequence[Sequence[float]], epoch: int,
                maximize: bool = True) -> bool:
    """True when the trial should stop at ``epoch`` (1-based).

    Stops iff the trial's best objective so far is strictly worse than the
    median, over other trials that reached ``epoch``, of their running
    average objective up to ``epoch``.
    """
    if not is_checkpoint(epoch) or len(history) < epoch:
        return False
    peers = [np.mean(h[:epoch]) for h in others if len(h) >= epoch]
    if not peers:
        return False
    median = float(np.median(peers))
    mine = history[:epoch]
    return max(mine) < median if maximize else min(mine) > median


def predict(model: HanModel, data: WindowData, batch_size: int = 256) -> np.ndarray:
    """Primary-task outputs: class probabilities (n, C) or values (n,)."""
    outs = []
    for s in range(0, len(data), batch_size):
        preds, _ = model.forward(trim_batch(data.ids[s:s + batch_size]), train=False)
        outs.append(preds.primary_numpy())
    return np.concatenate(outs, axis=0)


def primary_outputs(model: HanModel, data: WindowData, batch_size: int = 256) -> np.ndarray:
    """Predicted class ids or range-clipped values."""
    raw = predict(model, data, batch_size)
    task = model.cfg.task
    if task.is_classification:
        return raw.argmax(axis=1)
    return np.clip(raw, *task.target_range)


def dev_objective(model: HanModel, data: WindowData) -> tuple[float, np.ndarray]:
    """MA(4) for classification, MAE for regression, plus the predictions."""
    pred = primary_outputs(model, data)
    if model.cfg.task.is_classification:
        return ma4(pred, data.y.astype(np.int64), model.cfg.task.n_classes), pred
    return float(np.mean(np.abs(pred - data.y))), pred


@dataclass
class TrainResult:
    model: HanModel
    history: list[float]
    losses: list[float]
    best_epoch: int
    stopped_at: int
    maximize: bool

    @property
    def best_objective(self) -> float | None:
        return self.history[self.best_epoch - 1] if self.best_epoch else None


def train(model: HanModel, train_data: WindowData, dev_data: WindowData, hp: HParams,
          weights: WeightVector, max_epochs: int = MAX_EPOCHS,
          stop_hook: Callable[[int, list], bool] | None = None, eval_every: int = 1) -> TrainResult:
    """Train with shuffled mini-batches and keep the best dev-objective epoch.

    ``stop_hook(epoch, history)`` is consulted after each evaluation and ends
    training when it returns True.  The returned model holds the parameters
    of the best epoch (initial parameters if no epoch ran).
    """
    if len(train_data) == 0:
        raise TrainingError("empty train partition")
    if max_epochs > 0 and len(dev_data) == 0:
        raise TrainingError("empty dev partition")
    if not isinstance(weights, WeightVector):
        raise TypeError("weights must be a WeightVector")
    maximize = model.cfg.task.is_classification
    rng = np.random.default_rng(hp.seed)
    opt = Adam()
    params = model.trainable
    masks = model.l2_masks(weights.as_array())
    w = weights.as_array()
    history: list[float] = []
    losses: list[float] = []
    best_state = model.state()
    best_epoch = 0
    best_value = -math.inf if maximize else math.inf
    n = len(train_data)
    stopped_at = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, hp.batch_size):
            idx = order[s:s + hp.batch_size]
            ids = trim_batch(train_data.ids[idx])
            with ad.GradientTape() as tape:
                preds, _ = model.forward(ids, train=True, rng=rng)
                loss, _ = compute_loss(preds, train_data.y[idx], train_data.aux[idx], w)
            value = float(loss.item())
            if not math.isfinite(value):
                raise ad.NonFiniteError(f"non-finite loss at epoch {epoch}")
            grads = ad.backward(loss, tape, params)
            opt.step(params, grads, hp.learning_rate, hp.l2, masks)
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
        stopped_at = epoch
        if epoch % eval_every and epoch != max_epochs:
            continue
        value, _ = dev_objective(model, dev_data)
        while len(history) < epoch - 1:
            history.append(history[-1] if history else value)
        history.append(value)
        if (value > best_value) if maximize else (value < best_value):
            best_value, best_epoch, best_state = value, epoch, model.state()
        if stop_hook is not None and stop_hook(epoch, list(history)):
            break
    model.load_state(best_state)
    return TrainResult(model, history, losses, best_epoch, stopped_at, maximize)


# ---------------------------------------------------------------------------
# trial tables


@dataclass
class TrialRecord:
    index: int
    hparams: HParams
    weights: WeightVector | None
    history: list[float]
    stopped_at: int
    best_epoch: int
    dev_metric: np.ndarray
    test_metric: np.ndarray
    dev_pred: np.ndarray
    test_pred: np.ndarray
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "hparams": self.hparams.to_json(),
            "weights": self.weights.to_json() if self.weights is not None else None,
            "history": [float(v) for v in self.history],
            "stopped_at": self.stopped_at,
            "best_epoch": self.best_epoch,
            "dev_metric": [float(v) for v in self.dev_metric],
            "test_metric": [float(v) for v in self.test_metric],
            "dev_pred": [float(v) for v in self.dev_pred],
            "test_pred": [float(v) for v in self.test_pred],
            "status": self.status,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrialRecord":
        return cls(d["index"], HParams.from_json(d["hparams"]),
                   WeightVector.from_json(d["weights"]) if d["weights"] else None,
                   list(d["history"]), d["stopped_at"], d["best_epoch"],
                   np.asarray(d["dev_metric"]), np.asarray(d["test_metric"]),
                   np.asarray(d["dev_pred"]), np.asarray(d["test_pred"]), d["status"])


@dataclass
class TrialTable:
    """Trials of one search with per-example dev and test metrics.

    Per-example metrics are 1/0 correctness (classification, higher is
    better) or absolute error (regression, lower is better).
    """

    records: list[TrialRecord]
    task: TaskKind
    dev_keys: list
    test_keys: list
    meta: dict = field(default_factory=dict)

    @property
    def maximize(self) -> bool:
        return self.task.is_classification

    @property
    def completed(self) -> list[TrialRecord]:
        return [r for r in self.records if r.ok]

    def __len__(self):
        return len(self.records)

    def dev_matrix(self) -> np.ndarray:
        return np.stack([r.dev_metric for r in self.completed]).astype(np.float64)

    def test_matrix(self) -> np.ndarray:
        return np.stack([r.test_metric for r in self.completed]).astype(np.float64)

    def best(self) -> TrialRecord:
        """Best trial on mean dev metric (ties go to the lowest index)."""
        done = self.completed
        if not done:
            raise TrainingError("no completed trials")
        scores = np.asarray([r.dev_metric.mean() for r in done])
        pick = int(np.argmax(scores) if self.maximize else np.argmin(scores))
        return done[pick]

    def to_json(self) -> dict:
        return {"task": str(self.task), "dev_keys": [list(k) for k in self.dev_keys],
                "test_keys": [list(k) for k in self.test_keys],
                "meta": self.meta, "records": [r.to_json() for r in self.records]}

    @classmethod
    def from_json(cls, d: dict) -> "TrialTable":
        return cls([TrialRecord.from_json(r) for r in d["records"]], TaskKind.parse(d["task"]),
                   [tuple(k) for k in d["dev_keys"]], [tuple(k) for k in d["test_keys"]], d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrialTable":
        with open(Path(path), encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# search


@dataclass
class SearchContext:
    """Everything a trial needs besides its hyperparameters."""

    corpus: Corpus
    vocab: Vocabulary
    table: AuxTargetTable
    mi: MiVector
    variant: str = "rock"
    capacity: int = CAPACITY
    T: int = 60
    embed_dim: int = 300
    fusion_dim: int = 64
    embeddings: np.ndarray | None = None
    active: np.ndarray | None = None       # which auxiliary tasks get weight
    max_epochs: int = MAX_EPOCHS
    use_median_stop: bool = True
    _windows: dict = field(default_factory=dict, repr=False)

    @property
    def task(self) -> TaskKind:
        return self.corpus.task

    def windows(self, L: int, partition: str) -> WindowData:
        key = (L, partition)
        if key not in self._windows:
            self._windows[key] = WindowData.from_corpus(self.corpus, self.vocab, self.table, L, self.T, partition)
        return self._windows[key]

    def model_config(self, hp: HParams) -> ModelConfig:
        return ModelConfig(variant=self.variant, P=hp.P, capacity=self.capacity, L=hp.L, T=self.T,
                           embed_dim=self.embed_dim, fusion_dim=self.fusion_dim,
                           gru_dropout=hp.gru_dropout, recurrent_dropout=hp.recurrent_dropout, task=self.task)

    def weights_for(self, hp: HParams) -> WeightVector:
        wrng = np.random.default_rng([hp.seed, 1])
        return allocate_weights(hp.w_primary, self.mi, hp.scheme, wrng, self.active)


def _per_example(task: TaskKind, pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    return per_example_metric(pred, y.astype(np.int64) if task.is_classification else y,
                              task.is_classification, None if task.is_classification else task.target_range)


def run_trial(ctx: SearchContext, hp: HParams, index: int, others: Sequence[Sequence[float]] = ()) -> TrialRecord:
    """Train one configuration and score its best-dev checkpoint on dev and test."""
    task = ctx.task
    weights = ctx.weights_for(hp)
    cfg = ctx.model_config(hp)
    model = HanModel(cfg, len(ctx.vocab), ctx.embeddings, seed=hp.seed)
    tr, dev, test = ctx.windows(hp.L, "train"), ctx.windows(hp.L, "dev"), ctx.windows(hp.L, "test")
    maximize = task.is_classification
    snapshot = [list(h) for h in others]
    hook = (lambda e, h: median_stop(h, snapshot, e, maximize)) if ctx.use_median_stop else None
    result = train(model, tr, dev, hp, weights, ctx.max_epochs, hook)
    dev_pred = primary_outputs(result.model, dev)
    test_pred = primary_outputs(result.model, test)
    return TrialRecord(index, hp, weights, result.history, result.stopped_at, result.best_epoch,
                       _per_example(task, dev_pred, dev.y), _per_example(task, test_pred, test.y),
                       np.asarray(dev_pred, dtype=np.float64), np.asarray(test_pred, dtype=np.float64))


def trial_seeds(master_seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master_seed).spawn(n)]


def random_search(ctx: SearchContext, space: SearchSpace | None = None, n: int = 30, parallelism: int = 1,
                  master_seed: int = 0, log: Callable[[str], None] | None = None) -> TrialTable:
    """Random search with median stopping.

    Trials run in waves of ``parallelism``; a trial's stopping rule compares
    against the histories of trials finished before its wave started, so the
    result does not depend on thread timing.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    space = space or SearchSpace()
    hps = [sample_hparams(rng, i, space) for i, rng in enumerate(trial_seeds(master_seed, n))]
    records: list[TrialRecord] = []
    task = ctx.task

    def attempt(i: int, others) -> TrialRecord:
        try:
            return run_trial(ctx, hps[i], i, others)
        except (ad.NonFiniteError, TrainingError, FloatingPointError) as exc:
            empty = np.zeros(0)
            return TrialRecord(i, hps[i], None, [], 0, 0, empty, empty, empty, empty, f"failed: {exc}")

    for start in range(0, n, parallelism):
        wave = range(start, min(n, start + parallelism))
        others = [r.history for r in records if r.ok]
        if parallelism == 1:
            done = [attempt(i, others) for i in wave]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                done = list(pool.map(lambda i: attempt(i, others), wave))
        for rec in done:
            records.append(rec)
            if log is not None:
                obj = rec.history[rec.best_epoch - 1] if rec.ok and rec.best_epoch else float("nan")
                log(f"trial {rec.index}: {rec.status} scheme={rec.hparams.scheme} "
                    f"stopped_at={rec.stopped_at} best_dev={obj:.4f}")
    if not any(r.ok for r in records):
        raise TrainingError("all trials failed: " + "; ".join(r.status for r in records))
    dev_keys = ctx.windows(hps[0].L, "dev").keys
    test_keys = ctx.windows(hps[0].L, "test").keys
    meta = {"master_seed": master_seed, "n_trials": n, "parallelism": parallelism,
            "space": space.to_json(), "variant": ctx.variant, "capacity": ctx.capacity,
            "mi": ctx.mi.to_json(), "max_epochs": ctx.max_epochs}
    return TrialTable(records, task, list(dev_keys), list(test_keys), meta)


def with_fixed(space: SearchSpace, **fixed) -> SearchSpace:
    merged = dict(space.fixed)
    merged.update(fixed)
    return replace(space, fixed=merged)
