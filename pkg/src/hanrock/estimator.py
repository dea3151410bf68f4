"""scikit-learn style estimators over windows of talkturn narratives.

``X`` is a sequence of windows; each window is a list of narratives ordered
oldest first with the talkturn to predict last.  ``aux`` optionally supplies
the sixteen auxiliary targets per window (see :mod:`hanrock.aux_targets`).
"""

from __future__ import annotations

from collections import Counter

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .aux_targets import N_AUX
from .corpus import PAD, UNK, TaskKind, Vocabulary, tokenize
from .experiments import ALL_FAMILIES, family_mask
from .models import HanModel, ModelConfig
from .training import HParams, WindowData, predict, train
from .weighting import MiVector, allocate_weights, mi_from_arrays


def check_windows(X) -> list[list[str]]:
    """Validate ``X`` as a nonempty list of nonempty lists of strings."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError("X must be a sequence of windows (lists of narratives)")
    windows = []
    for i, w in enumerate(X):
        if isinstance(w, str):
            w = [w]
        w = list(w)
        if not w or not all(isinstance(t, str) for t in w):
            raise ValueError(f"window {i} must be a nonempty list of strings")
        windows.append(w)
    if not windows:
        raise ValueError("X is empty")
    return windows


def check_aux(aux, n: int) -> np.ndarray | None:
    if aux is None:
        return None
    aux = np.asarray(aux, dtype=np.float64)
    if aux.shape != (n, N_AUX):
        raise ValueError(f"aux must have shape ({n}, {N_AUX}), got {aux.shape}")
    if not np.all(np.isfinite(aux)):
        raise ValueError("aux contains non-finite values")
    return aux


def encode_window_list(windows, vocab: Vocabulary, L: int, T: int) -> np.ndarray:
    ids = np.full((len(windows), L, T), PAD, dtype=np.int64)
    for i, w in enumerate(windows):
        for slot, text in enumerate(w[-L:][::-1]):
            row = vocab.encode(tokenize(text))[:T] or [UNK]
            ids[i, L - 1 - slot, :len(row)] = row
    return ids


class _HanRockBase(BaseEstimator):
    def __init__(self, variant="rock", P=32, capacity=33, content_size=3, max_tokens=60, embed_dim=50,
                 fusion_dim=16, learning_rate=2.0 ** -6, batch_size=32, l2=0.0, gru_dropout=0.1,
                 recurrent_dropout=0.1, scheme="softmax-mi", w_primary=0.75, aux_families=ALL_FAMILIES,
                 max_epochs=20, random_state=0):
        self.variant = variant
        self.P = P
        self.capacity = capacity
        self.content_size = content_size
        self.max_tokens = max_tokens
        self.embed_dim = embed_dim
        self.fusion_dim = fusion_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.l2 = l2
        self.gru_dropout = gru_dropout
        self.recurrent_dropout = recurrent_dropout
        self.scheme = scheme
        self.w_primary = w_primary
        self.aux_families = aux_families
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _task(self, y) -> TaskKind:
        raise NotImplementedError

    def _targets(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64)

    def _hparams(self) -> HParams:
        return HParams(learning_rate=self.learning_rate, batch_size=self.batch_size, P=self.P, l2=self.l2,
                       L=self.content_size, gru_dropout=self.gru_dropout,
                       recurrent_dropout=self.recurrent_dropout, scheme=self.scheme,
                       w_primary=self.w_primary, seed=int(self.random_state))

    def _data(self, X, y, aux) -> WindowData:
        windows = check_windows(X)
        y = self._targets(y)
        if y.shape != (len(windows),):
            raise ValueError(f"y must have {len(windows)} entries, got shape {y.shape}")
        aux = check_aux(aux, len(windows))
        ids = encode_window_list(windows, self.vocab_, self.content_size, self.max_tokens)
        return WindowData(ids, y, aux if aux is not None else np.zeros((len(windows), N_AUX)),
                          list(range(len(windows))))

    def fit(self, X, y, aux=None, eval_set=None):
        """Train on windows ``X`` with labels ``y``.

        Without ``aux`` only the primary task gets loss weight.  ``eval_set``
        is ``(X_dev, y_dev)`` or ``(X_dev, y_dev, aux_dev)`` and drives
        best-epoch selection; the training data is used when it is omitted.
        """
        windows = check_windows(X)
        self.task_ = self._task(y)
        counts = Counter(tok for w in windows for text in w for tok in tokenize(text))
        self.vocab_ = Vocabulary(sorted(counts, key=lambda t: (-counts[t], t)), counts)
        train_data = self._data(windows, y, aux)
        if eval_set is not None:
            dev_data = self._data(*eval_set) if len(eval_set) == 3 else self._data(eval_set[0], eval_set[1], None)
        else:
            dev_data = train_data
        hp = self._hparams()
        active = family_mask(*self.aux_families) if aux is not None else np.zeros(N_AUX, dtype=bool)
        if active.any():
            mi = mi_from_arrays(train_data.aux, train_data.y, self.task_)
        else:
            mi = MiVector(np.zeros(N_AUX))
        self.mi_ = mi
        self.weights_ = allocate_weights(hp.w_primary, mi, hp.scheme, np.random.default_rng([hp.seed, 1]), active)
        cfg = ModelConfig(variant=self.variant, P=self.P, capacity=self.capacity, L=self.content_size,
                          T=self.max_tokens, embed_dim=self.embed_dim, fusion_dim=self.fusion_dim,
                          gru_dropout=self.gru_dropout, recurrent_dropout=self.recurrent_dropout, task=self.task_)
        model = HanModel(cfg, len(self.vocab_), seed=hp.seed)
        result = train(model, train_data, dev_data, hp, self.weights_, self.max_epochs)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = 1
        return self

    def _raw(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        windows = check_windows(X)
        ids = encode_window_list(windows, self.vocab_, self.content_size, self.max_tokens)
        return predict(self.model_, WindowData(ids, np.zeros(len(ids)), np.zeros((len(ids), N_AUX)), []))


class HanRockClassifier(ClassifierMixin, _HanRockBase):
    """Four-class (by default) talkturn classifier; labels must be 0..n_classes-1."""

    def _task(self, y) -> TaskKind:
        y = np.asarray(y)
        if y.ndim != 1 or y.size == 0:
            raise ValueError("y must be a nonempty 1-d array of class ids")
        if not np.all(np.equal(np.mod(y, 1), 0)) or y.min() < 0:
            raise ValueError("class labels must be nonnegative integers")
        self.classes_ = np.arange(max(4, int(y.max()) + 1))
        return TaskKind.classification(len(self.classes_))

    def predict_proba(self, X) -> np.ndarray:
        return self._raw(X)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


class HanRockRegressor(RegressorMixin, _HanRockBase):
    """Talkturn regressor with predictions clipped to ``target_range``."""

    def __init__(self, target_range=(-1.0, 1.0), variant="rock", P=32, capacity=33, content_size=3,
                 max_tokens=60, embed_dim=50, fusion_dim=16, learning_rate=2.0 ** -6, batch_size=32, l2=0.0,
                 gru_dropout=0.1, recurrent_dropout=0.1, scheme="softmax-mi", w_primary=0.75,
                 aux_families=ALL_FAMILIES, max_epochs=20, random_state=0):
        super().__init__(variant, P, capacity, content_size, max_tokens, embed_dim, fusion_dim, learning_rate,
                         batch_size, l2, gru_dropout, recurrent_dropout, scheme, w_primary, aux_families,
                         max_epochs, random_state)
        self.target_range = target_range

    def _task(self, y) -> TaskKind:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
            raise ValueError("y must be a nonempty 1-d array of finite values")
        lo, hi = self.target_range
        if y.min() < lo or y.max() > hi:
            raise ValueError(f"targets fall outside target_range {self.target_range}")
        return TaskKind.regression(lo, hi)

    def predict(self, X) -> np.ndarray:
        return np.clip(self._raw(X), *self.target_range)
