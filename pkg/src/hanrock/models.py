"""Flat multi-task HAN and HAN-ROCK, the 17-task loss, and checkpoints.

Task order everywhere is ``[primary] + AUX_COLUMNS``: eight percentile-rank
targets followed by four historical and four future labels.  The sixteen
auxiliary talkturn encoders of HAN-ROCK and the per-family predictor heads are
kept as stacked parameters (leading axis = task within the family).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import TaskKind
from .layers import (AttentionParams, DenseParams, DropoutSpec, GruParams, attend, bigru_encode,
                     dense, embed)

N_TASKS = 17
N_RANK = 8
N_SHIFT = 8
CAPACITY = 257
H2_PRIMARY_UNITS = (1, 64, 128, 192, 256)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    For ``rock`` the auxiliary units follow from ``A = capacity - P``; the flat
    variant ignores ``A``.
    """

    variant: str = "rock"
    P: int = 256
    capacity: int = CAPACITY
    L: int = 5
    T: int = 60
    embed_dim: int = 300
    fusion_dim: int = 64
    gru_dropout: float = 0.0
    recurrent_dropout: float = 0.0
    task: TaskKind = field(default_factory=TaskKind.classification)
    fine_tune_embeddings: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ("flat", "rock"):
            raise ValueError(f"variant must be 'flat' or 'rock', got {self.variant!r}")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.variant == "rock" and not 1 <= self.P < self.capacity:
            raise ValueError(f"invalid capacity split: P={self.P} leaves A={self.capacity - self.P} "
                             f"(P + A must equal {self.capacity} with A >= 1)")
        if self.L < 1 or self.T < 1 or self.embed_dim < 1 or self.fusion_dim < 1:
            raise ValueError("L, T, embed_dim and fusion_dim must be >= 1")

    @property
    def A(self) -> int | None:
        return self.capacity - self.P if self.variant == "rock" else None

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_json(self) -> dict:
        d = asdict(self)
        d["task"] = str(self.task)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["task"] = TaskKind.parse(d["task"])
        return cls(**d)


@dataclass
class Predictions:
    """Raw head outputs: logits for classification heads, values for regression."""

    primary: Tensor          # (B, out)
    rank: Tensor             # (8, B, 1)
    shift: Tensor            # (8, B, out)
    task: TaskKind

    def primary_numpy(self) -> np.ndarray:
        """Class probabilities (B, n_classes) or predicted values (B,)."""
        if self.task.is_classification:
            return _softmax_np(self.primary.data)
        return self.primary.data[:, 0]


@dataclass
class AttentionRecord:
    """Attention weights of one batch.

    ``word`` maps a branch name to (B, L, T) weights; ``turn`` is (n_tasks, B, L)
    with the primary task first; ``task`` is (17, B) for HAN-ROCK and None for
    the flat model.
    """

    word: dict
    turn: np.ndarray
    task: np.ndarray | None
    word_mask: np.ndarray
    turn_mask: np.ndarray


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class HanModel:
    """Parameters plus forward pass for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, embeddings: np.ndarray | None = None, seed=0):
        self.cfg = cfg
        self.vocab_size = int(vocab_size)
        dt = cfg.np_dtype
        rng = np.random.default_rng(seed)
        if embeddings is None:
            emb = rng.uniform(-0.1, 0.1, size=(vocab_size, cfg.embed_dim))
            emb[0] = 0.0
        else:
            emb = np.asarray(embeddings)
            if emb.shape != (vocab_size, cfg.embed_dim):
                raise ad.ShapeError(f"embedding matrix {emb.shape} != ({vocab_size}, {cfg.embed_dim})")
        self.embedding = Tensor(emb.astype(dt), name="embedding", requires_grad=cfg.fine_tune_embeddings,
                                dtype=dt)
        out = cfg.task.output_dim
        E = cfg.embed_dim
        self.params: dict[str, Tensor] = {"embedding": self.embedding}

        def enc(prefix, in_dim, hidden, stack=None):
            fwd = GruParams.init(in_dim, hidden, rng, f"{prefix}.fwd", stack, dt)
            bwd = GruParams.init(in_dim, hidden, rng, f"{prefix}.bwd", stack, dt)
            att = AttentionParams.init(2 * hidden, 2 * hidden, rng, f"{prefix}.att", stack, dt)
            for t in fwd.tensors() + bwd.tensors() + att.tensors():
                self.params[t.name] = t
            return fwd, bwd, att

        def head(prefix, in_dim, out_dim, stack=None):
            d = DenseParams.init(in_dim, out_dim, rng, prefix, stack, dt)
            for t in d.tensors():
                self.params[t.name] = t
            return d

        if cfg.variant == "flat":
            P = cfg.P
            self.word = enc("word", E, P)
            self.turn = enc("turn", 2 * P, P)
            rep = 2 * P
        else:
            P, A, F = cfg.P, cfg.A, cfg.fusion_dim
            self.pri_word = enc("pri.word", E, P)
            self.pri_turn = enc("pri.turn", 2 * P, P)
            self.aux_word = enc("aux.word", E, A)
            self.aux_turn = enc("aux.turn", 2 * A, A, stack=N_RANK + N_SHIFT)
            self.fusion_pri = head("fusion.pri", 2 * P, F)
            self.fusion_aux = head("fusion.aux", 2 * A, F, stack=N_RANK + N_SHIFT)
            self.fusion_u = ad.tensor_init((F,), "uniform", low=-0.1, high=0.1, seed=rng, dtype=dt,
                                           name="fusion.u", requires_grad=True)
            self.params["fusion.u"] = self.fusion_u
            rep = F
        aux_rep = 2 * cfg.P if cfg.variant == "flat" else 2 * cfg.A
        self.head_primary = head("head.primary", rep, out)
        self.head_rank = head("head.rank", aux_rep, 1, stack=N_RANK)
        self.head_shift = head("head.shift", aux_rep, out, stack=N_SHIFT)

    # ------------------------------------------------------------------
    # parameter bookkeeping

    @property
    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def primary_branch_names(self) -> list[str]:
        """Parameters of the primary word/talkturn encoders and primary head."""
        prefixes = ("pri.", "head.primary.") if self.cfg.variant == "rock" else ("head.primary.",)
        return [k for k in self.params if k.startswith(prefixes)]

    def aux_branch_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("aux.", "fusion.aux.", "head.rank.", "head.shift."))]

    def shared_encoder_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("word.", "turn."))]

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ad.ShapeError(f"{k}: stored {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def l2_masks(self, task_weights: np.ndarray) -> dict[str, np.ndarray | float]:
        """Which entries of each parameter the L2 penalty covers.

        Weight matrices only (no biases, attention context vectors or
        embeddings); heads of tasks with zero loss weight are left alone.
        """
        w = np.asarray(task_weights)
        masks: dict[str, np.ndarray | float] = {}
        for k, t in self.params.items():
            leaf = k.rsplit(".", 1)[-1]
            if k == "embedding" or not (leaf.startswith(("W", "U"))):
                continue
            if k == "head.rank.W":
                masks[k] = (w[1:1 + N_RANK] > 0).astype(t.dtype)[:, None, None]
            elif k == "head.shift.W":
                masks[k] = (w[1 + N_RANK:] > 0).astype(t.dtype)[:, None, None]
            elif k == "head.primary.W":
                masks[k] = float(w[0] > 0)
            else:
                masks[k] = 1.0
        return masks

    # ------------------------------------------------------------------
    # forward

    def _words(self, enc, x, word_mask, drop, rng):
        fwd, bwd, att = enc
        h = bigru_encode(fwd, bwd, x, word_mask, drop, rng, allow_empty=True)
        alpha, s = attend(att, h, word_mask, allow_empty=True)
        return alpha, s

    def _turns(self, enc, s, turn_mask, drop, rng):
        fwd, bwd, att = enc
        h = bigru_encode(fwd, bwd, s, turn_mask, drop, rng, allow_empty=True)
        return attend(att, h, turn_mask, allow_empty=True)

    def forward(self, ids: np.ndarray, train: bool = False, rng=None) -> tuple[Predictions, AttentionRecord]:
        """Run a batch of (B, L, T) token-id windows."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 3 or ids.shape[0] == 0:
            raise ad.ShapeError(f"expected a nonempty (B, L, T) id array, got {ids.shape}")
        cfg = self.cfg
        B, L, T = ids.shape
        word_mask = ids != 0
        turn_mask = word_mask.any(axis=-1)
        if not turn_mask[:, -1].all():
            raise ValueError("the current talkturn (last slot) must contain at least one token")
        drop = DropoutSpec(cfg.gru_dropout, cfg.recurrent_dropout, "train" if train else "eval")
        rng = rng if rng is not None else np.random.default_rng(0)
        flat_ids = ids.reshape(B * L, T)
        flat_mask = word_mask.reshape(B * L, T)
        x = embed(self.embedding, flat_ids)

        if cfg.variant == "flat":
            a_w, s = self._words(self.word, x, flat_mask, drop, rng)
            s = ad.reshape(s, (B, L, s.shape[-1]))
            a_t, v = self._turns(self.turn, s, turn_mask, drop, rng)
            primary = dense(self.head_primary.W, self.head_primary.b, v)
            rank = dense(self.head_rank.W, self.head_rank.b, v)
            shift = dense(self.head_shift.W, self.head_shift.b, v)
            record = AttentionRecord({"shared": a_w.data.reshape(B, L, T)}, a_t.data[None], None,
                                     word_mask, turn_mask)
            return Predictions(primary, rank, shift, cfg.task), record

        a_pw, s_pri = self._words(self.pri_word, x, flat_mask, drop, rng)
        a_aw, s_aux = self._words(self.aux_word, x, flat_mask, drop, rng)
        s_pri = ad.reshape(s_pri, (B, L, s_pri.shape[-1]))
        s_aux = ad.reshape(s_aux, (B, L, s_aux.shape[-1]))
        a_pt, v_pri = self._turns(self.pri_turn, s_pri, turn_mask, drop, rng)      # (B, 2P)
        a_at, v_aux = self._turns(self.aux_turn, s_aux, turn_mask, drop, rng)      # (16, B, 2A)

        rank = dense(self.head_rank.W, self.head_rank.b, v_aux[:N_RANK])
        shift = dense(self.head_shift.W, self.head_shift.b, v_aux[N_RANK:])

        F = cfg.fusion_dim
        proj_pri = dense(self.fusion_pri.W, self.fusion_pri.b, v_pri)               # (B, F)
        proj_aux = dense(self.fusion_aux.W, self.fusion_aux.b, v_aux)               # (16, B, F)
        v_c = ad.concat([ad.reshape(proj_pri, (1, B, F)), proj_aux], axis=0)       # (17, B, F)
        logits = ad.sum(ad.mul(v_c, self.fusion_u), axis=-1)                        # (17, B)
        alpha_c = ad.softmax(logits, axis=0)
        v = ad.sum(ad.mul(ad.reshape(alpha_c, (N_TASKS, B, 1)), v_c), axis=0)       # (B, F)
        primary = dense(self.head_primary.W, self.head_primary.b, v)

        turn = np.concatenate([a_pt.data[None], a_at.data], axis=0)
        record = AttentionRecord({"primary": a_pw.data.reshape(B, L, T), "aux": a_aw.data.reshape(B, L, T)},
                                 turn, alpha_c.data, word_mask, turn_mask)
        return Predictions(primary, rank, shift, cfg.task), record


def build_model(cfg: ModelConfig, vocab_size: int, pretrained: np.ndarray | None = None, seed=0) -> HanModel:
    return HanModel(cfg, vocab_size, pretrained, seed)


def forward_flat(model: HanModel, ids, train: bool = False, rng=None):
    if model.cfg.variant != "flat":
        raise ValueError("forward_flat needs a flat model")
    return model.forward(ids, train, rng)


def forward_rock(model: HanModel, ids, train: bool = False, rng=None):
    if model.cfg.variant != "rock":
        raise ValueError("forward_rock needs a rock model")
    return model.forward(ids, train, rng)


# ---------------------------------------------------------------------------
# loss


def _task_loss(out: Tensor, target: np.ndarray, task: TaskKind) -> Tensor:
    """Mean loss over the batch axis (second-last of ``out``); keeps leading axes."""
    if task.is_classification:
        onehot = np.eye(task.n_classes, dtype=out.dtype)[np.asarray(target, dtype=np.int64)]
        logp = ad.log_softmax(out, axis=-1)
        nll = ad.neg(ad.sum(ad.mul(logp, onehot), axis=-1))
        return ad.mean(nll, axis=-1)
    diff = ad.sub(ad.reshape(out, out.shape[:-1]), np.asarray(target, dtype=out.dtype))
    return ad.mean(ad.mul(diff, diff), axis=-1)


def compute_loss(preds: Predictions, primary_target, aux_targets, weights) -> tuple[Tensor, Tensor]:
    """Weighted sum of the 17 per-task losses.

    Classification tasks use cross-entropy on softmax outputs, regression
    tasks mean squared error.  Returns ``(total, per_task_losses)``.
    """
    w = weights.as_array() if hasattr(weights, "as_array") else np.asarray(weights, dtype=np.float64)
    if w.shape != (N_TASKS,):
        raise ValueError(f"expected {N_TASKS} task weights, got {w.shape}")
    task = preds.task
    aux = np.asarray(aux_targets, dtype=np.float64)
    if aux.ndim != 2 or aux.shape[1] != N_RANK + N_SHIFT:
        raise ValueError(f"aux targets must be (B, 16), got {aux.shape}")
    primary = ad.reshape(_task_loss(preds.primary, np.asarray(primary_target), task), (1,))
    rank = _task_loss(preds.rank, aux[:, :N_RANK].T, TaskKind.regression(*task.target_range))
    shift = _task_loss(preds.shift, aux[:, N_RANK:].T, task)
    losses = ad.concat([primary, rank, shift], axis=0)
    total = ad.sum(ad.mul(losses, w.astype(losses.dtype)))
    return total, losses


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: HanModel, directory, vocab_digest: str | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float32, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = {
        "config": model.cfg.to_json(),
        "vocab_size": model.vocab_size,
        "vocab_hash": vocab_digest,
        "params": entries,
        "params_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    (directory / "params.bin").write_bytes(blob)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory) -> tuple[HanModel, dict]:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    blob = (directory / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["params_sha256"]:
        raise ValueError(f"{directory}: params.bin does not match its manifest hash")
    flat = np.frombuffer(blob, dtype="<f4")
    cfg = ModelConfig.from_json(manifest["config"])
    model = HanModel(cfg, manifest["vocab_size"])
    for e in manifest["params"]:
        size = int(np.prod(e["shape"], dtype=int))
        model.params[e["name"]].data[...] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"])
    return model, manifest
